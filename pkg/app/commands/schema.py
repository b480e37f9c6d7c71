import json
import logging
from pathlib import Path

from app.models.bench import BenchReport, OracleReport
from app.models.config import (
    BenchConfig,
    FitConfig,
    OracleConfig,
    SimulateConfig,
    StudyConfig,
)
from app.models.fit import FitResult
from app.models.scenario import SimScenario, StructureSummary
from app.models.study import StudyReport

log = logging.getLogger(__name__)

SCHEMA_MODELS = (
    FitResult,
    StudyReport,
    SimScenario,
    StructureSummary,
    OracleReport,
    BenchReport,
    FitConfig,
    SimulateConfig,
    StudyConfig,
    OracleConfig,
    BenchConfig,
)


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "schema", help="write JSON Schemas of every input and output"
    )
    p.add_argument("--out-dir", default="docs/schemas")
    p.set_defaults(handler=run)


def write_schemas(out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for model in SCHEMA_MODELS:
        path = out / f"{model.__name__}.schema.json"
        path.write_text(
            json.dumps(model.model_json_schema(), indent=2), encoding="utf-8"
        )
        written.append(path)
    log.info("wrote %d schemas to %s", len(written), out)
    return written


def run(args) -> int:
    write_schemas(args.out_dir)
    return 0
