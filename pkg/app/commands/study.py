import logging

from app.commands._common import (
    add_config_flag,
    emit_json,
    load_config,
    load_scenario_file,
    scenario_of,
    split_list,
)
from app.models.config import StudyConfig
from app.services.study_service import run_study, write_report

log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "study", help="simulation study: replicate, fit, aggregate metrics"
    )
    p.add_argument("--preset", help="built-in scenario name")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument(
        "--methods", type=split_list(), help="e.g. HL11,HL01,AGH1"
    )
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int, help="base seed of the study")
    p.add_argument("--workers", type=int, help="replicate processes")
    p.add_argument("--study-id", help="checkpoint key")
    p.add_argument(
        "--fresh",
        action="store_true",
        help="discard checkpoints of this study before running",
    )
    p.add_argument("--csv", help="metrics CSV path")
    p.add_argument("--json", help="StudyReport JSON path")
    p.add_argument("--timings", help="timing table CSV path")
    add_config_flag(p)
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_config(
        StudyConfig,
        args,
        {
            "preset": args.preset,
            "scenario": load_scenario_file(args.scenario),
            "methods": args.methods,
            "n_replicates": args.replicates,
            "seed": args.seed,
            "workers": args.workers,
            "study_id": args.study_id,
            "resume": False if args.fresh else None,
            "output_csv": args.csv,
            "output_json": args.json,
            "timings_csv": args.timings,
        },
    )
    # the scenario's own seed is replaced per replicate
    scenario = scenario_of(cfg.model_copy(update={"seed": None}))
    report = run_study(
        scenario,
        cfg.methods,
        cfg.n_replicates,
        cfg.seed,
        cfg.options,
        workers=cfg.workers,
        study_id=cfg.study_id,
        resume=cfg.resume,
    )
    write_report(report, cfg.output_csv, cfg.output_json, cfg.timings_csv)
    if not (cfg.output_csv or cfg.output_json):
        emit_json(report, None)
    for s in report.summaries:
        log.info(
            "%s: %d ok, %d failed, median %.3fs",
            s.method,
            s.replicates,
            s.failures,
            s.time_median or 0.0,
        )
    return 0
