"""
Helpers shared by the command modules: config loading with flag
overrides, list/knot flag parsing, scenario selection and JSON output.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Callable, TypeVar

from pydantic import BaseModel

from app.config import get_settings
from app.errors import ConfigError
from app.models.options import KnotSpec
from app.models.scenario import SimScenario
from app.utils.presets import get_preset

log = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def add_config_flag(parser) -> None:
    parser.add_argument(
        "--config", help="JSON run configuration; flags override its keys"
    )
    parser.add_argument(
        "--threads", type=int, help="worker threads (default HLIK_THREADS)"
    )


def load_config(model: type[M], args, overrides: dict) -> M:
    """Config file values, then every flag that was actually given."""
    data: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    if getattr(args, "threads", None) is not None:
        data["threads"] = args.threads
    data.update({k: v for k, v in overrides.items() if v is not None})
    return model.model_validate(data)


def split_list(cast: Callable = str):
    """argparse type for comma-separated lists."""

    def parse(text: str) -> list:
        try:
            return [cast(x.strip()) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad list value '{text}': {exc}") from exc

    return parse


def parse_knots(items: list[str] | None) -> dict[str, KnotSpec] | None:
    """`name=lo,hi:k1,k2` entries into knot specs."""
    if not items:
        return None
    out: dict[str, KnotSpec] = {}
    for item in items:
        name, sep, rest = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"knot spec '{item}' must read name=lo,hi:k1,k2")
        bounds, _sep, interior = rest.partition(":")
        try:
            lo, hi = (float(x) for x in bounds.split(","))
            knots = [float(x) for x in interior.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"knot spec '{item}': {exc}") from exc
        out[name.strip()] = KnotSpec(boundary=(lo, hi), interior=knots)
    return out


def scenario_of(cfg) -> SimScenario:
    if cfg.preset is not None:
        return get_preset(cfg.preset, cfg.seed)
    scenario = cfg.scenario
    if cfg.seed is not None:
        scenario = scenario.model_copy(update={"seed": cfg.seed})
    return scenario


def load_scenario_file(path: str | None) -> dict | None:
    if not path:
        return None
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def threads_of(cfg) -> int:
    return get_settings().resolved_threads(cfg.threads)


def emit_json(model: BaseModel, path: str | None) -> None:
    text = model.model_dump_json(indent=2)
    if path is None:
        sys.stdout.write(text + "\n")
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    log.info("wrote %s", out)
