"""
Scenario preset lookup. Resolution: alias → exact → prefix → fuzzy.
"""

import logging

from cachetools import LRUCache, cached
from rapidfuzz import fuzz, process

from app.db.preset_data import PRESET_ALIASES, PRESETS
from app.errors import ConfigError
from app.models.scenario import SimScenario

log = logging.getLogger(__name__)

_ALL_KEYS = sorted(PRESETS)


def _clean(raw: str) -> str:
    return "-".join(raw.lower().replace("_", " ").split())


@cached(LRUCache(maxsize=128))
def resolve_preset_name(raw: str) -> str:
    if not raw or not raw.strip():
        raise ConfigError("empty preset name")
    cleaned = _clean(raw)
    if cleaned in PRESET_ALIASES:
        return PRESET_ALIASES[cleaned]
    if cleaned in PRESETS:
        return cleaned
    candidates = [k for k in _ALL_KEYS if k.startswith(cleaned)]
    if len(candidates) == 1:
        return candidates[0]
    match = process.extractOne(
        cleaned, _ALL_KEYS, scorer=fuzz.WRatio, score_cutoff=90
    )
    if match:
        key, score, _idx = match
        log.info("preset '%s' resolved to '%s' (score %.0f)", raw, key, score)
        return key
    close = process.extract(cleaned, _ALL_KEYS, scorer=fuzz.WRatio, limit=3)
    hint = ", ".join(k for k, _s, _i in close)
    raise ConfigError(f"unknown preset '{raw}'; closest: {hint}")


def get_preset(raw: str, seed: int | None = None) -> SimScenario:
    """Scenario of a named preset, optionally with its seed replaced."""
    data = dict(PRESETS[resolve_preset_name(raw)])
    if seed is not None:
        data["seed"] = seed
    return SimScenario.model_validate(data)


def list_presets() -> list[str]:
    return list(_ALL_KEYS)
