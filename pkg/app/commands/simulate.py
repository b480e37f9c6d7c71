import logging

from app.commands._common import (
    add_config_flag,
    emit_json,
    load_config,
    load_scenario_file,
    scenario_of,
    threads_of,
)
from app.models.config import SimulateConfig
from app.services.ingest_service import write_dataset
from app.services.simgen_service import simulate, summarize_structure

log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "simulate", help="generate a synthetic EHR dataset CSV"
    )
    p.add_argument("--preset", help="built-in scenario name")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="dataset CSV path")
    p.add_argument("--summary", help="structure summary JSON path")
    add_config_flag(p)
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_config(
        SimulateConfig,
        args,
        {
            "preset": args.preset,
            "scenario": load_scenario_file(args.scenario),
            "seed": args.seed,
            "output": args.output,
            "summary_output": args.summary,
        },
    )
    scenario = scenario_of(cfg)
    sim = simulate(scenario, threads=threads_of(cfg))
    summary = summarize_structure(sim.frame, scenario.label)
    log.info(
        "visits/IP %g (%g), HCF/IP %g (%g), event rate %.4f",
        summary.visits_per_ip.median,
        summary.visits_per_ip.iqr,
        summary.hcf_per_ip.median,
        summary.hcf_per_ip.iqr,
        summary.event_rate or 0.0,
    )
    if cfg.output:
        write_dataset(sim.frame, cfg.output)
    if cfg.summary_output or not cfg.output:
        emit_json(summary, cfg.summary_output)
    return 0
