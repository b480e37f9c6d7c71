from app.commands._common import (
    add_config_flag,
    emit_json,
    load_config,
    load_scenario_file,
    scenario_of,
    split_list,
)
from app.models.config import BenchConfig
from app.services.bench_service import run_bench


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "bench", help="timing over a dataset-size ladder and reductions"
    )
    p.add_argument("--preset", help="built-in scenario name")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--sizes", type=split_list(int), help="N_IP ladder, e.g. 100,1000"
    )
    p.add_argument("--method")
    p.add_argument("--grouping", choices=["ip", "hcf", "ip+hcf"])
    p.add_argument(
        "--thread-counts",
        type=split_list(int),
        help="thread counts of the reduction benchmark",
    )
    p.add_argument("--reduction-size", type=int)
    p.add_argument("--output", "-o", help="BenchReport JSON (default stdout)")
    add_config_flag(p)
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_config(
        BenchConfig,
        args,
        {
            "preset": args.preset,
            "scenario": load_scenario_file(args.scenario),
            "seed": args.seed,
            "sizes": args.sizes,
            "method": args.method,
            "grouping": args.grouping,
            "thread_counts": args.thread_counts,
            "reduction_size": args.reduction_size,
            "output": args.output,
        },
    )
    report = run_bench(
        scenario_of(cfg),
        cfg.sizes,
        cfg.method,
        cfg.grouping,
        cfg.thread_counts,
        cfg.reduction_size,
    )
    emit_json(report, cfg.output)
    return 0
