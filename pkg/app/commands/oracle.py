import logging

import pandas as pd

from app.commands._common import (
    add_config_flag,
    emit_json,
    load_config,
    parse_knots,
    split_list,
)
from app.models.config import OracleConfig
from app.services.ingest_service import build_spec, read_dataset
from app.services.oracle_service import compare

log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "oracle",
        help="compare LA, AGH(m) and a quadrature oracle at one point",
    )
    p.add_argument("input", nargs="?", help="dataset CSV")
    p.add_argument("--family", choices=["poisson", "bernoulli", "gaussian"])
    p.add_argument("--grouping", choices=["ip", "hcf", "ip+hcf"])
    p.add_argument("--covariates", type=split_list())
    p.add_argument("--knot", action="append", metavar="NAME=LO,HI:K1,K2")
    p.add_argument("--beta", type=split_list(float))
    p.add_argument("--sigma", type=split_list(float))
    p.add_argument("--phi", type=float)
    p.add_argument("--orders", type=split_list(int), help="e.g. 1,5,9")
    p.add_argument("--oracle-order", type=int)
    p.add_argument(
        "--fit-method", help="method giving the point when none is given"
    )
    p.add_argument("--output", "-o", help="report JSON (default stdout)")
    p.add_argument("--table", help="comparison table CSV")
    add_config_flag(p)
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_config(
        OracleConfig,
        args,
        {
            "input": args.input,
            "family": args.family,
            "grouping": args.grouping,
            "covariates": args.covariates,
            "knots": parse_knots(args.knot),
            "beta": args.beta,
            "sigma": args.sigma,
            "phi": args.phi,
            "orders": args.orders,
            "oracle_order": args.oracle_order,
            "fit_method": args.fit_method,
            "output": args.output,
        },
    )
    spec = build_spec(
        read_dataset(cfg.input),
        cfg.family,
        cfg.grouping,
        cfg.covariates,
        cfg.knots,
        cfg.intercept,
    )
    report = compare(
        spec,
        cfg.beta,
        cfg.sigma,
        cfg.phi,
        cfg.orders,
        cfg.oracle_order,
        cfg.fit_method,
        cfg.grouping.value,
    )
    for row in report.rows:
        log.info(
            "%-8s loglik=%s delta=%s %s",
            row.approximation,
            row.loglik,
            row.delta,
            row.note,
        )
    emit_json(report, cfg.output)
    if args.table:
        rows = [r.model_dump() for r in report.rows]
        pd.DataFrame(rows).to_csv(args.table, index=False, encoding="utf-8")
    return 0
