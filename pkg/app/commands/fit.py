import logging
from pathlib import Path

from app.commands._common import (
    add_config_flag,
    emit_json,
    load_config,
    parse_knots,
    split_list,
    threads_of,
)
from app.models.config import FitConfig
from app.models.enums import Parameterization
from app.services.curves_service import spline_curves
from app.services.estimate_service import fit_label
from app.services.ingest_service import build_spec, read_dataset

log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "fit", help="fit a GLMM to a dataset CSV and write FitResult JSON"
    )
    p.add_argument("input", nargs="?", help="dataset CSV")
    p.add_argument("--family", choices=["poisson", "bernoulli", "gaussian"])
    p.add_argument("--grouping", choices=["ip", "hcf", "ip+hcf"])
    p.add_argument(
        "--covariates", type=split_list(), help="comma-separated columns"
    )
    p.add_argument(
        "--knot",
        action="append",
        metavar="NAME=LO,HI:K1,K2",
        help="natural-spline knots of a covariate (repeatable)",
    )
    p.add_argument("--method", help="HL11, HL01, MLE, AGH0 or AGH<m>")
    p.add_argument("--output", "-o", help="FitResult JSON (default stdout)")
    p.add_argument("--curves", help="CSV of fitted spline curves")
    p.add_argument(
        "--no-se", action="store_true", help="skip standard errors"
    )
    p.add_argument(
        "--refine",
        action="store_true",
        help="re-solve the random effects at the final estimates",
    )
    p.add_argument(
        "--raw-sd",
        action="store_true",
        help="optimize σ directly instead of log σ",
    )
    add_config_flag(p)
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_config(
        FitConfig,
        args,
        {
            "input": args.input,
            "family": args.family,
            "grouping": args.grouping,
            "covariates": args.covariates,
            "knots": parse_knots(args.knot),
            "method": args.method,
            "output": args.output,
            "curves_output": args.curves,
        },
    )
    updates: dict = {"threads": threads_of(cfg)}
    if args.no_se:
        updates["compute_se"] = False
    if args.refine:
        updates["refine_random_effects"] = True
    if args.raw_sd:
        updates["parameterization"] = Parameterization.RAW_SD
    options = cfg.options.model_copy(update=updates)

    frame = read_dataset(cfg.input)
    spec = build_spec(
        frame,
        cfg.family,
        cfg.grouping,
        cfg.covariates,
        cfg.knots,
        cfg.intercept,
    )
    result = fit_label(spec, cfg.method, options, cfg.grouping.value)
    result = result.model_copy(update={"knots": cfg.knots})
    emit_json(result, cfg.output)
    if cfg.curves_output:
        curves = spline_curves(result, cfg.knots, cfg.curve_points)
        out = Path(cfg.curves_output)
        out.parent.mkdir(parents=True, exist_ok=True)
        curves.to_csv(out, index=False, encoding="utf-8")
        log.info("wrote %d curve points to %s", len(curves), out)
    return 0
