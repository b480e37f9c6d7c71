"""
Timing harness: fit wall time and per-stage breakdown over a ladder of
dataset sizes, plus serial against threaded deterministic reductions.
"""

import logging
import time
from typing import Sequence

import numpy as np

from app.models.bench import BenchReport, BenchRow
from app.models.enums import FamilyKind, Grouping, OutcomeKind
from app.models.options import FitOptions
from app.models.scenario import SimScenario
from app.services.estimate_service import fit_label
from app.services.ingest_service import build_spec
from app.services.simgen_service import simulate, stream
from app.utils.reduction import chunk_bounds, parallel_chunked_sum

log = logging.getLogger(__name__)

_REDUCTION_STAGE = 9


def _fit_row(
    scenario: SimScenario,
    n_ip: int,
    method: str,
    grouping: Grouping,
    options: FitOptions,
) -> BenchRow:
    sized = scenario.model_copy(update={"n_ip": n_ip})
    sim = simulate(sized)
    family = (
        FamilyKind.POISSON
        if sized.outcome is OutcomeKind.POISSON_COUNTS
        else FamilyKind.BERNOULLI
    )
    spec = build_spec(sim.frame, family, grouping, sim.covariates, sim.knots)
    start = time.perf_counter()
    res = fit_label(spec, method, options, grouping.value)
    seconds = time.perf_counter() - start
    t = res.timings
    log.info(
        "bench N_IP=%d N=%d: %.3fs (tape %.3f, stage1 %.3f, stage2 %.3f, "
        "uncertainty %.3f)",
        n_ip,
        spec.dataset.n_obs,
        seconds,
        t.tape_build,
        t.stage1,
        t.stage2,
        t.uncertainty,
    )
    return BenchRow(
        kind="fit",
        n_ip=n_ip,
        n_obs=spec.dataset.n_obs,
        seconds=seconds,
        tape_build=t.tape_build,
        stage1=t.stage1,
        stage2=t.stage2,
        uncertainty=t.uncertainty,
    )


def reduction_rows(
    size: int, thread_counts: Sequence[int], seed: int = 0
) -> list[BenchRow]:
    """Time the fixed-chunk sum of `size` values at each thread count."""
    values = stream(seed, _REDUCTION_STAGE).standard_normal(size)
    rows = []
    for threads in thread_counts:
        start = time.perf_counter()
        total = parallel_chunked_sum(
            lambda a, b: float(np.sum(values[a:b])), size, threads
        )
        rows.append(
            BenchRow(
                kind="reduction",
                n_obs=size,
                threads=threads,
                seconds=time.perf_counter() - start,
                value=total,
            )
        )
    log.info(
        "reduction of %d values over %d chunks: %s",
        size,
        len(chunk_bounds(size)),
        ", ".join(f"{r.threads}t={r.seconds:.4f}s" for r in rows),
    )
    return rows


def growth_exponent(rows: list[BenchRow]) -> float | None:
    """Slope of log wall time against log N."""
    fits = [r for r in rows if r.kind == "fit" and r.seconds > 0]
    if len({r.n_obs for r in fits}) < 2:
        return None
    x = np.log([r.n_obs for r in fits])
    y = np.log([r.seconds for r in fits])
    return float(np.polyfit(x, y, 1)[0])


def run_bench(
    scenario: SimScenario,
    sizes: Sequence[int],
    method: str = "HL11",
    grouping: Grouping | str = Grouping.IP,
    thread_counts: Sequence[int] = (1, 4),
    reduction_size: int = 1_000_000,
    options: FitOptions | None = None,
) -> BenchReport:
    opts = options or FitOptions()
    grouping = Grouping(grouping)
    report = BenchReport(scenario=scenario.label, method=method)
    for n_ip in sizes:
        report.rows.append(_fit_row(scenario, n_ip, method, grouping, opts))
    report.growth_exponent = growth_exponent(report.rows)
    if thread_counts:
        red = reduction_rows(reduction_size, thread_counts, scenario.seed)
        report.rows.extend(red)
        report.reductions_identical = len({r.value for r in red}) == 1
    return report
