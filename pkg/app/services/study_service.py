"""
Simulation studies: replicate datasets, fit each method, aggregate error
metrics.

Replicates are independent; each one is checkpointed as soon as it
finishes and the report is always folded from the checkpoint in
replicate order, so an interrupted and resumed study reports exactly
what an uninterrupted one would.
"""

import hashlib
import json
import logging
import math
import struct
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from app.db.repositories import checkpoint_repo
from app.db.schema import init_db
from app.errors import HlikError, StructureError
from app.models.enums import FamilyKind, Grouping, Method, OutcomeKind
from app.models.options import FitOptions
from app.models.scenario import SimScenario
from app.models.study import MethodSummary, MetricRow, StudyReport, TimingRow
from app.services.estimate_service import fit, parse_method
from app.services.ingest_service import build_spec
from app.services.simgen_service import SimDataset, simulate

log = logging.getLogger(__name__)

_FACTOR_NAMES = ("ip", "hcf")


# ── Metrics ──────────────────────────────────────────────────────────────────


@dataclass
class _Moments:
    """Running n, Σx, Σx² of deviations; folded in a fixed order."""

    n: int = 0
    total: float = 0.0
    squares: float = 0.0

    def add(self, n: int, total: float, squares: float) -> None:
        self.n += n
        self.total = math.fsum([self.total, total])
        self.squares = math.fsum([self.squares, squares])


def _metric(
    method: str,
    parameter: str,
    truth: float,
    n: int,
    mean: float,
    sd: float,
    mse: float,
) -> MetricRow:
    bias = mean - truth
    row = MetricRow(
        method=method,
        parameter=parameter,
        truth=truth,
        mean=mean,
        mse=mse,
        n=n,
    )
    if sd > 0.0:
        row.std_bias = 100.0 * abs(bias) / sd
    elif bias == 0.0:
        row.std_bias = 0.0
    else:
        row.std_bias_infinite = True
    return row


def compute_metrics(
    estimates: Sequence[float],
    truth: float,
    method: str = "",
    parameter: str = "",
) -> MetricRow:
    """Standardized bias (percent) and MSE of one parameter's estimates."""
    est = np.asarray(estimates, dtype=np.float64)
    if est.size < 2:
        return MetricRow(
            method=method, parameter=parameter, truth=truth, n=int(est.size)
        )
    mean = math.fsum(est) / est.size
    sd = float(np.std(est, ddof=1))
    mse = math.fsum((est - truth) ** 2) / est.size
    return _metric(method, parameter, truth, int(est.size), mean, sd, mse)


def _pooled_metric(method: str, parameter: str, m: _Moments) -> MetricRow:
    """Metrics of û − u pooled over levels and replicates (truth 0)."""
    if m.n < 2:
        return MetricRow(method=method, parameter=parameter, truth=0.0, n=m.n)
    mean = m.total / m.n
    var = max(m.squares - m.n * mean * mean, 0.0) / (m.n - 1)
    return _metric(
        method, parameter, 0.0, m.n, mean, math.sqrt(var), m.squares / m.n
    )


# ── Replicates ───────────────────────────────────────────────────────────────


def replicate_seed(base_seed: int, replicate: int) -> int:
    """First 8 bytes of BLAKE2b over (base seed, replicate index)."""
    digest = hashlib.blake2b(
        struct.pack("<QQ", base_seed, replicate), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _family(scenario: SimScenario) -> FamilyKind:
    if scenario.outcome is OutcomeKind.POISSON_COUNTS:
        return FamilyKind.POISSON
    return FamilyKind.BERNOULLI


def check_methods(methods: Sequence[str]) -> None:
    """Study fits are two-factor; AGH with m > 1 does not apply."""
    for label in methods:
        method, m = parse_method(label)
        if method is Method.AGH and m is not None and m > 1:
            raise StructureError(
                f"{label} needs a single-factor model; study scenarios "
                f"carry crossed IP and HCF effects"
            )


def _deviation_moments(sim: SimDataset, spec, u: list[list[float]]):
    out = []
    truths = (sim.truth.u_ip, sim.truth.u_hcf)
    for k, labels in enumerate(spec.dataset.level_labels):
        truth = truths[k][np.asarray(labels, dtype=np.int64) - 1]
        d = np.asarray(u[k], dtype=np.float64) - truth
        out.append([int(d.size), math.fsum(d), math.fsum(d * d)])
    return out


def _fit_one(sim: SimDataset, spec, label: str, options: FitOptions) -> dict:
    method, m = parse_method(label)
    record: dict = {"method": label}
    start = time.perf_counter()
    try:
        res = fit(spec, method, options, m, Grouping.BOTH.value)
    except HlikError as exc:
        log.warning("%s failed: %s", label, exc.detail)
        record.update(status="failed", error=exc.detail)
        return record
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("%s failed: %r", label, exc)
        record.update(status="failed", error=repr(exc))
        return record
    record.update(
        status="ok",
        seconds=time.perf_counter() - start,
        timings=res.timings.model_dump(),
        names=res.column_names,
        beta=res.beta,
        sigma=res.sigma,
        boundary=res.sigma_boundary,
        deviations=_deviation_moments(sim, spec, res.u),
    )
    return record


def run_replicate(
    scenario: SimScenario,
    methods: Sequence[str],
    options: FitOptions,
    base_seed: int,
    replicate: int,
) -> tuple[int, list[dict]]:
    seed = replicate_seed(base_seed, replicate)
    sim = simulate(scenario, seed)
    spec = build_spec(
        sim.frame,
        _family(scenario),
        Grouping.BOTH,
        sim.covariates,
        sim.knots,
    )
    records = []
    for label in methods:
        rec = _fit_one(sim, spec, label, options)
        rec["replicate"] = replicate
        rec["truth_beta"] = sim.truth.beta.tolist()
        rec["truth_sigma"] = sim.truth.sigma.tolist()
        records.append(rec)
    return replicate, records


# ── Aggregation ──────────────────────────────────────────────────────────────


def aggregate(
    records: list[dict],
    methods: Sequence[str],
    n_replicates: int,
    scenario: str,
    seed: int,
) -> StudyReport:
    """Fold replicate records in replicate order into a StudyReport."""
    records = sorted(records, key=lambda r: (r["replicate"], r["method"]))
    by_method: dict[str, list[dict]] = defaultdict(list)
    for r in records:
        if r["replicate"] < n_replicates:
            by_method[r["method"]].append(r)

    report = StudyReport(
        scenario=scenario,
        seed=seed,
        n_replicates=n_replicates,
        methods=list(methods),
    )
    for label in methods:
        rows = by_method.get(label, [])
        ok = [r for r in rows if r["status"] == "ok"]
        if ok:
            names = ok[0]["names"]
            truth_beta = ok[0]["truth_beta"]
            for j, name in enumerate(names):
                report.metrics.append(
                    compute_metrics(
                        [r["beta"][j] for r in ok], truth_beta[j], label, name
                    )
                )
            truth_sigma = ok[0]["truth_sigma"]
            for k, factor in enumerate(_FACTOR_NAMES):
                report.metrics.append(
                    compute_metrics(
                        [r["sigma"][k] for r in ok],
                        truth_sigma[k],
                        label,
                        f"sigma_{factor}",
                    )
                )
            for k, factor in enumerate(_FACTOR_NAMES):
                moments = _Moments()
                for r in ok:
                    moments.add(*r["deviations"][k])
                report.metrics.append(
                    _pooled_metric(label, f"u_{factor}", moments)
                )
        seconds = np.array([r["seconds"] for r in ok])
        flags = [b for r in ok for b in r["boundary"]]
        summary = MethodSummary(
            method=label,
            replicates=len(ok),
            failures=n_replicates - len(ok),
        )
        if seconds.size:
            q1, med, q3 = np.percentile(seconds, [25, 50, 75])
            summary.time_median = float(med)
            summary.time_iqr = float(q3 - q1)
            summary.boundary_fraction = sum(flags) / len(flags)
        report.summaries.append(summary)
        for r in ok:
            report.timings.append(
                TimingRow(
                    method=label,
                    replicate=r["replicate"],
                    seconds=r["seconds"],
                    **{
                        k: v
                        for k, v in r["timings"].items()
                        if k in TimingRow.model_fields
                    },
                )
            )
    return report


# ── Runner ───────────────────────────────────────────────────────────────────


def study_key(
    scenario: SimScenario,
    methods: Sequence[str],
    seed: int,
    options: FitOptions,
) -> str:
    blob = json.dumps(
        {
            "scenario": scenario.model_dump(mode="json"),
            "methods": list(methods),
            "seed": seed,
            "options": options.model_dump(mode="json"),
        },
        sort_keys=True,
    )
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


def run_study(
    scenario: SimScenario,
    methods: Sequence[str],
    n_replicates: int,
    seed: int,
    options: Optional[FitOptions] = None,
    workers: int = 1,
    study_id: Optional[str] = None,
    resume: bool = True,
    db_path: str | Path | None = None,
) -> StudyReport:
    opts = options or FitOptions(compute_se=False)
    methods = list(methods)
    check_methods(methods)
    key = study_id or study_key(scenario, methods, seed, opts)
    init_db(db_path)
    if not resume:
        dropped = checkpoint_repo.delete_study(key, db_path)
        if dropped:
            log.info("study %s: dropped %d checkpoint rows", key, dropped)

    stored = checkpoint_repo.get_replicates(key, db_path)
    done: dict[int, set[str]] = defaultdict(set)
    for r in stored:
        done[r["replicate"]].add(r["method"])
    pending = [i for i in range(n_replicates) if done[i] != set(methods)]
    log.info(
        "study %s (%s): %d/%d replicates pending, methods=%s",
        key,
        scenario.label,
        len(pending),
        n_replicates,
        ",".join(methods),
    )

    finished = n_replicates - len(pending)
    args = [(scenario, methods, opts, seed, i) for i in pending]
    if workers <= 1:
        results = (run_replicate(*a) for a in args)
        for replicate, records in results:
            checkpoint_repo.insert_replicate(key, replicate, records, db_path)
            finished += 1
            _progress(key, finished, n_replicates, records)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_replicate, *a) for a in args]
            for fut in as_completed(futures):
                replicate, records = fut.result()
                checkpoint_repo.insert_replicate(
                    key, replicate, records, db_path
                )
                finished += 1
                _progress(key, finished, n_replicates, records)

    records = checkpoint_repo.get_replicates(key, db_path)
    return aggregate(records, methods, n_replicates, scenario.label, seed)


def _progress(key: str, i: int, n: int, records: list[dict]) -> None:
    failed = [r["method"] for r in records if r["status"] != "ok"]
    log.info(
        "study %s: replicate %d/%d%s",
        key,
        i,
        n,
        f" (failed: {', '.join(failed)})" if failed else "",
    )


# ── Output ───────────────────────────────────────────────────────────────────


def write_report(
    report: StudyReport,
    csv_path: str | Path | None = None,
    json_path: str | Path | None = None,
    timings_path: str | Path | None = None,
) -> None:
    if csv_path:
        rows = [row.model_dump() for row in report.metrics]
        _write_csv(
            pd.DataFrame(rows, columns=list(MetricRow.model_fields)),
            csv_path,
        )
    if json_path:
        path = Path(json_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    if timings_path:
        rows = [row.model_dump() for row in report.timings]
        _write_csv(
            pd.DataFrame(rows, columns=list(TimingRow.model_fields)),
            timings_path,
        )


def _write_csv(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
    log.info("wrote %s", path)
