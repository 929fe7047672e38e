"""
Evaluation metrics and the replicated simulation campaign.

Subspace accuracy is measured through projection matrices, so any rotation
of an estimated basis scores the same.  Policy accuracy uses the synthetic
oracle; :func:`ipw_value_estimate` is the data-only alternative for
observational test sets.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .dataset import DoseTrial, GroundTruth, generate_setting
from .direct import dose_grid, fit_direct, subspace_starts
from .kernel import nw_regress, silverman_bandwidths
from .pseudo import fit_pseudo_direct, second_stage_rule
from .stiefel import OptimizerOptions

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "MetricSet",
    "RESULT_COLUMNS",
    "METHODS",
    "format_table",
    "ipw_value_estimate",
    "policy_metrics",
    "projection",
    "run_experiment",
    "run_replication",
    "subspace_metrics",
    "write_results",
]

logger = logging.getLogger(__name__)

METHODS = ("direct", "pseudo_direct", "kernel_baseline")
RESULT_COLUMNS = ("setting", "rep", "seed", "method", "reward_mean", "dose_dist",
                  "frobenius", "trace_corr", "canon_corr", "iterations", "termination",
                  "monotone")
METRIC_COLUMNS = ("reward_mean", "dose_dist", "frobenius", "trace_corr", "canon_corr")
TEST_SEED_OFFSET = 1_000_000


@dataclass
class MetricSet:
    """Evaluation summary; ``None`` marks a metric that does not apply."""

    mean_reward: Optional[float] = None
    dose_distance: Optional[float] = None
    frobenius: Optional[float] = None
    trace_corr: Optional[float] = None
    canonical_corr: Optional[float] = None
    ipw_value: Optional[float] = None

    def merge(self, other: "MetricSet") -> "MetricSet":
        data = asdict(self)
        data.update({k: v for k, v in asdict(other).items() if v is not None})
        return MetricSet(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def projection(B: NDArray) -> NDArray:
    """B (B^T B)^{-1} B^T."""
    B = np.asarray(B, dtype=float)
    if np.linalg.matrix_rank(B) < B.shape[1]:
        raise ValueError("basis is rank deficient")
    return B @ np.linalg.solve(B.T @ B, B.T)


def _canonical_correlations(U: NDArray, V: NDArray) -> NDArray:
    U = U - U.mean(axis=0)
    V = V - V.mean(axis=0)
    qu, ru = np.linalg.qr(U)
    qv, rv = np.linalg.qr(V)
    if min(np.abs(np.diag(ru)).min(), np.abs(np.diag(rv)).min()) < 1e-12:
        raise ValueError("projected test covariates are rank deficient")
    return np.clip(np.linalg.svd(qu.T @ qv, compute_uv=False), 0.0, 1.0)


def subspace_metrics(B_true: NDArray, B_hat: NDArray,
                     X_test: Optional[NDArray] = None) -> MetricSet:
    """Frobenius distance, trace correlation and mean canonical correlation.

    The trace correlation divides by the number of columns of ``B_hat``.
    The canonical correlation needs ``X_test`` with more rows than columns
    and averages the min(d_true, d_hat) sample canonical correlations.
    """
    B_true = np.atleast_2d(np.asarray(B_true, dtype=float).T).T
    B_hat = np.atleast_2d(np.asarray(B_hat, dtype=float).T).T
    P, Ph = projection(B_true), projection(B_hat)
    d = B_hat.shape[1]
    frob = float(np.linalg.norm(P - Ph))
    trace = float(np.clip(np.trace(P @ Ph) / d, 0.0, 1.0))
    canon = None
    if X_test is not None:
        X_test = np.asarray(X_test, dtype=float)
        if X_test.shape[0] <= X_test.shape[1]:
            raise ValueError("canonical correlation needs more test rows than covariates")
        canon = float(np.mean(_canonical_correlations(X_test @ B_true, X_test @ B_hat)))
    return MetricSet(frobenius=frob, trace_corr=trace, canonical_corr=canon)


def policy_metrics(gt: GroundTruth, rule, B_hat: NDArray, X_test: NDArray) -> MetricSet:
    """True mean reward and squared dose error of ``rule(X_test @ B_hat)``."""
    X_test = np.asarray(X_test, dtype=float)
    doses = np.asarray(rule(X_test @ np.asarray(B_hat, dtype=float)), dtype=float).ravel()
    return MetricSet(
        mean_reward=float(np.mean(gt.mean_reward(X_test, doses))),
        dose_distance=float(np.mean((doses - gt.optimal_dose(X_test)) ** 2)),
    )


def ipw_value_estimate(test: DoseTrial, recommended: NDArray, h=None) -> float:
    """Kernel value of the recommended doses using only the test records.

    mean_j  sum_i (R_i / P_i) K_h(x_j - x_i, a_j - A_i) / sum_i K_h(x_j - x_i, a_j - A_i)

    The kernel runs over the stacked (p + 1)-vector; ``h`` defaults to the
    normal-reference rule with dimension p and each column's std.
    """
    if test.propensity is None:
        raise ValueError("test data carry no propensity column")
    recommended = np.asarray(recommended, dtype=float).ravel()
    if recommended.size != test.n:
        raise ValueError("need one recommended dose per test record")
    anchors = np.column_stack([test.covariates, test.doses])
    if h is None:
        h = silverman_bandwidths(anchors, test.p)
    queries = np.column_stack([test.covariates, recommended])
    values, _ = nw_regress(anchors, test.rewards / test.propensity, queries, h)
    return float(values.mean())


# ---------------------------------------------------------------------------
# campaigns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation campaign.

    ``d=None`` uses the setting's structural dimension for direct learning
    and the reward dimension for pseudo-direct learning.  ``warm_start``
    (direct only) seeds the first ``warm_starts`` restarts inside a
    pseudo-direct estimate of the reward subspace.
    """

    setting: int = 1
    p: int = 10
    method: str = "pseudo_direct"
    d: Optional[int] = None
    reps: int = 10
    n_train: int = 400
    n_test: int = 3000
    seed: int = 42
    q: Optional[int] = None
    loo: bool = False
    warm_start: bool = True
    warm_starts: int = 3
    threads: int = 1
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.setting not in (1, 2, 3, 4, 5):
            raise ValueError("setting must be in 1..5")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.p < 5 or self.n_train < 10 or self.n_test <= self.p:
            raise ValueError("need p >= 5, n_train >= 10 and n_test > p")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: List[dict]
    aggregate: Dict[str, Dict[str, Optional[float]]]


def _dims(config: ExperimentConfig, gt: GroundTruth):
    if config.d is not None:
        return config.d
    if config.method == "pseudo_direct":
        return gt.reward_basis.shape[1]
    return gt.structural_dim


def run_replication(config: ExperimentConfig, rep: int) -> dict:
    """Fit and score one replication; failures become a row with NaN metrics."""
    seed = config.seed + rep
    row = {"setting": config.setting, "rep": rep, "seed": seed, "method": config.method}
    try:
        train, gt = generate_setting(config.setting, config.n_train, config.p, seed)
        test, _ = generate_setting(config.setting, config.n_test, config.p, seed + TEST_SEED_OFFSET)
        opts = config.optimizer.with_(seed=seed)
        if config.method == "kernel_baseline":
            B = np.eye(config.p)
            rule = second_stage_rule(train, B, dose_grid(train, config.q))
            iterations, termination, monotone = 0, "none", None
            sub = MetricSet()
        else:
            d = _dims(config, gt)
            if config.method == "direct":
                initial = None
                if config.warm_start:
                    k = max(d, gt.reward_basis.shape[1]) if config.d is None else d + 1
                    k = min(k, config.p - 1)
                    span, _ = fit_pseudo_direct(train, k, opts.with_(restarts=2), loo=config.loo)
                    initial = subspace_starts(span, d, config.warm_starts, seed)
                B, rule, report = fit_direct(train, d, opts, q=config.q, initial=initial)
            else:
                B, report = fit_pseudo_direct(train, d, opts, loo=config.loo)
                rule = second_stage_rule(train, B, dose_grid(train, config.q))
            iterations, termination = report.iterations, report.termination
            monotone = report.is_monotone()
            B_true = gt.basis if config.method == "direct" or gt.basis.shape[1] == d else gt.reward_basis
            sub = subspace_metrics(B_true, B, test.covariates)
        pol = policy_metrics(gt, rule, B, test.covariates)
        metrics = pol.merge(sub)
        row.update(
            reward_mean=metrics.mean_reward, dose_dist=metrics.dose_distance,
            frobenius=metrics.frobenius, trace_corr=metrics.trace_corr,
            canon_corr=metrics.canonical_corr, iterations=iterations,
            termination=termination, monotone=monotone,
        )
    except Exception as exc:  # recorded per row; the campaign goes on
        logger.warning("replication %d failed: %s", rep, exc)
        row.update({k: None for k in METRIC_COLUMNS})
        row.update(iterations=0, termination=f"error: {type(exc).__name__}: {exc}",
                   monotone=None)
    return row


def _aggregate(rows: Sequence[dict]) -> Dict[str, Dict[str, Optional[float]]]:
    out = {}
    for col in METRIC_COLUMNS:
        vals = np.array([r[col] for r in rows if r.get(col) is not None], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[col] = {"mean": None, "sd": None, "count": 0}
        else:
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out[col] = {"mean": float(vals.mean()), "sd": sd, "count": int(vals.size)}
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run ``config.reps`` independent replications (seed + rep each)."""
    reps = range(config.reps)
    if config.threads > 1 and config.reps > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            rows = list(pool.map(run_replication, [config] * config.reps, reps))
    else:
        rows = [run_replication(config, r) for r in reps]
    return ExperimentResult(config, rows, _aggregate(rows))


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results(result: ExperimentResult, out_dir) -> Dict[str, Path]:
    """Write ``results.csv`` (replication rows then mean/sd rows) and ``summary.json``."""
    out_dir = Path(out_dir)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in result.rows:
        writer.writerow([_fmt(row.get(c)) for c in RESULT_COLUMNS])
    cfg = result.config
    for stat in ("mean", "sd"):
        writer.writerow([
            _fmt(result.aggregate[c][stat]) if c in METRIC_COLUMNS else
            {"setting": str(cfg.setting), "rep": stat, "method": cfg.method}.get(c, "")
            for c in RESULT_COLUMNS
        ])
    csv_path = out_dir / "results.csv"
    json_path = out_dir / "summary.json"
    config = asdict(cfg)
    summary = {"config": config, "aggregate": result.aggregate, "rows": result.rows}
    _atomic_write(csv_path, buf.getvalue())
    _atomic_write(json_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}


def format_table(result: ExperimentResult) -> str:
    """Aggregate metrics as ``mean (sd)`` cells."""
    cfg = result.config
    header = ["method", "Reward", "Dose distance", "Frobenius", "Trace", "Canonical"]
    cells = [cfg.method]
    for col in METRIC_COLUMNS:
        agg = result.aggregate[col]
        cells.append("-" if agg["mean"] is None else f"{agg['mean']:.2f} ({agg['sd']:.2f})")
    widths = [max(len(a), len(b)) for a, b in zip(header, cells)]
    title = f"setting {cfg.setting}, p={cfg.p}, {cfg.reps} replications"
    lines = [title,
             "  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join(c.ljust(w) for c, w in zip(cells, widths))]
    return "\n".join(lines)
