"""
Dose-trial containers, CSV ingestion and the five synthetic settings.

A trial holds covariates ``X`` (n, p), doses ``A`` (n,), rewards ``R`` (n,)
and optionally the propensity density ``P(A | X)`` (n,).  The synthetic
settings share the two directions

    beta_1 = (1, 0.5, 0, 0, -0.5, 0, ..., 0)
    beta_2 = (0.5, 0, 0.5, -0.5, 1, 0, ..., 0)

and draw ``A ~ Uniform[0, 2]`` independently of ``X`` with
``R ~ Normal(M(X, A), 1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "DataError",
    "DoseTrial",
    "GroundTruth",
    "TrialSchema",
    "SETTING_DOSE_RANGE",
    "beta_vectors",
    "generate_setting",
    "load_trial",
    "save_trial",
    "true_mean_reward",
    "true_optimal_dose",
]

SETTING_DOSE_RANGE = (0.0, 2.0)
SYNTHETIC_PROPENSITY = 0.5  # uniform density on [0, 2]


class DataError(ValueError):
    """Raised for malformed or inconsistent trial data."""


@dataclass(frozen=True)
class DoseTrial:
    """Observed (covariates, dose, reward[, propensity]) records."""

    covariates: NDArray
    doses: NDArray
    rewards: NDArray
    propensity: Optional[NDArray] = None
    dose_min: Optional[float] = None
    dose_max: Optional[float] = None
    covariate_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.array(self.doses, dtype=float).ravel()
        R = np.array(self.rewards, dtype=float).ravel()
        if X.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n, p = X.shape
        if n < 2 or p < 1:
            raise DataError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if A.shape != (n,) or R.shape != (n,):
            raise DataError("doses and rewards must have one entry per row")
        for name, arr in (("covariates", X), ("doses", A), ("rewards", R)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        P = None
        if self.propensity is not None:
            P = np.array(self.propensity, dtype=float).ravel()
            if P.shape != (n,):
                raise DataError("propensity must have one entry per row")
            if not np.all(np.isfinite(P)) or np.any(P <= 0):
                raise DataError("propensity entries must be finite and > 0")
        lo = float(A.min()) if self.dose_min is None else float(self.dose_min)
        hi = float(A.max()) if self.dose_max is None else float(self.dose_max)
        if lo > hi:
            raise DataError(f"dose_min {lo} exceeds dose_max {hi}")
        if A.min() < lo or A.max() > hi:
            raise DataError(f"doses fall outside [{lo}, {hi}]")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(p))
        if len(names) != p:
            raise DataError("covariate_names must match the number of columns")
        for arr in (X, A, R) + ((P,) if P is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "doses", A)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "propensity", P)
        object.__setattr__(self, "dose_min", lo)
        object.__setattr__(self, "dose_max", hi)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, index) -> "DoseTrial":
        """Rows ``index`` of the trial, keeping the declared dose range."""
        index = np.asarray(index)
        return DoseTrial(
            self.covariates[index],
            self.doses[index],
            self.rewards[index],
            None if self.propensity is None else self.propensity[index],
            self.dose_min,
            self.dose_max,
            self.covariate_names,
        )


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialSchema:
    """Column mapping for :func:`load_trial`.

    ``covariates=None`` means every column not claimed by dose, reward or
    propensity, in file order.
    """

    covariates: Optional[Sequence[str]] = None
    dose: str = "a"
    reward: str = "r"
    propensity: Optional[str] = None
    dose_min: Optional[float] = None
    dose_max: Optional[float] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "TrialSchema":
        return cls(**dict(mapping))


def _parse_cell(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {column!r}: non-finite value {text!r}")
    return value


def load_trial(path, schema: TrialSchema | Mapping | None = None) -> DoseTrial:
    """Read a trial from a header-row CSV file.

    Rows are numbered from 1 (the first data row).  Doses outside an explicit
    ``schema.dose_min``/``dose_max`` and non-positive propensities are
    rejected with the offending row and column in the message.
    """
    if schema is None:
        schema = TrialSchema()
    elif not isinstance(schema, TrialSchema):
        schema = TrialSchema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    claimed = {schema.dose, schema.reward}
    if schema.propensity is not None:
        claimed.add(schema.propensity)
    cov_names = list(schema.covariates) if schema.covariates is not None else [
        h for h in header if h not in claimed
    ]
    wanted = cov_names + [schema.dose, schema.reward]
    if schema.propensity is not None:
        wanted.append(schema.propensity)
    for name in wanted:
        if name not in header:
            raise DataError(f"{path}: missing column {name!r}")
    col = {h: k for k, h in enumerate(header)}

    values = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, found {len(row)}")
        for j, name in enumerate(wanted):
            values[i - 1, j] = _parse_cell(row[col[name]].strip(), i, name)

    q = len(cov_names)
    X, A, R = values[:, :q], values[:, q], values[:, q + 1]
    P = None
    if schema.propensity is not None:
        P = values[:, q + 2]
        bad = np.flatnonzero(P <= 0)
        if bad.size:
            raise DataError(
                f"row {bad[0] + 1}, column {schema.propensity!r}: propensity must be positive"
            )
    outside = np.zeros(len(A), dtype=bool)
    if schema.dose_min is not None:
        outside |= A < schema.dose_min
    if schema.dose_max is not None:
        outside |= A > schema.dose_max
    if outside.any():
        i = int(np.flatnonzero(outside)[0]) + 1
        raise DataError(f"row {i}, column {schema.dose!r}: dose outside declared range")
    return DoseTrial(X, A, R, P, schema.dose_min, schema.dose_max, tuple(cov_names))


def save_trial(trial: DoseTrial, path, dose: str = "a", reward: str = "r",
               propensity: str = "prop") -> None:
    """Write ``trial`` in the layout :func:`load_trial` reads by default."""
    header = list(trial.covariate_names) + [dose, reward]
    cols = [trial.covariates, trial.doses[:, None], trial.rewards[:, None]]
    if trial.propensity is not None:
        header.append(propensity)
        cols.append(trial.propensity[:, None])
    data = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Synthetic settings
# ---------------------------------------------------------------------------


def beta_vectors(p: int) -> NDArray:
    """The (p, 2) matrix ``(beta_1, beta_2)`` zero-padded to length ``p``."""
    if p < 5:
        raise ValueError("p must be at least 5")
    B = np.zeros((p, 2))
    B[:5, 0] = [1.0, 0.5, 0.0, 0.0, -0.5]
    B[:5, 1] = [0.5, 0.0, 0.5, -0.5, 1.0]
    return B


def _opt_1(u, v):
    return np.sin(u * v) + 0.75 * (u / (5.0 + (v + 4.0) ** 2)) + 1.0


def _opt_2(u, v):
    return (0.6 * (u > -0.6) * (v < 0.6)
            + 0.7 * np.log(np.abs(u) + 0.5) + 0.5)


def _opt_3(u, v):
    return 3.0 / (5.0 * u ** 2 + 2.5) + 1.0 / (u ** 4 + 1.3)


def _opt_4(u, v):
    return 0.7 / (np.abs(v) / 2.0 + 1.0) + 1.5 * np.log(np.abs(v) + 1.0) - 0.6


def _opt_5(u, v):
    return 0.5 * np.exp(-np.abs(u)) + np.sin(u) + 0.9


def _mean_1(u, v, f, a):
    return 7.0 + 0.5 * u ** 2 + v - 13.0 * np.abs(f - a)


def _mean_2(u, v, f, a):
    return (6.0 + 0.3 * np.log(np.abs(u) + 0.5) + 1.0 * (v < 0.2)
            + 2.0 * (v > -0.7) - 16.0 * (f - a) ** 2)


def _mean_3(u, v, f, a):
    return -8.0 + 0.5 * np.abs(v) + 3.5 * np.cos(v) + 15.0 * np.exp(-((f - a) ** 4))


def _mean_4(u, v, f, a):
    return -5.0 + 1.5 * np.sin(u) + 3.0 * np.cos(u) + 12.0 * np.exp(-((f - a) ** 2))


def _mean_5(u, v, f, a):
    return 7.0 + 0.5 * u ** 2 + 0.5 * np.abs(u) + 4.5 * np.cos(u) - 7.0 * np.abs(f - a)


_OPTIMAL = {1: _opt_1, 2: _opt_2, 3: _opt_3, 4: _opt_4, 5: _opt_5}
_MEAN = {1: _mean_1, 2: _mean_2, 3: _mean_3, 4: _mean_4, 5: _mean_5}
# columns of (beta_1, beta_2) spanning the optimal rule / the mean reward
_RULE_COLUMNS = {1: [0, 1], 2: [0, 1], 3: [0], 4: [1], 5: [0]}
_REWARD_COLUMNS = {1: [0, 1], 2: [0, 1], 3: [0, 1], 4: [0, 1], 5: [0]}


@dataclass(frozen=True)
class GroundTruth:
    """Oracle quantities of a synthetic setting.

    ``basis`` spans the directions the optimal dose depends on (what a
    dose-rule subspace estimate is scored against); ``reward_basis`` spans
    the directions of the mean reward.
    """

    setting_id: int
    p: int

    @property
    def betas(self) -> NDArray:
        return beta_vectors(self.p)

    @property
    def basis(self) -> NDArray:
        return self.betas[:, _RULE_COLUMNS[self.setting_id]]

    @property
    def reward_basis(self) -> NDArray:
        return self.betas[:, _REWARD_COLUMNS[self.setting_id]]

    @property
    def structural_dim(self) -> int:
        return len(_RULE_COLUMNS[self.setting_id])

    def _indices(self, x):
        x = np.asarray(x, dtype=float)
        uv = x @ self.betas
        return uv[..., 0], uv[..., 1]

    def optimal_dose(self, x) -> NDArray | float:
        """f_opt at covariate row(s) ``x`` (shape (p,) or (m, p))."""
        u, v = self._indices(x)
        return _OPTIMAL[self.setting_id](u, v)

    def mean_reward(self, x, a) -> NDArray | float:
        """M(x, a); ``a`` broadcasts against the rows of ``x``."""
        u, v = self._indices(x)
        f = _OPTIMAL[self.setting_id](u, v)
        return _MEAN[self.setting_id](u, v, f, np.asarray(a, dtype=float))


def true_optimal_dose(gt: GroundTruth, x) -> NDArray | float:
    return gt.optimal_dose(x)


def true_mean_reward(gt: GroundTruth, x, a) -> NDArray | float:
    return gt.mean_reward(x, a)


def ar1_covariance(p: int, rho: float = 0.5) -> NDArray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def generate_setting(setting_id: int, n: int, p: int, seed: int) -> Tuple[DoseTrial, GroundTruth]:
    """Draw ``n`` records from synthetic setting ``setting_id`` (1-5).

    Uses NumPy's PCG64 generator seeded with ``seed``; covariates are drawn
    first, then doses, then reward noise, so equal arguments reproduce the
    data bit for bit.
    """
    if setting_id not in _OPTIMAL:
        raise ValueError(f"setting_id must be in 1..5, got {setting_id}")
    if p < 5:
        raise ValueError("p must be at least 5")
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(seed)
    if setting_id in (1, 2):
        X = rng.uniform(-1.0, 1.0, size=(n, p))
    elif setting_id in (3, 4):
        X = rng.standard_normal((n, p))
    else:
        L = np.linalg.cholesky(ar1_covariance(p))
        X = rng.standard_normal((n, p)) @ L.T
    lo, hi = SETTING_DOSE_RANGE
    A = rng.uniform(lo, hi, size=n)
    gt = GroundTruth(setting_id, p)
    R = gt.mean_reward(X, A) + rng.standard_normal(n)
    P = np.full(n, SYNTHETIC_PROPENSITY)
    return DoseTrial(X, A, R, P, lo, hi), gt
