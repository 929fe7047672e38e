"""
Pseudo-direct learning: find the basis that best explains the reward.

The basis minimises the in-sample squared error of the Nadaraya-Watson fit
of ``R`` on ``(B^T X, A)``,

    psi(B) = mean_i (R_i - M(B^T x_i, A_i))^2,

and a second stage picks, for each subject, the grid dose with the largest
estimated reward in the reduced space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .dataset import DoseTrial
from .direct import DoseGrid, dose_grid, grid_reward_surface, reduced_bandwidths
from .kernel import BandwidthSpec, nw_regress
from .stiefel import (
    FitReport,
    OptimizerOptions,
    _pick_best,
    random_orthonormal,
    stiefel_descent,
)

__all__ = [
    "GridKernelRule",
    "fit_pseudo_direct",
    "holdout_psi",
    "psi_objective",
    "second_stage_rule",
    "select_dimension",
]

logger = logging.getLogger(__name__)


def psi_objective(trial: DoseTrial, B: NDArray, h: Optional[NDArray] = None,
                  loo: bool = False) -> float:
    """Mean squared residual of the NW reward fit at the sample points."""
    return _psi(trial, B, h, loo)[0]


def _psi(trial, B, h=None, loo=False):
    if h is None:
        h = reduced_bandwidths(trial, B)
    U = np.column_stack([trial.covariates @ B, trial.doses])
    fitted, fallbacks = nw_regress(U, trial.rewards, U, h, exclude_self=loo)
    return float(np.mean((trial.rewards - fitted) ** 2)), fallbacks


class _PsiObjective:
    def __init__(self, trial, h, loo):
        self.trial, self.h, self.loo = trial, h, loo
        self.fallbacks = 0

    def __call__(self, B):
        v, fb = _psi(self.trial, B, self.h, self.loo)
        self.fallbacks += fb
        return v


def fit_pseudo_direct(
    trial: DoseTrial,
    d: int,
    opts: Optional[OptimizerOptions] = None,
    loo: bool = False,
    initial: Optional[NDArray] = None,
    seeds: Optional[Sequence[int]] = None,
    bandwidth: Optional[BandwidthSpec] = None,
) -> Tuple[NDArray, FitReport]:
    """Minimise psi over orthonormal p x d bases.

    The bandwidth is set by the normal-reference rule at each restart's
    starting basis and held fixed during that restart.  Restarts are ranked
    by psi at their final basis with the bandwidth recomputed there, so
    runs that froze different bandwidths compete on the same footing.
    """
    opts = (opts or OptimizerOptions()).with_(sense="minimize")
    if not 1 <= d < trial.p:
        raise ValueError(f"need 1 <= d < p, got d={d}, p={trial.p}")
    if trial.n < 10:
        raise ValueError("pseudo-direct learning needs at least 10 observations")
    if seeds is None:
        seeds = [opts.seed + r for r in range(opts.restarts)]
    runs = []
    for r, seed in enumerate(seeds):
        B0 = initial if (r == 0 and initial is not None) else random_orthonormal(trial.p, d, seed)
        objective = _PsiObjective(trial, reduced_bandwidths(trial, B0, bandwidth), loo)
        B, rep = stiefel_descent(objective, B0, opts)
        rep.restart_index = r
        rep.denominator_fallbacks = objective.fallbacks
        rep.final_value = psi_objective(trial, B, reduced_bandwidths(trial, B, bandwidth), loo)
        logger.debug("pseudo restart %d: psi %.6g (%s)", r, rep.final_value, rep.termination)
        runs.append((B, rep))
    return _pick_best(runs, "minimize")


@dataclass(frozen=True)
class GridKernelRule:
    """Recommend the grid dose with the largest NW reward estimate at B^T x.

    Calling the rule on reduced covariates returns doses; :meth:`predict`
    takes raw covariates.
    """

    basis: NDArray
    anchors: NDArray
    doses: NDArray
    rewards: NDArray
    grid: NDArray
    bandwidth: NDArray
    dose_min: float
    dose_max: float

    def __call__(self, Z: NDArray) -> NDArray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[0] == 0:
            return np.empty(0)
        surface, _ = grid_reward_surface(self.anchors, self.doses, self.rewards, Z,
                                         self.grid, self.bandwidth)
        return np.clip(self.grid[np.argmax(surface, axis=1)], self.dose_min, self.dose_max)

    def predict(self, X: NDArray) -> NDArray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.empty(0)
        return self(X @ self.basis)


def second_stage_rule(
    trial: DoseTrial,
    B_hat: NDArray,
    grid: Optional[DoseGrid] = None,
    h: Optional[NDArray] = None,
    bandwidth: Optional[BandwidthSpec] = None,
) -> GridKernelRule:
    """Grid-argmax dose rule on the reduced covariates ``B_hat^T X``.

    ``B_hat`` need not be tall: the identity gives the no-reduction rule on
    raw covariates.
    """
    B_hat = np.asarray(B_hat, dtype=float)
    if grid is None:
        grid = dose_grid(trial)
    if h is None:
        h = reduced_bandwidths(trial, B_hat, bandwidth)
    return GridKernelRule(
        B_hat, trial.covariates @ B_hat, trial.doses.copy(), trial.rewards.copy(),
        np.asarray(grid.points, dtype=float), np.asarray(h, dtype=float),
        float(trial.dose_min), float(trial.dose_max),
    )


def holdout_psi(train: DoseTrial, test: DoseTrial, B: NDArray,
                h: Optional[NDArray] = None) -> float:
    """Mean squared error on ``test`` of the NW reward fit built on ``train``."""
    if h is None:
        h = reduced_bandwidths(train, B)
    anchors = np.column_stack([train.covariates @ B, train.doses])
    queries = np.column_stack([test.covariates @ B, test.doses])
    fitted, _ = nw_regress(anchors, train.rewards, queries, h)
    return float(np.mean((test.rewards - fitted) ** 2))


def select_dimension(
    trial: DoseTrial,
    d_max: int,
    opts: Optional[OptimizerOptions] = None,
    holdout_fraction: float = 0.25,
    seed: int = 0,
    loo: bool = False,
) -> Tuple[int, Dict[int, float]]:
    """Refit for d = 1..d_max on a random split and score each on the holdout.

    Returns the d with the smallest holdout error and the full score table.
    """
    if not 1 <= d_max < trial.p:
        raise ValueError("need 1 <= d_max < p")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(trial.n)
    n_test = max(1, int(round(holdout_fraction * trial.n)))
    test, train = trial.subset(perm[:n_test]), trial.subset(perm[n_test:])
    scores = {}
    for d in range(1, d_max + 1):
        B, _ = fit_pseudo_direct(train, d, opts, loo=loo)
        scores[d] = holdout_psi(train, test, B)
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores
