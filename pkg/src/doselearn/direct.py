"""
Direct learning: alternate between fitting the dose rule and the basis.

With ``B`` fixed, every subject gets a pseudo-dose: the grid dose that
maximises the kernel estimate of its reward at ``(B^T x_i, a)``.  A Gaussian
kernel ridge regression of those pseudo-doses on ``B^T X`` gives the rule
``f``.  With ``f`` fixed, one Cayley step increases the empirical value

    V(B) = mean_j  NW[R | (B^T X, A) = (B^T x_j, f(B^T x_j))].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, eigh, solve
from scipy.spatial.distance import cdist, pdist

from .dataset import DoseTrial
from .kernel import FLOOR_PER_POINT, BandwidthSpec, nw_regress, silverman_bandwidths
from .stiefel import (
    FitReport,
    OptimizerOptions,
    _pick_best,
    check_orthonormal,
    line_search,
    numeric_gradient,
    random_orthonormal,
    riemannian_gradient_norm,
    skew_update_matrix,
)

__all__ = [
    "DoseGrid",
    "KernelRidgeRule",
    "SingularSystemError",
    "default_lambda_grid",
    "dose_grid",
    "empirical_value",
    "fit_direct",
    "fit_kernel_ridge",
    "gcv_select_lambda",
    "grid_reward_surface",
    "median_heuristic",
    "pseudo_dose_targets",
    "reduced_bandwidths",
    "subspace_starts",
]

logger = logging.getLogger(__name__)


class SingularSystemError(np.linalg.LinAlgError):
    """The ridge system (K + lambda I) w = targets could not be solved."""


@dataclass(frozen=True)
class DoseGrid:
    points: NDArray

    @property
    def q(self) -> int:
        return self.points.size


def dose_grid(trial: DoseTrial, q: Optional[int] = None) -> DoseGrid:
    """q equally spaced doses from the smallest to the largest observed dose."""
    if q is None:
        q = math.ceil(math.sqrt(trial.n))
    if q < 2:
        raise ValueError("a dose grid needs at least two points")
    lo, hi = float(trial.doses.min()), float(trial.doses.max())
    if not hi > lo:
        raise ValueError("observed doses are all equal; cannot build a grid")
    return DoseGrid(np.linspace(lo, hi, q))


def reduced_bandwidths(trial: DoseTrial, B: NDArray,
                       spec: Optional[BandwidthSpec] = None) -> NDArray:
    """Bandwidths for the columns of (B^T X, A); normal-reference by default."""
    data = np.column_stack([trial.covariates @ B, trial.doses])
    if spec is None:
        return silverman_bandwidths(data, B.shape[1])
    return spec.resolve(data, B.shape[1])


def grid_reward_surface(
    Z_anchor: NDArray,
    doses: NDArray,
    rewards: NDArray,
    Z_query: NDArray,
    grid: NDArray,
    h: NDArray,
    floor: Optional[float] = None,
) -> Tuple[NDArray, int]:
    """NW reward estimates at (Z_query[i], grid[g]) as an (m, q) array.

    The kernel factorises over the covariate and dose coordinates, so the
    whole surface costs two matrix products.
    """
    Z_anchor = np.asarray(Z_anchor, dtype=float)
    Z_query = np.asarray(Z_query, dtype=float)
    n, d = Z_anchor.shape
    h = np.asarray(h, dtype=float)
    hz, ha = h[:d], h[d]
    const = np.prod(1.0 / (np.sqrt(2.0 * np.pi) * h))
    Ez = np.exp(-0.5 * cdist(Z_query / hz, Z_anchor / hz, "sqeuclidean"))
    Ea = np.exp(-0.5 * ((np.asarray(grid)[:, None] - np.asarray(doses)[None, :]) / ha) ** 2)
    # centred responses make equal rewards give an exactly flat surface,
    # so argmax ties are real ties rather than rounding noise
    rewards = np.asarray(rewards, dtype=float)
    centre = rewards.mean()
    num = const * (Ez @ (Ea * (rewards - centre)).T)
    den = const * (Ez @ Ea.T)
    floor = FLOOR_PER_POINT * n if floor is None else floor
    low = den < floor
    with np.errstate(invalid="ignore", divide="ignore"):
        surface = centre + num / den
    surface[low] = centre
    return surface, int(low.sum())


def pseudo_dose_targets(
    trial: DoseTrial,
    B: NDArray,
    grid: DoseGrid,
    h: Optional[NDArray] = None,
) -> NDArray:
    """Grid dose maximising each subject's kernel-estimated reward.

    Ties go to the smallest grid dose.  ``h`` defaults to
    :func:`reduced_bandwidths` at ``B``.
    """
    return _pseudo_dose_targets(trial, B, grid, h)[0]


def _pseudo_dose_targets(trial, B, grid, h=None):
    if h is None:
        h = reduced_bandwidths(trial, B)
    Z = trial.covariates @ B
    surface, fallbacks = grid_reward_surface(Z, trial.doses, trial.rewards, Z, grid.points, h)
    return grid.points[np.argmax(surface, axis=1)], fallbacks


# ---------------------------------------------------------------------------
# kernel ridge regression
# ---------------------------------------------------------------------------


def median_heuristic(Z: NDArray) -> float:
    """Median pairwise Euclidean distance among the rows of Z (1.0 if degenerate)."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] < 2:
        return 1.0
    dist = pdist(Z)
    dist = dist[dist > 0]
    return float(np.median(dist)) if dist.size else 1.0


def _rbf(A: NDArray, B: NDArray, scale: float) -> NDArray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * scale ** 2))


@dataclass(frozen=True)
class KernelRidgeRule:
    """f(z) = offset + sum_j w_j exp(-||z - Z_j||^2 / (2 rbf_scale^2)), clipped to the dose range.

    Calling the rule on reduced covariates returns clipped doses;
    :meth:`raw` gives the unclipped expansion.  ``offset`` is zero for every
    ridge fit and only carries the common value of constant targets.
    """

    anchors: NDArray
    weights: NDArray
    rbf_scale: float
    basis: NDArray
    dose_min: float
    dose_max: float
    lam: float = 0.0
    residual: float = 0.0
    offset: float = 0.0

    def raw(self, Z: NDArray) -> NDArray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return self.offset + _rbf(Z, self.anchors, self.rbf_scale) @ self.weights

    def __call__(self, Z: NDArray) -> NDArray:
        return np.clip(self.raw(Z), self.dose_min, self.dose_max)

    def predict(self, X: NDArray) -> NDArray:
        """Recommended doses for covariate rows ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.empty(0)
        return self(X @ self.basis)

    def with_basis(self, B: NDArray) -> "KernelRidgeRule":
        return KernelRidgeRule(self.anchors, self.weights, self.rbf_scale, B,
                               self.dose_min, self.dose_max, self.lam, self.residual, self.offset)


def fit_kernel_ridge(
    Z: NDArray,
    targets: NDArray,
    lam: float,
    rbf_scale: float,
    basis: Optional[NDArray] = None,
    dose_range: Tuple[float, float] = (-np.inf, np.inf),
) -> KernelRidgeRule:
    """Solve (K + lam I) w = targets for the Gaussian kernel matrix K."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    t = np.asarray(targets, dtype=float).ravel()
    if Z.shape[0] != t.size or t.size == 0:
        raise ValueError("need one target per row of Z")
    if lam < 0 or not rbf_scale > 0:
        raise ValueError("lam must be >= 0 and rbf_scale > 0")
    K = _rbf(Z, Z, rbf_scale)
    lhs = K + lam * np.eye(t.size)
    try:
        w = solve(lhs, t, assume_a="pos" if lam > 0 else "sym")
    except (LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"ridge system is singular at lambda={lam}") from exc
    res = float(np.linalg.norm(lhs @ w - t))
    scale = float(np.linalg.norm(t))
    if not np.all(np.isfinite(w)) or res > 1e-8 * scale:
        raise SingularSystemError(
            f"ridge system is ill-conditioned at lambda={lam} (residual {res:.3g})")
    if basis is None:
        basis = np.eye(Z.shape[1])
    return KernelRidgeRule(Z, w, float(rbf_scale), basis, dose_range[0], dose_range[1],
                           float(lam), res)


def default_lambda_grid(n: int) -> NDArray:
    """Ten log-spaced penalties from 1e-4 n to 1e2 n."""
    return np.logspace(-4, 2, 10) * n


def gcv_select_lambda(
    Z: NDArray,
    targets: NDArray,
    lambda_grid: Sequence[float],
    rbf_scale: Optional[float] = None,
) -> float:
    """Grid penalty minimising n ||(I - S) t||^2 / tr(I - S)^2, S = K (K + lam I)^{-1}.

    Ties go to the larger penalty.
    """
    grid = np.asarray(lambda_grid, dtype=float).ravel()
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("lambda grid must be non-empty and positive")
    if grid.size == 1:
        return float(grid[0])
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    t = np.asarray(targets, dtype=float).ravel()
    n = t.size
    scale = median_heuristic(Z) if rbf_scale is None else rbf_scale
    evals, evecs = eigh(_rbf(Z, Z, scale))
    evals = np.clip(evals, 0.0, None)
    proj = evecs.T @ t
    scores = np.empty(grid.size)
    for k, lam in enumerate(grid):
        shrink = lam / (evals + lam)
        scores[k] = n * np.sum((shrink * proj) ** 2) / np.sum(shrink) ** 2
    finite = np.isfinite(scores)
    if not finite.any():
        raise FloatingPointError("every GCV score is non-finite")
    best = None
    for k in np.argsort(-grid, kind="stable"):  # largest penalty first
        if finite[k] and (best is None or scores[k] < scores[best]):
            best = k
    return float(grid[best])


# ---------------------------------------------------------------------------
# empirical value and the alternating fit
# ---------------------------------------------------------------------------


def empirical_value(trial: DoseTrial, B: NDArray, rule, h: Optional[NDArray] = None) -> float:
    """Mean NW reward at (B^T x_j, rule(B^T x_j)) over the sample.

    ``rule`` maps reduced covariates (n, d) to doses.  ``h`` defaults to
    :func:`reduced_bandwidths` at ``B``.
    """
    return _empirical_value(trial, B, rule, h)[0]


def _empirical_value(trial, B, rule, h=None):
    if h is None:
        h = reduced_bandwidths(trial, B)
    Z = trial.covariates @ B
    doses = np.asarray(rule(Z), dtype=float).ravel()
    anchors = np.column_stack([Z, trial.doses])
    queries = np.column_stack([Z, doses])
    values, fallbacks = nw_regress(anchors, trial.rewards, queries, h)
    return float(values.mean()), fallbacks


class _ValueObjective:
    """V(B) for a fixed rule and bandwidth, counting denominator fallbacks."""

    def __init__(self, trial, rule, h):
        self.trial, self.rule, self.h = trial, rule, h
        self.fallbacks = 0

    def __call__(self, B):
        v, fb = _empirical_value(self.trial, B, self.rule, self.h)
        self.fallbacks += fb
        return v


def _fit_rule(trial, B, grid, lambda_grid, bandwidth=None):
    h = reduced_bandwidths(trial, B, bandwidth)
    targets, fallbacks = _pseudo_dose_targets(trial, B, grid, h)
    Z = trial.covariates @ B
    scale = median_heuristic(Z)
    lam = gcv_select_lambda(Z, targets, lambda_grid, scale)
    dose_range = (trial.dose_min, trial.dose_max)
    if np.all(targets == targets[0]):
        # degenerate targets: the constant rule, not a shrunken ridge fit
        rule = KernelRidgeRule(Z, np.zeros(targets.size), scale, B, *dose_range, lam,
                               offset=float(targets[0]))
        return rule, h, fallbacks
    try:
        rule = fit_kernel_ridge(Z, targets, lam, scale, B, dose_range)
    except SingularSystemError:
        rule = fit_kernel_ridge(Z, targets, max(lam, 1e-8), scale, B, dose_range)
    return rule, h, fallbacks


def _direct_single(trial, B0, grid, lambda_grid, opts, bandwidth=None):
    B = check_orthonormal(np.array(B0, dtype=float))
    report = FitReport(sense="maximize")
    tau = opts.tau_init
    fallbacks = 0
    report.termination = "max_iters"
    for it in range(opts.max_iters + 1):
        rule, h, fb = _fit_rule(trial, B, grid, lambda_grid, bandwidth)
        fallbacks += fb
        objective = _ValueObjective(trial, rule, h)
        value = objective(B)
        if it == 0:
            report.initial_value = value
        G = numeric_gradient(objective, B, opts.grad_step)
        gnorm = riemannian_gradient_norm(G, B)
        report.gradient_norms.append(gnorm)
        if gnorm <= opts.epsilon:
            report.termination = "gradient_tol"
            fallbacks += objective.fallbacks
            break
        if it == opts.max_iters:
            fallbacks += objective.fallbacks
            break
        Q = skew_update_matrix(G, B, "maximize")
        res = line_search(objective, B, G, Q, opts.with_(sense="maximize"), value=value, tau0=tau)
        fallbacks += objective.fallbacks
        if not res.success:
            report.termination = "no_improving_step"
            break
        report.start_values.append(value)
        report.objective_trace.append(res.value)
        report.step_sizes.append(res.tau)
        report.iterations += 1
        B, tau = res.basis, res.tau
    rule, h, fb = _fit_rule(trial, B, grid, lambda_grid, bandwidth)
    final, fb2 = _empirical_value(trial, B, rule, h)
    report.final_value = final
    report.denominator_fallbacks = fallbacks + fb + fb2
    return B, rule, report


def subspace_starts(span: NDArray, d: int, count: int, seed) -> List[NDArray]:
    """``count`` orthonormal p x d frames lying inside the column space of ``span``.

    The first frame is the leading d columns of the orthonormalised span;
    the rest are seeded random rotations within it.  With ``span`` exactly
    d-dimensional a single frame is returned.
    """
    S, _ = np.linalg.qr(np.asarray(span, dtype=float))
    k = S.shape[1]
    if d > k:
        raise ValueError(f"span has {k} columns, cannot hold a {d}-frame")
    if d == k:
        return [S]
    starts = [S[:, :d]]
    rng = np.random.default_rng(seed)
    while len(starts) < count:
        R, _ = np.linalg.qr(rng.standard_normal((k, d)))
        starts.append(S @ R)
    return starts


def fit_direct(
    trial: DoseTrial,
    d: int,
    opts: Optional[OptimizerOptions] = None,
    q: Optional[int] = None,
    lambda_grid: Optional[Sequence[float]] = None,
    initial=None,
    seeds: Optional[Sequence[int]] = None,
    bandwidth: Optional[BandwidthSpec] = None,
) -> Tuple[NDArray, KernelRidgeRule, FitReport]:
    """Direct-learning estimate of the basis and the dose rule.

    Runs ``opts.restarts`` alternating fits and keeps the one whose final
    rule has the largest empirical value.  ``initial`` (one p x d basis or
    a list of them) supplies the first starts; the remaining starts are
    random orthonormal frames seeded ``opts.seed + r``.
    """
    opts = (opts or OptimizerOptions()).with_(sense="maximize")
    if not 1 <= d < trial.p:
        raise ValueError(f"need 1 <= d < p, got d={d}, p={trial.p}")
    if trial.n < 10:
        raise ValueError("direct learning needs at least 10 observations")
    grid = dose_grid(trial, q)
    lambda_grid = default_lambda_grid(trial.n) if lambda_grid is None else lambda_grid
    if initial is None:
        initial = []
    elif isinstance(initial, np.ndarray) and initial.ndim == 2:
        initial = [initial]
    if seeds is None:
        seeds = [opts.seed + r for r in range(max(opts.restarts, len(initial)))]
    runs = []
    for r, seed in enumerate(seeds):
        B0 = initial[r] if r < len(initial) else random_orthonormal(trial.p, d, seed)
        B, rule, rep = _direct_single(trial, B0, grid, lambda_grid, opts, bandwidth)
        rep.restart_index = r
        logger.debug("direct restart %d: value %.6g (%s)", r, rep.final_value, rep.termination)
        runs.append((B, rule, rep))
    B, rep = _pick_best([(B, rep) for B, _, rep in runs], "maximize")
    rule = runs[rep.restart_index][1]
    return B, rule, rep
