"""
First-order optimisation over p x d matrices with orthonormal columns.

Each iteration forms a finite-difference gradient ``G``, the skew matrix
``Q = G B^T - B G^T`` and moves along the Cayley curve

    B(tau) = (I + tau/2 Q)^{-1} (I - tau/2 Q) B,

which keeps ``B^T B = I`` for every ``tau``.  Internally everything is
written as minimisation of ``phi = sign * objective``; ``sense="maximize"``
flips the sign.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import lu_factor, lu_solve

__all__ = [
    "FitReport",
    "LineSearchResult",
    "OptimizerOptions",
    "cayley_step",
    "check_orthonormal",
    "numeric_gradient",
    "optimize_on_stiefel",
    "orthonormality_error",
    "random_orthonormal",
    "riemannian_gradient_norm",
    "skew_update_matrix",
    "line_search",
    "stiefel_descent",
]

logger = logging.getLogger(__name__)

Objective = Callable[[NDArray], float]

TERMINATIONS = ("gradient_tol", "max_iters", "no_improving_step")


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings for :func:`optimize_on_stiefel` and the alternating fit.

    ``grad_step`` is relative: the probe for entry ``(k, l)`` moves it by
    ``grad_step * max(1, |B_kl|)``.  ``tau_init`` is the first trial step;
    later iterations start from the previously accepted step.
    """

    grad_step: float = 1e-4
    epsilon: float = 1e-8
    max_iters: int = 200
    restarts: int = 5
    tau_init: float = 0.1
    armijo_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_backtracks: int = 30
    max_expansions: int = 10
    curvature_min_tau: float = 1e-6
    sense: str = "maximize"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.armijo_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < armijo_c1 < wolfe_c2 < 1")
        if not self.epsilon > 0 or not self.grad_step > 0 or not self.tau_init > 0:
            raise ValueError("epsilon, grad_step and tau_init must be positive")
        if self.max_iters < 0 or self.restarts < 1 or self.max_backtracks < 0:
            raise ValueError("max_iters >= 0, restarts >= 1, max_backtracks >= 0 required")
        if self.sense not in ("maximize", "minimize"):
            raise ValueError(f"sense must be 'maximize' or 'minimize', got {self.sense!r}")

    @property
    def sign(self) -> float:
        return -1.0 if self.sense == "maximize" else 1.0

    def with_(self, **changes) -> "OptimizerOptions":
        return replace(self, **changes)


@dataclass
class FitReport:
    """Trajectory of one optimisation run.

    ``start_values[t]`` is the objective before accepted step ``t`` and
    ``objective_trace[t]`` the value after it, both under the same
    objective.  For a plain Stiefel run ``start_values[t+1] ==
    objective_trace[t]``; the alternating fit refits its rule between steps,
    so only the per-step comparison is meaningful there.
    """

    sense: str = "maximize"
    objective_trace: List[float] = field(default_factory=list)
    start_values: List[float] = field(default_factory=list)
    gradient_norms: List[float] = field(default_factory=list)
    step_sizes: List[float] = field(default_factory=list)
    iterations: int = 0
    restart_index: int = 0
    termination: str = "max_iters"
    denominator_fallbacks: int = 0
    initial_value: float = float("nan")
    final_value: float = float("nan")
    restart_values: List[float] = field(default_factory=list)
    restart_terminations: List[str] = field(default_factory=list)
    restart_iterations: List[int] = field(default_factory=list)

    def is_monotone(self, tol: float = 0.0) -> bool:
        """True if no accepted step moved against the optimisation sense."""
        sign = -1.0 if self.sense == "maximize" else 1.0
        after = sign * np.asarray(self.objective_trace, dtype=float)
        before = sign * np.asarray(self.start_values, dtype=float)
        return bool(np.all(after <= before + tol))

    @property
    def failed(self) -> bool:
        """Every restart stopped without accepting a single step."""
        terms = self.restart_terminations or [self.termination]
        iters = self.restart_iterations or [self.iterations]
        return all(t == "no_improving_step" for t in terms) and not any(iters)

    def to_dict(self) -> dict:
        return {
            "sense": self.sense,
            "objective_trace": list(map(float, self.objective_trace)),
            "start_values": list(map(float, self.start_values)),
            "gradient_norms": list(map(float, self.gradient_norms)),
            "step_sizes": list(map(float, self.step_sizes)),
            "iterations": int(self.iterations),
            "restart_index": int(self.restart_index),
            "termination": self.termination,
            "denominator_fallbacks": int(self.denominator_fallbacks),
            "initial_value": float(self.initial_value),
            "final_value": float(self.final_value),
            "restart_values": list(map(float, self.restart_values)),
            "restart_terminations": list(self.restart_terminations),
            "restart_iterations": list(map(int, self.restart_iterations)),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitReport":
        return cls(**data)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def orthonormality_error(B: NDArray) -> float:
    """max |B^T B - I|."""
    B = np.asarray(B, dtype=float)
    return float(np.max(np.abs(B.T @ B - np.eye(B.shape[1]))))


def check_orthonormal(B: NDArray, tol: float = 1e-10) -> NDArray:
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] > B.shape[0]:
        raise ValueError(f"expected a tall p x d matrix, got shape {B.shape}")
    err = orthonormality_error(B)
    if err > tol:
        raise ValueError(f"columns are not orthonormal (max deviation {err:.3g})")
    return B


def random_orthonormal(p: int, d: int, seed) -> NDArray:
    """Orthonormal factor of a seeded Gaussian p x d matrix."""
    if not 1 <= d < p:
        raise ValueError(f"need 1 <= d < p, got p={p}, d={d}")
    rng = np.random.default_rng(seed)
    Qm, Rm = np.linalg.qr(rng.standard_normal((p, d)))
    # fix column signs so the factor is unique
    return Qm * np.where(np.diag(Rm) < 0, -1.0, 1.0)


def numeric_gradient(objective: Objective, B: NDArray, grad_step: float = 1e-4) -> NDArray:
    """Central-difference gradient of ``objective`` over the raw entries of B."""
    B = np.array(B, dtype=float)
    G = np.empty_like(B)
    for k in range(B.shape[0]):
        for l in range(B.shape[1]):
            s = grad_step * max(1.0, abs(B[k, l]))
            orig = B[k, l]
            B[k, l] = orig + s
            up = objective(B)
            B[k, l] = orig - s
            down = objective(B)
            B[k, l] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"objective not finite when probing entry ({k}, {l})")
            G[k, l] = (up - down) / (2.0 * s)
    return G


def skew_update_matrix(G: NDArray, B: NDArray, sense: str = "minimize") -> NDArray:
    """Q = G B^T - B G^T, with G negated first when maximising."""
    G = np.asarray(G, dtype=float)
    if sense == "maximize":
        G = -G
    elif sense != "minimize":
        raise ValueError(f"unknown sense {sense!r}")
    Q = G @ B.T - B @ G.T
    return 0.5 * (Q - Q.T)


def riemannian_gradient_norm(G: NDArray, B: NDArray) -> float:
    """||G - B G^T B||_F, the gradient norm seen by the Cayley update."""
    return float(np.linalg.norm(G - B @ (G.T @ B)))


def cayley_step(B: NDArray, Q: NDArray, tau: float) -> NDArray:
    """(I + tau/2 Q)^{-1} (I - tau/2 Q) B."""
    B = np.asarray(B, dtype=float)
    if tau == 0:
        return B.copy()
    p = B.shape[0]
    half = 0.5 * tau * np.asarray(Q, dtype=float)
    lhs = np.eye(p) + half
    rhs = B - half @ B
    try:
        out = lu_solve(lu_factor(lhs, check_finite=True), rhs)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FloatingPointError(f"Cayley solve failed: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("Cayley solve produced non-finite entries")
    return out


# ---------------------------------------------------------------------------
# line search and descent loop
# ---------------------------------------------------------------------------


@dataclass
class LineSearchResult:
    tau: float
    basis: NDArray
    value: float
    success: bool
    evaluations: int


def line_search(
    objective: Objective,
    B: NDArray,
    G: NDArray,
    Q: NDArray,
    opts: OptimizerOptions,
    value: Optional[float] = None,
    tau0: Optional[float] = None,
) -> LineSearchResult:
    """Armijo backtracking along the Cayley curve, with Wolfe-driven growth.

    ``G`` is the gradient of ``objective`` (not sign-adjusted) and ``Q`` the
    matching output of :func:`skew_update_matrix`.  Starting from ``tau0``
    (default ``opts.tau_init``) the step is halved until the sufficient
    decrease condition holds.  If the first trial is accepted but the
    curvature condition fails, the step is doubled while both the
    sufficient-decrease test passes and the value keeps improving.  The
    curvature test uses a finite-difference slope and is skipped below
    ``opts.curvature_min_tau``.
    """
    sign = opts.sign
    evals = 0

    def phi(M):
        nonlocal evals
        evals += 1
        v = objective(M)
        return sign * v if np.isfinite(v) else np.inf

    phi0 = sign * (objective(B) if value is None else value)
    slope = -0.5 * float(np.sum(Q * Q))
    if slope == 0.0:
        return LineSearchResult(0.0, B, sign * phi0, False, evals)

    def armijo(t, v):
        return v <= phi0 + opts.armijo_c1 * t * slope and v < phi0

    def curvature_ok(t):
        delta = 1e-3 * t
        d = (phi(cayley_step(B, Q, t + delta)) - phi(cayley_step(B, Q, t - delta))) / (2 * delta)
        return d >= opts.wolfe_c2 * slope

    tau = opts.tau_init if tau0 is None else tau0
    accepted = None
    for k in range(opts.max_backtracks + 1):
        Bn = cayley_step(B, Q, tau)
        v = phi(Bn)
        if armijo(tau, v):
            accepted = k
            break
        tau *= 0.5
    if accepted is None:
        return LineSearchResult(0.0, B, sign * phi0, False, evals)

    if accepted == 0:
        for _ in range(opts.max_expansions):
            if tau < opts.curvature_min_tau or curvature_ok(tau):
                break
            t2 = 2.0 * tau
            B2 = cayley_step(B, Q, t2)
            v2 = phi(B2)
            if not (armijo(t2, v2) and v2 < v):
                break
            tau, Bn, v = t2, B2, v2
    return LineSearchResult(tau, Bn, sign * v, True, evals)


def stiefel_descent(
    objective: Objective,
    B0: NDArray,
    opts: OptimizerOptions,
    report: Optional[FitReport] = None,
) -> Tuple[NDArray, FitReport]:
    """Run one start of the Cayley-step loop from ``B0``."""
    B = check_orthonormal(np.array(B0, dtype=float))
    report = report or FitReport(sense=opts.sense)
    value = objective(B)
    if not np.isfinite(value):
        raise FloatingPointError("objective is not finite at the starting point")
    report.initial_value = value
    tau = opts.tau_init
    report.termination = "max_iters"
    for it in range(opts.max_iters + 1):
        G = numeric_gradient(objective, B, opts.grad_step)
        gnorm = riemannian_gradient_norm(G, B)
        report.gradient_norms.append(gnorm)
        if gnorm <= opts.epsilon:
            report.termination = "gradient_tol"
            break
        if it == opts.max_iters:
            break
        Q = skew_update_matrix(G, B, opts.sense)
        res = line_search(objective, B, G, Q, opts, value=value, tau0=tau)
        if not res.success:
            report.termination = "no_improving_step"
            break
        report.start_values.append(value)
        B, value, tau = res.basis, res.value, res.tau
        report.objective_trace.append(value)
        report.step_sizes.append(res.tau)
        report.iterations += 1
    report.final_value = value
    return B, report


def optimize_on_stiefel(
    objective: Objective,
    p: int,
    d: int,
    opts: OptimizerOptions,
    seeds: Optional[Sequence[int]] = None,
    initial: Optional[NDArray] = None,
) -> Tuple[NDArray, FitReport]:
    """Best of ``opts.restarts`` runs of :func:`stiefel_descent`.

    Restart ``r`` starts from ``random_orthonormal(p, d, seeds[r])`` (seeds
    default to ``opts.seed + r``); ``initial``, when given, replaces the
    first start.  Ties in the final value go to the lowest restart index.
    """
    if seeds is None:
        seeds = [opts.seed + r for r in range(opts.restarts)]
    results = []
    for r, seed in enumerate(seeds):
        B0 = initial if (r == 0 and initial is not None) else random_orthonormal(p, d, seed)
        B, rep = stiefel_descent(objective, B0, opts)
        rep.restart_index = r
        logger.debug("restart %d: value %.6g after %d iterations (%s)",
                     r, rep.final_value, rep.iterations, rep.termination)
        results.append((B, rep))
    return _pick_best(results, opts.sense)


def _pick_best(results, sense):
    sign = -1.0 if sense == "maximize" else 1.0
    scores = [sign * rep.final_value for _, rep in results]
    best = int(np.argmin(scores))  # first minimum = lowest index on ties
    B, rep = results[best]
    rep.restart_values = [rep_.final_value for _, rep_ in results]
    rep.restart_terminations = [rep_.termination for _, rep_ in results]
    rep.restart_iterations = [rep_.iterations for _, rep_ in results]
    return B, rep
