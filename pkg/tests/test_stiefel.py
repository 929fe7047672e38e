import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.stats import ortho_group

from helpers import angle_to_span
from doselearn.stiefel import (
    FitReport,
    OptimizerOptions,
    cayley_step,
    check_orthonormal,
    line_search,
    numeric_gradient,
    optimize_on_stiefel,
    orthonormality_error,
    random_orthonormal,
    riemannian_gradient_norm,
    skew_update_matrix,
    stiefel_descent,
)


def rayleigh(M):
    return lambda B: float(np.trace(B.T @ M @ B))


def random_skew(rng, p, scale=1.0):
    S = rng.normal(size=(p, p)) * scale
    return S - S.T


# ---- options


@pytest.mark.parametrize("kwargs", [
    {"armijo_c1": 0.5, "wolfe_c2": 0.4},
    {"epsilon": 0.0},
    {"restarts": 0},
    {"sense": "sideways"},
])
def test_options_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerOptions(**kwargs)


def test_options_defaults():
    o = OptimizerOptions()
    assert (o.grad_step, o.epsilon, o.max_iters, o.restarts) == (1e-4, 1e-8, 200, 5)
    assert (o.tau_init, o.armijo_c1, o.max_backtracks) == (0.1, 1e-4, 30)
    assert o.with_(sense="minimize").sign == 1.0 and o.sign == -1.0


# ---- random_orthonormal


def test_random_orthonormal_examples():
    b = random_orthonormal(3, 1, 5)
    assert b.shape == (3, 1)
    assert abs(np.linalg.norm(b) - 1) < 1e-14
    B = random_orthonormal(10, 2, 5)
    assert orthonormality_error(B) <= 1e-12
    np.testing.assert_array_equal(B, random_orthonormal(10, 2, 5))
    assert not np.array_equal(B, random_orthonormal(10, 2, 6))


@pytest.mark.parametrize("p, d", [(3, 3), (3, 0), (2, 5)])
def test_random_orthonormal_rejects(p, d):
    with pytest.raises(ValueError):
        random_orthonormal(p, d, 0)


def test_check_orthonormal():
    with pytest.raises(ValueError):
        check_orthonormal(np.ones((3, 1)))
    with pytest.raises(ValueError):
        check_orthonormal(np.eye(2, 3))


# ---- numeric gradient


def test_gradient_of_linear_map_is_exact(rng):
    C = rng.normal(size=(6, 2))
    B = random_orthonormal(6, 2, 1)
    G = numeric_gradient(lambda M: float(np.sum(C * M)), B)
    np.testing.assert_allclose(G, C, atol=1e-10)


def test_gradient_of_constant_is_zero():
    G = numeric_gradient(lambda M: 3.0, random_orthonormal(5, 2, 0))
    assert np.all(G == 0)


def test_gradient_of_frobenius_norm():
    B = random_orthonormal(7, 2, 3)
    G = numeric_gradient(lambda M: float(np.sum(M * M)), B, grad_step=1e-5)
    np.testing.assert_allclose(G, 2 * B, atol=1e-6)


def test_gradient_rejects_nonfinite_probe():
    def obj(M):
        return np.inf if M[0, 0] > 0.5 else 0.0
    with pytest.raises(FloatingPointError):
        numeric_gradient(obj, np.array([[0.5], [0.0]]), grad_step=0.1)


def test_gradient_step_consistency_on_smooth_objective(rng):
    M = rng.normal(size=(6, 6))
    obj = lambda B: float(np.sin(np.trace(B.T @ M @ B)) + np.sum(B ** 3))  # noqa: E731
    B = random_orthonormal(6, 2, 2)
    g1 = numeric_gradient(obj, B, 1e-4)
    g2 = numeric_gradient(obj, B, 1e-5)
    mask = np.abs(g2) > 1e-8
    assert np.all(np.abs(g1 - g2)[mask] <= 1e-4 * np.abs(g2)[mask])


# ---- skew matrix


def test_skew_examples(rng):
    B = np.array([[1.0], [0.0]])
    assert np.all(skew_update_matrix(np.zeros((2, 1)), B) == 0)
    Q = skew_update_matrix(np.array([[0.0], [1.0]]), B, "minimize")
    np.testing.assert_array_equal(Q, [[0.0, -1.0], [1.0, 0.0]])
    # maximising negates the gradient first
    Qmax = skew_update_matrix(np.array([[0.0], [-1.0]]), B, "maximize")
    np.testing.assert_array_equal(Qmax, Q)
    G, B2 = rng.normal(size=(8, 3)), random_orthonormal(8, 3, 1)
    Q = skew_update_matrix(G, B2)
    assert np.max(np.abs(Q + Q.T)) == 0.0
    np.testing.assert_allclose(Q, G @ B2.T - B2 @ G.T, atol=1e-14)


# ---- Cayley step


def test_cayley_identity_cases():
    B = random_orthonormal(5, 2, 0)
    np.testing.assert_array_equal(cayley_step(B, np.zeros((5, 5)), 0.7), B)
    Q = random_skew(np.random.default_rng(0), 5)
    np.testing.assert_array_equal(cayley_step(B, Q, 0.0), B)


def test_cayley_hand_example():
    B = np.array([[1.0], [0.0]])
    Q = np.array([[0.0, -1.0], [1.0, 0.0]])
    # (I + Q)^{-1} (I - Q) e1 = (0, -1)
    np.testing.assert_allclose(cayley_step(B, Q, 2.0), [[0.0], [-1.0]], atol=1e-15)


def test_cayley_matches_closed_form(rng):
    # the Cayley transform of tau Q equals the matrix exponential of
    # -2 arctan(tau/2 * w) rotations; compare in the 2x2 case
    for tau in (0.3, 1.0, 4.0):
        w = rng.normal()
        Q = np.array([[0.0, -w], [w, 0.0]])
        theta = 2 * np.arctan(0.5 * tau * w)
        R = expm(np.array([[0.0, theta], [-theta, 0.0]]))
        B = np.array([[1.0], [0.0]])
        np.testing.assert_allclose(cayley_step(B, Q, tau), R @ B, atol=1e-13)


def test_cayley_keeps_orthonormality_100_trials(rng):
    worst = 0.0
    for _ in range(100):
        p = int(rng.integers(2, 21))
        d = int(rng.integers(1, min(3, p - 1) + 1))
        B = random_orthonormal(p, d, int(rng.integers(1 << 30)))
        worst = max(worst, orthonormality_error(cayley_step(B, random_skew(rng, p), rng.uniform())))
    assert worst <= 1e-12


def test_cayley_inverse_step(rng):
    B = random_orthonormal(9, 2, 4)
    Q = random_skew(rng, 9)
    back = cayley_step(cayley_step(B, Q, 0.8), Q, -0.8)
    np.testing.assert_allclose(back, B, atol=1e-10)


def test_cayley_rejects_nonfinite():
    B = random_orthonormal(3, 1, 0)
    Q = np.full((3, 3), np.nan)
    with pytest.raises(FloatingPointError):
        cayley_step(B, Q, 1.0)


# ---- line search


def test_line_search_improves_concave_ascent():
    M = -np.diag([1.0, 2.0, 5.0])
    obj = rayleigh(M)
    B = random_orthonormal(3, 1, 8)
    opts = OptimizerOptions()
    G = numeric_gradient(obj, B)
    res = line_search(obj, B, G, skew_update_matrix(G, B, "maximize"), opts)
    assert res.success and res.value > obj(B)
    assert orthonormality_error(res.basis) <= 1e-12


def test_line_search_diag31_from_e2():
    M = np.diag([3.0, 1.0])
    obj = rayleigh(M)
    # start a hair off e2, where the gradient is exactly tangent-free
    B = np.array([[np.sin(1e-3)], [np.cos(1e-3)]])
    assert obj(B) == pytest.approx(1.0, abs=1e-5)
    G = numeric_gradient(obj, B)
    res = line_search(obj, B, G, skew_update_matrix(G, B, "maximize"), OptimizerOptions())
    assert res.success and res.value > obj(B) and res.value > 1.0


def test_line_search_reports_failure_on_zero_direction():
    B = random_orthonormal(4, 1, 0)
    res = line_search(lambda M: 1.0, B, np.zeros((4, 1)), np.zeros((4, 4)), OptimizerOptions())
    assert not res.success and res.tau == 0.0


def test_line_search_wrong_direction_fails():
    obj = rayleigh(np.diag([3.0, 1.0, 0.0]))
    B = random_orthonormal(3, 1, 1)
    G = numeric_gradient(obj, B)
    Q = skew_update_matrix(G, B, "minimize")  # descent direction, but we maximise
    res = line_search(obj, B, G, Q, OptimizerOptions(max_backtracks=10))
    assert not res.success


# ---- full optimiser


def test_rayleigh_max_and_min_diag():
    M = np.diag([3.0, 1.0, 0.0])
    opts = OptimizerOptions(restarts=2, max_iters=300, seed=4)
    B, rep = optimize_on_stiefel(rayleigh(M), 3, 1, opts)
    assert angle_to_span(B, np.eye(3)[:, [0]]) < 1e-3
    assert rep.is_monotone()
    B, rep = optimize_on_stiefel(rayleigh(M), 3, 1, opts.with_(sense="minimize"))
    assert angle_to_span(B, np.eye(3)[:, [2]]) < 1e-3
    assert rep.is_monotone()


def test_constant_objective_stops_immediately():
    B, rep = optimize_on_stiefel(lambda M: 2.0, 5, 2, OptimizerOptions(restarts=1))
    assert rep.iterations == 0 and rep.termination == "gradient_tol"
    assert not rep.failed


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(3, 8), st.sampled_from(["maximize", "minimize"]))
def test_descent_feasible_and_monotone(seed, p, sense):
    r = np.random.default_rng(seed)
    S = r.normal(size=(p, p))
    M = S + S.T
    seen = []

    def obj(B):
        seen.append(orthonormality_error(B))
        return float(np.trace(B.T @ M @ B))

    opts = OptimizerOptions(max_iters=25, sense=sense)
    B0 = random_orthonormal(p, 2, seed)
    B, rep = stiefel_descent(obj, B0, opts)
    assert orthonormality_error(B) <= 1e-10
    assert rep.is_monotone()
    # plain Stiefel run: each step starts where the previous ended
    assert rep.start_values[1:] == rep.objective_trace[:-1]
    assert len(rep.gradient_norms) >= rep.iterations


def test_restart_selection_and_ties():
    calls = []

    def obj(B):
        calls.append(1)
        return 1.0

    B, rep = optimize_on_stiefel(obj, 4, 1, OptimizerOptions(restarts=3))
    assert rep.restart_index == 0
    assert rep.restart_values == [1.0, 1.0, 1.0]
    np.testing.assert_array_equal(B, random_orthonormal(4, 1, 0))


def test_optimizer_is_deterministic():
    M = np.diag([4.0, 2.0, 1.0, 0.5, 0.0])
    opts = OptimizerOptions(restarts=2, max_iters=20, seed=9)
    B1, r1 = optimize_on_stiefel(rayleigh(M), 5, 2, opts)
    B2, r2 = optimize_on_stiefel(rayleigh(M), 5, 2, opts)
    assert B1.tobytes() == B2.tobytes()
    assert r1.to_dict() == r2.to_dict()


def test_riemannian_gradient_norm_vanishes_at_eigenvectors():
    M = np.diag([3.0, 1.0, 0.0])
    B = np.eye(3)[:, [0]]
    G = numeric_gradient(rayleigh(M), B)
    assert riemannian_gradient_norm(G, B) < 1e-8


def test_initial_basis_is_used():
    M = np.diag([3.0, 1.0, 0.0])
    B0 = np.eye(3)[:, [0]]
    B, rep = optimize_on_stiefel(rayleigh(M), 3, 1, OptimizerOptions(restarts=1), initial=B0)
    assert rep.termination == "gradient_tol" and rep.iterations == 0
    np.testing.assert_array_equal(B, B0)


def test_report_round_trip_and_monotone_check():
    rep = FitReport(sense="maximize", objective_trace=[1.0, 2.0], start_values=[0.5, 1.0])
    assert rep.is_monotone()
    assert FitReport.from_dict(rep.to_dict()) == rep
    bad = FitReport(sense="minimize", objective_trace=[1.0, 2.0], start_values=[0.5, 1.0])
    assert not bad.is_monotone()
    failed = FitReport(termination="no_improving_step")
    assert failed.failed


def test_rayleigh_random_orthogonal_similarity(rng):
    # eigenvalues survive an orthogonal change of basis
    O = ortho_group.rvs(6, random_state=2)
    D = np.diag([5.0, 4.0, 1.0, 0.0, -1.0, -2.0])
    M = O @ D @ O.T
    opts = OptimizerOptions(restarts=2, max_iters=400)
    B, rep = optimize_on_stiefel(rayleigh(M), 6, 2, opts)
    assert rep.final_value == pytest.approx(9.0, abs=1e-6)
