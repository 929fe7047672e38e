import math

import numpy as np
import pytest
from scipy.stats import ortho_group

import oracles
from helpers import random_trial
from doselearn.dataset import DoseTrial, generate_setting
from doselearn.direct import (
    DoseGrid,
    KernelRidgeRule,
    SingularSystemError,
    default_lambda_grid,
    dose_grid,
    empirical_value,
    fit_direct,
    fit_kernel_ridge,
    gcv_select_lambda,
    grid_reward_surface,
    median_heuristic,
    pseudo_dose_targets,
    reduced_bandwidths,
    subspace_starts,
)
from doselearn.kernel import nw_regress
from doselearn.stiefel import OptimizerOptions, orthonormality_error, random_orthonormal

FAST = OptimizerOptions(restarts=1, max_iters=4)


def tiny_trial(doses, rewards, X=None):
    doses = np.asarray(doses, dtype=float)
    if X is None:
        X = np.column_stack([np.linspace(-1, 1, doses.size), np.zeros(doses.size)])
    return DoseTrial(X, doses, rewards)


# ---- dose grid


def test_dose_grid_examples():
    grid = dose_grid(tiny_trial([0.0, 2.0], [1.0, 1.0]), q=3)
    np.testing.assert_array_equal(grid.points, [0.0, 1.0, 2.0])
    trial, _ = generate_setting(1, 400, 10, seed=0)
    g = dose_grid(trial)
    assert g.q == 20
    assert g.points[0] == trial.doses.min() and g.points[-1] == trial.doses.max()
    np.testing.assert_allclose(np.diff(g.points), np.diff(g.points)[0], rtol=1e-12)


def test_dose_grid_rejects():
    with pytest.raises(ValueError):
        dose_grid(tiny_trial([1.0, 1.0], [0.0, 1.0]))
    with pytest.raises(ValueError):
        dose_grid(tiny_trial([0.0, 1.0], [0.0, 1.0]), q=1)


def test_dose_grid_default_rounds_up():
    trial = tiny_trial(np.linspace(0, 1, 10), np.zeros(10))
    assert dose_grid(trial).q == math.ceil(math.sqrt(10))


# ---- pseudo-dose targets


def test_targets_constant_rewards_pick_smallest():
    trial = tiny_trial(np.linspace(0, 2, 8), np.full(8, 3.0))
    B = np.array([[1.0], [0.0]])
    grid = dose_grid(trial, q=5)
    np.testing.assert_array_equal(pseudo_dose_targets(trial, B, grid), 0.0)


def test_targets_two_point_brute_force():
    trial = tiny_trial([0.0, 2.0], [0.0, 10.0], X=np.array([[0.0, 0.0], [1.0, 0.0]]))
    B = np.array([[1.0], [0.0]])
    grid = dose_grid(trial, q=5)
    h = [0.8, 0.6]
    got = pseudo_dose_targets(trial, B, grid, h)
    anchors = [[0.0, 0.0], [1.0, 2.0]]
    for i, z in enumerate([0.0, 1.0]):
        scores = [oracles.nw(anchors, [0.0, 10.0], [z, a], h) for a in grid.points]
        assert got[i] == grid.points[int(np.argmax(scores))]


def test_targets_are_grid_points_and_deterministic(rng):
    trial = random_trial(rng, 40, 4)
    B = random_orthonormal(4, 2, 0)
    grid = dose_grid(trial)
    t1 = pseudo_dose_targets(trial, B, grid)
    t2 = pseudo_dose_targets(trial, B, grid)
    assert t1.tobytes() == t2.tobytes()
    assert np.all(np.isin(t1, grid.points))
    assert t1.min() >= trial.doses.min() and t1.max() <= trial.doses.max()


def test_grid_surface_matches_nw(rng):
    trial = random_trial(rng, 30, 3)
    B = random_orthonormal(3, 1, 2)
    h = reduced_bandwidths(trial, B)
    Z = trial.covariates @ B
    grid = np.linspace(0, 2, 7)
    surface, _ = grid_reward_surface(Z, trial.doses, trial.rewards, Z[:5], grid, h)
    anchors = np.column_stack([Z, trial.doses])
    for g, a in enumerate(grid):
        q = np.column_stack([Z[:5], np.full(5, a)])
        vals, _ = nw_regress(anchors, trial.rewards, q, h)
        np.testing.assert_allclose(surface[:, g], vals, rtol=1e-12)


# ---- kernel ridge


def test_ridge_single_point():
    rule = fit_kernel_ridge([[0.3]], [1.0], 0.0, 1.0)
    np.testing.assert_allclose(rule.weights, [1.0])
    assert rule.raw([[0.3]])[0] == pytest.approx(1.0)


def test_ridge_huge_penalty():
    t = np.array([1.0, -2.0, 0.5])
    rule = fit_kernel_ridge([[0.0], [1.0], [2.0]], t, 1e12, 1.0)
    assert np.linalg.norm(rule.weights) <= 1e-10 * np.linalg.norm(t)
    assert np.all(np.abs(rule.raw(np.linspace(-3, 3, 9)[:, None])) < 1e-10)


def test_ridge_two_point_hand_solve():
    rule = fit_kernel_ridge([[0.0], [1.0]], [0.0, 1.0], 0.0, 1.0)
    k = math.exp(-0.5)
    det = 1 - k * k
    np.testing.assert_allclose(rule.weights, [-k / det, 1 / det], rtol=1e-12)
    np.testing.assert_allclose(rule.raw([[0.0], [1.0]]), [0.0, 1.0], atol=1e-10)


def test_ridge_residual_small(rng):
    for _ in range(10):
        n = int(rng.integers(2, 40))
        Z = rng.normal(size=(n, 2))
        t = rng.normal(size=n)
        lam = float(10 ** rng.uniform(-4, 2))
        rule = fit_kernel_ridge(Z, t, lam, median_heuristic(Z))
        K = np.exp(-((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1) / (2 * rule.rbf_scale ** 2))
        assert np.linalg.norm((K + lam * np.eye(n)) @ rule.weights - t) <= 1e-8 * np.linalg.norm(t)


def test_ridge_duplicate_anchors_singular():
    with pytest.raises(SingularSystemError):
        fit_kernel_ridge([[0.0], [0.0]], [0.0, 1.0], 0.0, 1.0)
    rule = fit_kernel_ridge([[0.0], [0.0]], [0.0, 1.0], 1e-8, 1.0)
    assert np.all(np.isfinite(rule.weights))


def test_ridge_rule_clips_to_range():
    rule = fit_kernel_ridge([[0.0], [1.0]], [-5.0, 5.0], 0.0, 1.0, dose_range=(0.0, 2.0))
    np.testing.assert_array_equal(rule([[0.0], [1.0]]), [0.0, 2.0])
    assert isinstance(rule, KernelRidgeRule)


def test_median_heuristic():
    Z = np.array([[0.0], [1.0], [3.0]])
    assert median_heuristic(Z) == 2.0
    assert median_heuristic(np.zeros((4, 2))) == 1.0


# ---- GCV


def test_gcv_zero_targets_choose_largest():
    Z = np.linspace(0, 1, 6)[:, None]
    assert gcv_select_lambda(Z, np.zeros(6), [0.1, 1.0, 10.0]) == 10.0


def test_gcv_single_element_grid():
    assert gcv_select_lambda(np.zeros((3, 1)), np.ones(3), [0.5]) == 0.5


def test_gcv_rejects_bad_grid():
    with pytest.raises(ValueError):
        gcv_select_lambda(np.zeros((3, 1)), np.ones(3), [])
    with pytest.raises(ValueError):
        gcv_select_lambda(np.zeros((3, 1)), np.ones(3), [0.0, 1.0])


def test_gcv_matches_direct_formula(rng):
    Z = rng.normal(size=(15, 2))
    t = np.sin(Z[:, 0]) + 0.1 * rng.normal(size=15)
    grid = default_lambda_grid(15)
    scale = median_heuristic(Z)
    K = np.exp(-((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1) / (2 * scale ** 2))
    scores = []
    for lam in grid:
        S = K @ np.linalg.inv(K + lam * np.eye(15))
        r = (np.eye(15) - S) @ t
        scores.append(15 * r @ r / np.trace(np.eye(15) - S) ** 2)
    assert gcv_select_lambda(Z, t, grid, scale) == grid[int(np.argmin(scores))]


def test_gcv_prefers_shrinkage_on_noise():
    grid = default_lambda_grid(30)
    at_max = at_min = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        Z = r.normal(size=(30, 1))
        lam = gcv_select_lambda(Z, r.normal(size=30), grid)
        at_max += lam == grid[-1]
        at_min += lam == grid[0]
    assert at_max > at_min


def test_default_lambda_grid():
    g = default_lambda_grid(400)
    assert g.size == 10
    assert g[0] == pytest.approx(1e-4 * 400) and g[-1] == pytest.approx(1e2 * 400)


# ---- empirical value


def test_value_constant_rewards(rng):
    trial = DoseTrial(rng.normal(size=(12, 3)), rng.uniform(0, 2, 12), np.full(12, -1.5))
    B = random_orthonormal(3, 1, 0)
    v = empirical_value(trial, B, lambda Z: np.full(len(Z), 0.7))
    assert v == pytest.approx(-1.5, abs=1e-14)


def test_value_brute_force_random(rng):
    for _ in range(10):
        n = int(rng.integers(2, 7))
        trial = random_trial(rng, n, 3)
        d = int(rng.integers(1, 3))
        B = random_orthonormal(3, d, int(rng.integers(1000)))
        h = rng.uniform(0.5, 2.0, size=d + 1)
        c = rng.normal(size=d)
        rule = lambda Z: 1.0 + np.tanh(Z @ c)  # noqa: E731
        doses = rule(trial.covariates @ B)
        got = empirical_value(trial, B, rule, h)
        expected = oracles.empirical_value(trial.covariates.tolist(), trial.doses.tolist(),
                                           trial.rewards.tolist(), B.tolist(), doses.tolist(),
                                           h.tolist())
        assert abs(got - expected) <= 1e-12


def test_value_rotation_invariance(rng):
    trial = random_trial(rng, 40, 5)
    B = random_orthonormal(5, 2, 1)
    O = ortho_group.rvs(2, random_state=3)
    c = rng.normal(size=2)
    rule = lambda Z: 1 + np.tanh(Z @ c)  # noqa: E731
    rotated = lambda Z: rule(Z @ O.T)  # noqa: E731  f(Oz) evaluated at z = (BO)^T x
    h = np.array([0.6, 0.6, 0.4])  # equal covariate bandwidths keep the kernel isotropic
    v1 = empirical_value(trial, B, rule, h)
    v2 = empirical_value(trial, B @ O, rotated, h)
    assert abs(v1 - v2) <= 1e-12


def test_value_within_reward_range(rng):
    trial = random_trial(rng, 30, 4)
    v = empirical_value(trial, random_orthonormal(4, 2, 5), lambda Z: np.full(len(Z), 1.0))
    assert trial.rewards.min() <= v <= trial.rewards.max()


# ---- alternating fit


def test_subspace_starts_inside_span(rng):
    span = random_orthonormal(8, 3, 1)
    starts = subspace_starts(span, 2, 4, seed=0)
    assert len(starts) == 4
    P = span @ span.T
    for S in starts:
        assert orthonormality_error(S) < 1e-12
        np.testing.assert_allclose(P @ S, S, atol=1e-12)
    assert len(subspace_starts(span, 3, 4, seed=0)) == 1
    with pytest.raises(ValueError):
        subspace_starts(span, 4, 2, seed=0)


def test_fit_direct_flat_rewards(rng):
    X = rng.normal(size=(30, 4))
    trial = DoseTrial(X, rng.uniform(0, 2, 30), np.full(30, 2.0))
    B, rule, rep = fit_direct(trial, 1, FAST.with_(max_iters=10))
    assert rep.termination == "gradient_tol" and rep.iterations == 0
    assert rep.final_value == pytest.approx(2.0)


def test_fit_direct_contracts(rng):
    trial = random_trial(rng, 60, 5)
    opts = OptimizerOptions(restarts=2, max_iters=5, seed=3)
    B, rule, rep = fit_direct(trial, 2, opts)
    assert B.shape == (5, 2) and orthonormality_error(B) <= 1e-10
    assert rep.is_monotone(tol=1e-12)
    assert len(rep.restart_values) == 2
    assert rep.final_value == max(rep.restart_values)
    doses = rule.predict(rng.normal(size=(50, 5)) * 10)
    assert doses.min() >= trial.dose_min and doses.max() <= trial.dose_max
    np.testing.assert_array_equal(rule.basis, B)
    assert rule.residual <= 1e-8 * np.linalg.norm(pseudo_dose_targets(
        trial, B, dose_grid(trial), reduced_bandwidths(trial, B)))


def test_fit_direct_deterministic(rng):
    trial = random_trial(rng, 40, 4)
    a = fit_direct(trial, 1, FAST)
    b = fit_direct(trial, 1, FAST)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].weights.tobytes() == b[1].weights.tobytes()
    assert a[2].to_dict() == b[2].to_dict()


def test_fit_direct_initial_list(rng):
    trial = random_trial(rng, 40, 4)
    starts = [np.eye(4)[:, [0]], np.eye(4)[:, [1]]]
    B, rule, rep = fit_direct(trial, 1, FAST.with_(max_iters=0), initial=starts)
    assert len(rep.restart_values) == 2
    assert any(np.array_equal(B, s) for s in starts)


def test_fit_direct_rejects(rng):
    trial = random_trial(rng, 40, 4)
    with pytest.raises(ValueError):
        fit_direct(trial, 4)
    with pytest.raises(ValueError):
        fit_direct(random_trial(rng, 8, 4), 1)


def test_grid_dataclass():
    assert DoseGrid(np.array([0.0, 1.0])).q == 2
