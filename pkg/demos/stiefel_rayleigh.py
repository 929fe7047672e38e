"""
Optimising on the Stiefel manifold
==================================

Every estimator in the package searches over p x d matrices with
orthonormal columns.  This demo runs the Cayley-transform optimiser on the
simplest such problem, the Rayleigh quotient tr(B^T M B), whose maximiser
spans the top-d eigenvectors of M.
"""

import numpy as np

from doselearn import OptimizerOptions, cayley_step, optimize_on_stiefel, random_orthonormal
from doselearn.stiefel import orthonormality_error

# a random symmetric matrix and its top two eigenvalues, the target value
rng = np.random.default_rng(0)
S = rng.normal(size=(8, 8))
M = (S + S.T) / 2
target = np.sort(np.linalg.eigvalsh(M))[::-1][:2].sum()

# one Cayley step keeps the columns orthonormal for any skew matrix
B = random_orthonormal(8, 2, seed=1)
W = rng.normal(size=(8, 8))
moved = cayley_step(B, W - W.T, tau=0.7)
print(f"orthonormality error after a Cayley step: {orthonormality_error(moved):.1e}")

# the optimiser uses a numeric gradient, so any callable objective works
objective = lambda B: float(np.trace(B.T @ M @ B))  # noqa: E731
B_hat, report = optimize_on_stiefel(objective, 8, 2, OptimizerOptions(restarts=3, max_iters=300))
print(f"sum of top two eigenvalues: {target:.10f}")
print(f"optimised Rayleigh quotient: {report.final_value:.10f}")
print(f"termination: {report.termination} after {report.iterations} iterations")
print(f"objective trace never decreased: {report.is_monotone()}")
