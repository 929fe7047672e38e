import numpy as np

from doselearn.dataset import DoseTrial


def random_trial(rng, n, p, propensity=False):
    """Small trial with a reward that depends on x_1 and on the dose."""
    X = rng.normal(size=(n, p))
    A = rng.uniform(0, 2, size=n)
    R = rng.normal(size=n) + X[:, 0] - (A - 1) ** 2
    P = rng.uniform(0.2, 1.0, size=n) if propensity else None
    return DoseTrial(X, A, R, P)


def angle_to_span(b, target):
    """Principal angle between vector b and span(target)."""
    Qt, _ = np.linalg.qr(np.atleast_2d(np.asarray(target, dtype=float).T).T)
    b = np.asarray(b, dtype=float).ravel()
    c = np.linalg.norm(Qt.T @ b) / np.linalg.norm(b)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
