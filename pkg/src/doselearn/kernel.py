"""
Gaussian kernels, the normal-reference bandwidth and Nadaraya-Watson means.

Bandwidths may be a scalar or one value per coordinate.  The per-coordinate
form ``h * sigma_k`` is what the estimators use: it is the same as
standardising coordinate ``k`` by its standard deviation and applying a
single ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

__all__ = [
    "BandwidthSpec",
    "FLOOR_PER_POINT",
    "gaussian_kernel",
    "nw_conditional_mean",
    "nw_regress",
    "product_kernel",
    "silverman_bandwidth",
    "silverman_bandwidths",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# denominators below FLOOR_PER_POINT * (number of anchors) use the mean response
FLOOR_PER_POINT = 1e-12


def gaussian_kernel(u, h: float):
    """phi(u / h) / h with phi the standard normal density."""
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    u = np.asarray(u, dtype=float) / h
    out = _INV_SQRT_2PI * np.exp(-0.5 * u * u) / h
    return float(out) if out.ndim == 0 else out


def _as_bandwidths(h, m: int) -> NDArray:
    h = np.broadcast_to(np.asarray(h, dtype=float), (m,)).copy()
    if not np.all(h > 0) or not np.all(np.isfinite(h)):
        raise ValueError(f"bandwidths must be positive and finite, got {h}")
    return h


def product_kernel(u, h) -> float:
    """prod_k K(u_k / h_k) / h_k for a single m-vector ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.ndim != 1 or u.size == 0:
        raise ValueError("u must be a non-empty vector")
    h = _as_bandwidths(h, u.size)
    z = u / h
    return float(np.prod(_INV_SQRT_2PI / h) * np.exp(-0.5 * np.dot(z, z)))


def silverman_bandwidth(d: int, n: int, sigma: float) -> float:
    """Normal-reference bandwidth {4/(d+2)}^{1/(d+4)} n^{-1/(d+4)} sigma."""
    if d < 1 or n < 2 or not sigma > 0:
        raise ValueError(f"invalid arguments d={d}, n={n}, sigma={sigma}")
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sigma


def silverman_bandwidths(data: NDArray, d: int) -> NDArray:
    """Per-column bandwidths for ``data`` (n, m) using each column's std.

    ``d`` is the dimension plugged into the rate (the structural dimension
    for the reduced-covariate kernels).
    """
    data = np.asarray(data, dtype=float)
    sigma = data.std(axis=0, ddof=1)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return np.array([silverman_bandwidth(d, data.shape[0], s) for s in sigma])


@dataclass(frozen=True)
class BandwidthSpec:
    """How to choose per-coordinate bandwidths.

    ``silverman`` applies :func:`silverman_bandwidth` to each column's
    standard deviation; ``fixed`` uses ``fixed_value * sigma_k``, i.e. a
    fixed bandwidth on standardised coordinates.
    """

    rule: str = "silverman"
    fixed_value: Optional[float] = None

    def __post_init__(self):
        if self.rule not in ("silverman", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "fixed" and not (self.fixed_value is not None and self.fixed_value > 0):
            raise ValueError("fixed bandwidth requires fixed_value > 0")

    def resolve(self, data: NDArray, d: int) -> NDArray:
        """Bandwidth vector for the columns of ``data``."""
        data = np.asarray(data, dtype=float)
        if self.rule == "fixed":
            sigma = data.std(axis=0, ddof=1)
            return self.fixed_value * np.where(sigma > 0, sigma, 1.0)
        return silverman_bandwidths(data, d)


def nw_regress(
    anchors: NDArray,
    responses: NDArray,
    queries: NDArray,
    h,
    floor: Optional[float] = None,
    exclude_self: bool = False,
) -> Tuple[NDArray, int]:
    """Nadaraya-Watson estimates at every row of ``queries``.

    Returns ``(values, n_fallbacks)``.  With ``exclude_self`` the queries must
    be the anchors themselves and anchor ``i`` is dropped from query ``i``'s
    sums (leave-one-out).  Queries whose kernel mass is below ``floor``
    (default ``1e-12 * n``) get the plain mean of their usable responses.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    responses = np.asarray(responses, dtype=float).ravel()
    n, m = anchors.shape
    if n == 0 or responses.size != n:
        raise ValueError("need one response per anchor and at least one anchor")
    if queries.shape[1] != m:
        raise ValueError("queries and anchors differ in dimension")
    if exclude_self and (n < 2 or queries.shape[0] != n):
        raise ValueError("leave-one-out needs n >= 2 and queries equal to anchors")
    h = _as_bandwidths(h, m)
    const = np.prod(_INV_SQRT_2PI / h)
    W = cdist(queries / h, anchors / h, "sqeuclidean")
    W *= -0.5
    np.exp(W, out=W)
    W *= const
    if exclude_self:
        np.fill_diagonal(W, 0.0)
    centre = responses.mean()
    num = W @ (responses - centre)
    den = W.sum(axis=1)
    floor = FLOOR_PER_POINT * n if floor is None else floor
    low = den < floor if floor > 0 else den <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        values = centre + num / den
    if low.any():
        if exclude_self:
            fallback = (responses.sum() - responses) / (n - 1)
            values[low] = fallback[low]
        else:
            values[low] = responses.mean()
    return values, int(low.sum())


def nw_conditional_mean(
    anchors: NDArray,
    responses: NDArray,
    query: NDArray,
    h,
    floor: Optional[float] = None,
    exclude: Optional[int] = None,
) -> float:
    """Kernel-weighted mean of ``responses`` at one ``query`` point.

    ``exclude`` drops one anchor index from both sums.
    """
    anchors = np.asarray(anchors, dtype=float)
    if anchors.ndim == 1:
        anchors = anchors[:, None]
    responses = np.asarray(responses, dtype=float).ravel()
    if exclude is not None:
        if anchors.shape[0] < 2:
            raise ValueError("cannot exclude the only anchor")
        keep = np.arange(anchors.shape[0]) != exclude
        anchors, responses = anchors[keep], responses[keep]
    query = np.atleast_1d(np.asarray(query, dtype=float))[None, :]
    values, _ = nw_regress(anchors, responses, query, h, floor)
    return float(values[0])
