#!/usr/bin/env python3
"""
Gromov delta-hyperbolicity of finite metric spaces.

Three ways to get delta from a distance matrix: the four-point condition over
every quadruple (O(n^4), small inputs and oracles), the Gromov-product
condition at a fixed base point by brute force, and the same fixed-base value
through one max-min matrix product (O(n^3)). delta_rel = 2 delta / diam is the
scale-free summary reported for latent batches.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from autodiff import Tensor
from poincare import BallConfig, PoincareBall

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
TRIANGLE_TOL = 1e-9
DEGENERATE_DIAMETER = 1e-12
MAXMIN_BLOCK = 32


class HyperbolicityError(ValueError):
    """Invalid distance matrix, index or sample size"""


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.values, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise HyperbolicityError(f"distance matrix must be square, got shape {D.shape}")
        if not np.all(np.isfinite(D)):
            raise HyperbolicityError("distance matrix has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(D)))) if D.size else 1.0
        if np.any(np.abs(D - D.T) > SYMMETRY_TOL * scale):
            raise HyperbolicityError("distance matrix is not symmetric")
        if np.any(np.diag(D) != 0):
            raise HyperbolicityError("distance matrix has a non-zero diagonal")
        if np.any(D < 0):
            raise HyperbolicityError("distance matrix has negative entries")
        D.setflags(write=False)
        object.__setattr__(self, "values", D)

    @property
    def n(self):
        return self.values.shape[0]

    def diameter(self):
        return float(np.max(self.values)) if self.n else 0.0

    def check_triangle(self, tol=TRIANGLE_TOL):
        """Raise unless d(i,k) <= d(i,j) + d(j,k) for every triple"""
        D = self.values
        for j in range(self.n):
            slack = D[:, j][:, None] + D[j, :][None, :] - D
            if np.min(slack) < -tol:
                i, k = np.unravel_index(np.argmin(slack), slack.shape)
                raise HyperbolicityError(f"triangle inequality fails at ({i}, {j}, {k}) by {-slack[i, k]:.3g}")
        return self

    def scaled(self, alpha):
        if alpha <= 0:
            raise HyperbolicityError(f"scale must be positive, got {alpha}")
        return DistanceMatrix(self.values * alpha)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return DistanceMatrix(self.values[np.ix_(idx, idx)])


def _as_matrix(D):
    return D if isinstance(D, DistanceMatrix) else DistanceMatrix(D)


def pairwise_dist(points, metric="euclidean", c=1.0, check_triangle=True):
    """Exact pairwise distances under the Euclidean or Poincare metric"""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise HyperbolicityError(f"points must be a non-empty (n, d) array, got shape {X.shape}")
    if metric == "euclidean":
        diff = X[:, None, :] - X[None, :, :]
        D = np.sqrt(np.sum(diff * diff, axis=-1))
    elif metric == "poincare":
        ball = PoincareBall(BallConfig(c=c))
        n = X.shape[0]
        left = np.broadcast_to(X[:, None, :], (n, n, X.shape[1]))
        right = np.broadcast_to(X[None, :, :], (n, n, X.shape[1]))
        D = np.array(ball.dist(Tensor(left), Tensor(right)).data)
    else:
        raise HyperbolicityError(f"unknown metric {metric!r} (euclidean | poincare)")
    np.fill_diagonal(D, 0.0)
    dm = DistanceMatrix(D)
    return dm.check_triangle() if check_triangle else dm


def gromov_product(D, i, j, r):
    """(i|j)_r = (d(i,r) + d(r,j) - d(i,j)) / 2"""
    D = _as_matrix(D)
    for idx in (i, j, r):
        if not 0 <= idx < D.n:
            raise HyperbolicityError(f"index {idx} out of range for {D.n} points")
    V = D.values
    return 0.5 * (V[i, r] + V[r, j] - V[i, j])


def gromov_matrix(D, r):
    """A[i, j] = (i|j)_r for every pair"""
    D = _as_matrix(D)
    if not 0 <= r < D.n:
        raise HyperbolicityError(f"base index {r} out of range for {D.n} points")
    V = D.values
    return 0.5 * (V[:, r][:, None] + V[r, :][None, :] - V)


def delta_fourpoint_bruteforce(D):
    """max over quadruples of (S1 - S2)/2, S1 >= S2 >= S3 the three pair sums"""
    D = _as_matrix(D)
    n = D.n
    if n < 4:
        return 0.0
    V = D.values
    delta = 0.0
    for i in range(n):
        # j, k, l vectorised over an (n, n, n) grid
        row = V[i, :]
        s1 = row[:, None, None] + V[None, :, :]   # d(i,j) + d(k,l)
        s2 = row[None, :, None] + V[:, None, :]   # d(i,k) + d(j,l)
        s3 = row[None, None, :] + V[:, :, None]   # d(i,l) + d(j,k)
        sums = np.sort(np.stack([s1, s2, s3], axis=-1), axis=-1)
        delta = max(delta, float(np.max(sums[..., 2] - sums[..., 1])) / 2.0)
    return delta


def delta_fixed_base_bruteforce(D, r):
    """max over (x, y, z) of min((x|z)_r, (z|y)_r) - (x|y)_r"""
    A = gromov_matrix(D, r)
    # axes (x, z, y)
    return float(np.max(np.minimum(A[:, :, None], A[None, :, :]) - A[:, None, :]))


def _maxmin_rows(A, rows):
    return np.max(np.minimum(A[rows, :, None], A[None, :, :]), axis=1)


def maxmin_product(A, workers=None, block=MAXMIN_BLOCK):
    """(A (x) A)[i, j] = max_k min(A[i, k], A[k, j]), computed in row blocks"""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise HyperbolicityError(f"max-min product needs a square matrix, got shape {A.shape}")
    n = A.shape[0]
    blocks = [np.arange(s, min(s + block, n)) for s in range(0, n, block)]
    out = np.empty_like(A)
    if workers and workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rows, part in zip(blocks, pool.map(lambda rows: _maxmin_rows(A, rows), blocks)):
                out[rows] = part
    else:
        for rows in blocks:
            out[rows] = _maxmin_rows(A, rows)
    return out


def delta_maxmin(D, r=0, workers=None):
    """Fixed-base delta as max(A (x) A - A) with A the Gromov products at r"""
    A = gromov_matrix(D, r)
    if A.shape[0] == 0:
        return 0.0
    return float(np.max(maxmin_product(A, workers) - A))


@dataclass
class HyperbolicityReport:
    delta: float
    diameter: float
    delta_rel: float
    base_index: Optional[int]
    sample_size: int
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def report_from_matrix(D, base_index=0, workers=None):
    D = _as_matrix(D)
    if D.n < 2:
        raise HyperbolicityError(f"need at least 2 points, got {D.n}")
    delta = delta_maxmin(D, base_index, workers)
    diameter = D.diameter()
    if diameter < DEGENERATE_DIAMETER:
        log.debug("degenerate point set: diameter %.3g", diameter)
        return HyperbolicityReport(delta, diameter, 0.0, base_index, D.n, degenerate=True)
    return HyperbolicityReport(delta, diameter, 2.0 * delta / diameter, base_index, D.n)


def _sample(n, sample_size, rng):
    if sample_size < 2:
        raise HyperbolicityError(f"sample size must be at least 2, got {sample_size}")
    m = min(sample_size, n)
    if m < 2:
        raise HyperbolicityError(f"need at least 2 points after sampling, got {m}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.choice(n, size=m, replace=False)


def delta_rel(points, metric="euclidean", sample_size=256, rng=None, c=1.0, workers=None):
    """Subsample, then delta at the first sampled point over the sample's diameter"""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise HyperbolicityError(f"points must be an (n, d) array, got shape {X.shape}")
    idx = _sample(X.shape[0], sample_size, rng)
    D = pairwise_dist(X[idx], metric, c, check_triangle=False)
    return report_from_matrix(D, 0, workers)


def delta_rel_matrix(D, sample_size=256, rng=None, workers=None):
    """delta_rel for a precomputed distance matrix"""
    D = _as_matrix(D)
    idx = _sample(D.n, sample_size, rng)
    return report_from_matrix(D.subset(idx), 0, workers)
