#!/usr/bin/env python3
"""
Poincare ball kernels: Mobius addition, exponential/logarithmic maps,
geodesic distance, conformal factor and gyroplane (hyperbolic affine) maps.

Every op takes and returns autodiff Tensors whose last axis holds the
coordinates, so a single point has shape (n,) and a batch has shape (B, n).
A ball point is any such tensor with c * ||x||^2 < 1 on every row.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

import autodiff as ad
from autodiff import DomainError, Tensor

log = logging.getLogger(__name__)

# below this tangent norm exp/log maps use their first-order limit
MIN_NORM = 1e-8


class PoincareError(ValueError):
    """Invalid ball configuration or gyroplane"""


@dataclass(frozen=True)
class BallConfig:
    c: float = 1.0
    boundary_eps: float = 1e-5

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise PoincareError(f"curvature magnitude must be positive, got {self.c}")
        if not 0 < self.boundary_eps < 1:
            raise PoincareError(f"boundary_eps must lie in (0, 1), got {self.boundary_eps}")

    @property
    def sqrt_c(self):
        return math.sqrt(self.c)

    @property
    def max_norm(self):
        """Largest Euclidean norm kept by project()"""
        return (1.0 - self.boundary_eps) / self.sqrt_c


@dataclass
class GyroplaneParams:
    """Shift point p on the ball and Euclidean normal w of one gyroplane"""
    p: Tensor
    w: Tensor

    def __post_init__(self):
        if self.p.ndim != 1 or self.p.shape != self.w.shape:
            raise PoincareError(f"gyroplane p {self.p.shape} and w {self.w.shape} must be equal vectors")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class PoincareBall:
    """Geometry of the open ball of radius 1/sqrt(c)"""

    def __init__(self, config=None):
        self.config = config or BallConfig()

    @property
    def c(self):
        return self.config.c

    def check_point(self, x, strict=True):
        """Raise DomainError unless every row is finite and inside the ball"""
        data = ad.no_grad_value(x)
        if not np.all(np.isfinite(data)):
            raise DomainError("ball point has non-finite coordinates")
        sq = self.c * np.sum(data * data, axis=-1)
        if strict and np.any(sq >= 1.0):
            raise DomainError(f"point outside the open ball (max c*|x|^2 = {float(np.max(sq)):.6g})")

    def _check_dims(self, op, x, y):
        if x.shape != y.shape:
            raise PoincareError(f"{op}: dimension mismatch {x.shape} vs {y.shape}")

    def _sq(self, x):
        return ad.sum_last(ad.square(x))

    def conformal_factor(self, x):
        """lambda_x = 2 / (1 - c|x|^2)"""
        x = _as_tensor(x)
        self.check_point(x)
        return 2.0 / (1.0 - self.c * self._sq(x))

    def project(self, x):
        """Pull points back to norm (1 - eps)/sqrt(c) when they stray past it"""
        x = _as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise DomainError("project: non-finite coordinates")
        max_norm = self.config.max_norm
        norms = np.sqrt(np.sum(x.data * x.data, axis=-1))
        if np.all(norms <= max_norm):
            return x
        log.debug("project: %d of %d rows clamped to the boundary margin",
                  int(np.sum(norms > max_norm)), norms.size)
        norm = ad.clamp(ad.norm_last(x), lo=1e-15)
        factor = ad.clamp(max_norm / norm, hi=1.0)
        return x * ad.expand_last(factor, x.shape[-1])

    def mobius_add(self, x, y):
        x, y = _as_tensor(x), _as_tensor(y)
        self._check_dims("mobius_add", x, y)
        c = self.c
        n = x.shape[-1]
        x2, y2 = self._sq(x), self._sq(y)
        xy = ad.sum_last(x * y)
        coef_x = 1.0 + 2.0 * c * xy + c * y2
        coef_y = 1.0 - c * x2
        denom = 1.0 + 2.0 * c * xy + (c * c) * x2 * y2
        num = ad.expand_last(coef_x, n) * x + ad.expand_last(coef_y, n) * y
        return self.project(num / ad.expand_last(denom, n))

    def dist(self, x, y):
        """Geodesic distance from the closed acosh form"""
        x, y = _as_tensor(x), _as_tensor(y)
        self._check_dims("dist", x, y)
        self.check_point(x)
        self.check_point(y)
        c = self.c
        diff2 = self._sq(x - y)
        denom = (1.0 - c * self._sq(x)) * (1.0 - c * self._sq(y))
        arg = 1.0 + 2.0 * c * diff2 / denom
        return ad.acosh(arg) * (1.0 / self.config.sqrt_c)

    def dist_gyro(self, x, y):
        """Geodesic distance as (2/sqrt c) artanh(sqrt c |(-x) + y|)"""
        x, y = _as_tensor(x), _as_tensor(y)
        self._check_dims("dist_gyro", x, y)
        sc = self.config.sqrt_c
        z = self.mobius_add(-x, y)
        return ad.artanh(sc * ad.norm_last(z)) * (2.0 / sc)

    def expmap0(self, v):
        v = _as_tensor(v)
        if not np.all(np.isfinite(v.data)):
            raise DomainError("expmap0: non-finite tangent vector")
        sc = self.config.sqrt_c
        norm = ad.clamp(ad.norm_last(v), lo=MIN_NORM)
        factor = ad.tanh(sc * norm) / (sc * norm)
        return self.project(ad.expand_last(factor, v.shape[-1]) * v)

    def logmap0(self, x):
        x = _as_tensor(x)
        self.check_point(x)
        sc = self.config.sqrt_c
        norm = ad.clamp(ad.norm_last(x), lo=MIN_NORM)
        factor = ad.artanh(sc * norm) / (sc * norm)
        return ad.expand_last(factor, x.shape[-1]) * x

    def expmap(self, p, v):
        """Exponential map at p: p + tanh(sqrt c lambda_p |v| / 2) v / (sqrt c |v|)"""
        p, v = _as_tensor(p), _as_tensor(v)
        self._check_dims("expmap", p, v)
        if not np.all(np.isfinite(v.data)):
            raise DomainError("expmap: non-finite tangent vector")
        sc = self.config.sqrt_c
        lam = self.conformal_factor(p)
        norm = ad.clamp(ad.norm_last(v), lo=1e-15)
        factor = ad.tanh(sc * lam * norm * 0.5) / (sc * norm)
        step = ad.expand_last(factor, v.shape[-1]) * v
        return self.mobius_add(p, step)

    def egrad2rgrad(self, p, grad):
        """Euclidean gradient to Riemannian gradient: grad / lambda_p^2"""
        p = ad.no_grad_value(p)
        g = ad.no_grad_value(grad)
        scale = ((1.0 - self.c * np.sum(p * p, axis=-1, keepdims=True)) / 2.0) ** 2
        return g * scale

    def _shifted(self, x, g):
        """(-p) + x, broadcasting the gyroplane shift over a batch"""
        minus_p = -g.p
        if x.ndim == 2:
            minus_p = ad.broadcast_rows(minus_p, x.shape[0])
        elif x.ndim != 1:
            raise PoincareError(f"gyroplane input must be a point or a batch, got shape {x.shape}")
        return self.mobius_add(minus_p, x)

    def gyroplane_sdist(self, x, g):
        """Signed distance from x to the gyroplane through p with normal w

        asinh is odd, so sign(<z, w>) * asinh(|.|) collapses to asinh of the
        signed argument; sign(0) = +1 gives the same zero.
        """
        x = _as_tensor(x)
        if x.shape[-1] != g.p.shape[0]:
            raise PoincareError(f"gyroplane_sdist: point dim {x.shape[-1]} vs plane dim {g.p.shape[0]}")
        w_norm = ad.l2_norm(g.w)
        if w_norm.item() == 0.0:
            raise PoincareError("gyroplane normal w must be non-zero")
        self.check_point(x)
        self.check_point(g.p)
        c, sc = self.c, self.config.sqrt_c
        z = self._shifted(x, g)
        inner = z @ g.w
        denom = (1.0 - c * self._sq(z)) * w_norm
        return ad.asinh(2.0 * sc * inner / denom) * (1.0 / sc)

    def gyroplane_affine(self, x, g):
        """Hyperbolic affine logit 2|w| / sqrt(1 - c|p|^2) * sdist(x, H)"""
        sdist = self.gyroplane_sdist(x, g)
        prefactor = 2.0 * ad.l2_norm(g.w) / ad.sqrt(1.0 - self.c * self._sq(g.p))
        return sdist * prefactor
