#!/usr/bin/env python3
"""
Optimizers for hybrid networks: Adam for Euclidean weights, Riemannian Adam
for parameters living on the Poincare ball, and global-norm gradient clipping.

Updates are applied in place through Tensor.assign after a backward pass and
never record on a tape.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from autodiff import Tensor

log = logging.getLogger(__name__)


class OptimError(ValueError):
    """Bad optimizer input (non-finite gradient, shape mismatch, bad setting)"""


def _label(param, index):
    return param.name or f"param[{index}]"


def _check_grads(params, grads):
    if len(params) != len(grads):
        raise OptimError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != p.shape:
            raise OptimError(f"gradient for {_label(p, i)} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for {_label(p, i)}")


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise OptimError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise OptimError(f"eps must be positive, got {self.eps}")


@dataclass
class RAdamState(AdamState):
    """Adam moments for ball parameters

    per_point=False keeps coordinate-wise moments of the Euclidean gradient and
    shrinks the resulting step by the inverse metric (1 - c|p|^2)^2 / 4, so
    points near the boundary barely move. per_point=True tracks one second
    moment per point, the Riemannian squared norm lambda_p^2 |rgrad|^2, which
    keeps the geodesic step length near lr everywhere in the ball.
    """
    per_point: bool = False


def sgd_step(params, grads, lr):
    _check_grads(params, grads)
    for p, g in zip(params, grads):
        p.assign(p.data - lr * np.asarray(g))


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place"""
    _check_grads(params, grads)
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        denom = np.sqrt(state.v[i] / bc2) + state.eps
        p.assign(p.data - state.lr * (state.m[i] / bc1) / denom)


def riemannian_adam_step(params, grads, state, ball):
    """Adam on the ball: metric-scaled step, expmap retraction, projection

    Moments are not parallel-transported between steps.
    """
    _check_grads(params, grads)
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape[:-1] + (1,) if state.per_point else p.shape) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        point = p.data
        ball.check_point(point)
        g = np.asarray(g, dtype=np.float64)
        inv_metric = ((1.0 - ball.c * np.sum(point * point, axis=-1, keepdims=True)) / 2.0) ** 2
        if state.per_point:
            rgrad = inv_metric * g
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * rgrad
            sq_norm = np.sum(rgrad * rgrad, axis=-1, keepdims=True) / inv_metric
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * sq_norm
            delta = (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
        else:
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
            delta = inv_metric * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
        moved = ball.expmap(Tensor(point), Tensor(-state.lr * delta))
        p.assign(ball.project(moved).data)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))


def clip_global_norm(grads, max_norm=0.5):
    """Scale all gradients by max_norm / |g| when the joint norm exceeds max_norm"""
    if max_norm <= 0:
        raise OptimError(f"max_norm must be positive, got {max_norm}")
    total = global_norm(grads)
    if total <= max_norm:
        return [np.asarray(g, dtype=np.float64) for g in grads]
    factor = max_norm / total
    return [np.asarray(g, dtype=np.float64) * factor for g in grads]


class HybridOptimizer:
    """Adam with clipping on Euclidean weights, Riemannian Adam on ball points"""

    def __init__(self, euclidean_params, ball_params, ball,
                 lr=5e-4, eps=1e-5, max_grad_norm=0.5):
        self.euclidean_params = list(euclidean_params)
        self.ball_params = list(ball_params)
        self.ball = ball
        self.max_grad_norm = max_grad_norm
        self.adam = AdamState(lr=lr, eps=eps)
        self.radam = RAdamState(lr=lr, eps=eps)

    @property
    def parameters(self):
        return self.euclidean_params + self.ball_params

    def step(self, grads):
        """Apply one update from a {param: grad} map; returns the pre-clip Euclidean norm"""
        e_grads = [grads.get(p, np.zeros(p.shape)) for p in self.euclidean_params]
        b_grads = [grads.get(p, np.zeros(p.shape)) for p in self.ball_params]
        norm = global_norm(e_grads)
        if self.max_grad_norm is not None:
            e_grads = clip_global_norm(e_grads, self.max_grad_norm)
        adam_step(self.euclidean_params, e_grads, self.adam)
        if self.ball_params:
            riemannian_adam_step(self.ball_params, b_grads, self.radam, self.ball)
        log.debug("optimizer step %d: euclidean grad norm %.4g", self.adam.step, norm)
        return norm
