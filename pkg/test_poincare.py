#!/usr/bin/env python3
"""
Tests for the Poincare ball kernels: closed-form values, Mobius identities,
distance agreement and differentiability of the head-facing maps.
"""

import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import DomainError, Tensor
from poincare import BallConfig, GyroplaneParams, PoincareBall, PoincareError


@pytest.fixture
def ball():
    return PoincareBall(BallConfig(c=1.0))


def _points(rng, n, dim, radius=0.7):
    x = rng.normal(size=(n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * radius * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / dim)


def test_mobius_add_golden(ball):
    out = ball.mobius_add(Tensor([0.3, 0.0]), Tensor([0.0, 0.4])).data
    np.testing.assert_allclose(out, [435 / 1268, 455 / 1268], rtol=1e-12)


def test_distance_from_origin(ball):
    assert ball.dist(Tensor([0.0, 0.0]), Tensor([0.5, 0.0])).item() == pytest.approx(math.log(3.0), abs=1e-12)


def test_expmap0_golden(ball):
    np.testing.assert_allclose(ball.expmap0(Tensor([0.5, 0.0])).data, [math.tanh(0.5), 0.0], rtol=1e-12)


def test_gyroplane_golden(ball):
    g = GyroplaneParams(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))
    x = Tensor([0.5, 0.0])
    assert ball.gyroplane_sdist(x, g).item() == pytest.approx(math.asinh(4.0 / 3.0), abs=1e-12)
    assert ball.gyroplane_affine(x, g).item() == pytest.approx(2.0 * math.asinh(4.0 / 3.0), abs=1e-12)


def test_sdist_sign_flips_across_plane(ball):
    g = GyroplaneParams(Tensor([0.1, 0.0]), Tensor([1.0, 0.0]))
    batch = Tensor([[0.5, 0.1], [-0.4, 0.1], [0.1, 0.0]])
    d = ball.gyroplane_sdist(batch, g).data
    assert d[0] > 0 > d[1]
    assert d[2] == pytest.approx(0.0, abs=1e-12)


def test_conformal_factor_with_curvature():
    ball = PoincareBall(BallConfig(c=0.25))
    assert ball.conformal_factor(Tensor([1.0, 1.0])).item() == pytest.approx(4.0)


def test_distance_forms_agree(ball):
    rng = np.random.default_rng(0)
    x, y = _points(rng, 1000, 3), _points(rng, 1000, 3)
    acosh_form = ball.dist(Tensor(x), Tensor(y)).data
    gyro_form = ball.dist_gyro(Tensor(x), Tensor(y)).data
    np.testing.assert_allclose(acosh_form, gyro_form, rtol=1e-10, atol=1e-10)
    closed = 2.0 * np.arctanh(np.linalg.norm(y, axis=1))
    np.testing.assert_allclose(ball.dist(Tensor(np.zeros_like(y)), Tensor(y)).data, closed,
                               rtol=1e-10, atol=1e-10)


def test_mobius_identities(ball):
    rng = np.random.default_rng(1)
    x, y = Tensor(_points(rng, 200, 4)), Tensor(_points(rng, 200, 4))
    zero = Tensor(np.zeros((200, 4)))
    np.testing.assert_allclose(ball.mobius_add(x, zero).data, x.data, atol=1e-10)
    np.testing.assert_allclose(ball.mobius_add(-x, x).data, 0.0, atol=1e-10)
    np.testing.assert_allclose(ball.mobius_add(-x, ball.mobius_add(x, y)).data, y.data, atol=1e-10)


def test_exp_log_inverse(ball):
    rng = np.random.default_rng(2)
    v = rng.normal(size=(50, 3))
    np.testing.assert_allclose(ball.logmap0(ball.expmap0(v)).data, v, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(ball.expmap(Tensor(np.zeros((50, 3))), Tensor(v * 0.1)).data,
                               ball.expmap0(v * 0.1).data, atol=1e-12)


def test_expmap_travels_the_tangent_length(ball):
    p = Tensor([0.2, -0.3])
    v = Tensor([0.05, 0.02])
    q = ball.expmap(p, v)
    expected = ball.conformal_factor(p).item() * np.linalg.norm(v.data)
    assert ball.dist(p, q).item() == pytest.approx(expected, rel=1e-8)


def test_project_pulls_back_to_margin(ball):
    out = ball.project(Tensor([[3.0, 4.0], [0.1, 0.0]])).data
    assert np.linalg.norm(out[0]) == pytest.approx(ball.config.max_norm)
    np.testing.assert_array_equal(out[1], [0.1, 0.0])
    assert np.linalg.norm(ball.expmap0(Tensor([100.0, 0.0])).data) <= ball.config.max_norm + 1e-15


def test_egrad2rgrad_scale(ball):
    g = np.array([1.0, 1.0])
    np.testing.assert_allclose(ball.egrad2rgrad(np.zeros(2), g), g / 4.0)
    p = np.array([math.sqrt(0.99), 0.0])
    np.testing.assert_allclose(ball.egrad2rgrad(p, g), g * 2.5e-5, rtol=1e-9)


def test_domain_errors(ball):
    with pytest.raises(DomainError):
        ball.check_point(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ball.dist(Tensor([0.0, 0.0]), Tensor([2.0, 0.0]))
    with pytest.raises(DomainError):
        ball.expmap0(Tensor([np.inf, 0.0]))
    with pytest.raises(PoincareError):
        ball.mobius_add(Tensor([0.1, 0.0]), Tensor([0.1, 0.0, 0.0]))
    with pytest.raises(PoincareError):
        ball.gyroplane_sdist(Tensor([0.1, 0.0]), GyroplaneParams(Tensor([0.0, 0.0]), Tensor([0.0, 0.0])))
    with pytest.raises(PoincareError):
        BallConfig(c=0.0)


def test_kernels_pass_gradient_checks(ball):
    rng = np.random.default_rng(3)
    w = rng.normal(size=3)
    for _ in range(20):
        x0, y0 = _points(rng, 2, 3, radius=0.6)
        p0 = _points(rng, 1, 3, radius=0.3)[0]
        assert ad.grad_check(lambda x: ball.dist(x, Tensor(y0)), x0) < 1e-5
        assert ad.grad_check(lambda v: ad.sum_(ball.expmap0(v)), rng.normal(size=3)) < 1e-5
        assert ad.grad_check(lambda x: ad.sum_(ball.mobius_add(x, Tensor(y0))), x0) < 1e-5
        assert ad.grad_check(
            lambda p: ball.gyroplane_affine(Tensor(x0), GyroplaneParams(p, Tensor(w))), p0) < 1e-5
        assert ad.grad_check(
            lambda x: ball.gyroplane_affine(x, GyroplaneParams(Tensor(p0), Tensor(w))), x0) < 1e-5


def _mobius_ref(x, y, c):
    xy, x2, y2 = float(np.dot(x, y)), float(np.dot(x, x)), float(np.dot(y, y))
    num = (1 + 2 * c * xy + c * y2) * np.asarray(x) + (1 - c * x2) * np.asarray(y)
    return num / (1 + 2 * c * xy + c * c * x2 * y2)


def _affine_ref(x, p, w, c):
    z = _mobius_ref(-np.asarray(p), x, c)
    w_norm = math.sqrt(float(np.dot(w, w)))
    sdist = math.asinh(2 * math.sqrt(c) * float(np.dot(z, w)) / ((1 - c * float(np.dot(z, z))) * w_norm))
    return 2 * w_norm / math.sqrt(1 - c * float(np.dot(p, p))) * sdist / math.sqrt(c)


@pytest.mark.parametrize("c, a, b, w", [
    (0.5, 0.2, 0.6, (1.0, 0.0)),
    (2.0, -0.3, 0.4, (0.5, -2.0)),
    (0.25, 0.9, -1.1, (-3.0, 1.0)),
    (3.0, 0.1, 0.1, (1.0, 1.0)),
    (0.1, -1.5, 2.0, (0.2, 0.0)),
])
def test_gyroplane_affine_collinear_golden(c, a, b, w):
    # along one axis (-a) + b collapses to (b - a) / (1 - c a b)
    ball = PoincareBall(BallConfig(c=c))
    z = (b - a) / (1 - c * a * b)
    w_norm = math.hypot(*w)
    sdist = math.asinh(2 * math.sqrt(c) * z * w[0] / ((1 - c * z * z) * w_norm)) / math.sqrt(c)
    expected = 2 * w_norm / math.sqrt(1 - c * a * a) * sdist
    g = GyroplaneParams(Tensor([a, 0.0]), Tensor(list(w)))
    assert ball.gyroplane_affine(Tensor([b, 0.0]), g).item() == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert expected == pytest.approx(_affine_ref([b, 0.0], [a, 0.0], w, c), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("c", [0.3, 1.7])
def test_gyroplane_affine_matches_reference(c):
    ball = PoincareBall(BallConfig(c=c))
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, p = _points(rng, 2, 3, radius=0.7 / math.sqrt(c))
        w = rng.normal(size=3)
        got = ball.gyroplane_affine(Tensor(x), GyroplaneParams(Tensor(p), Tensor(w))).item()
        assert got == pytest.approx(_affine_ref(x, p, w, c), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("c", [0.5, 1.0, 4.0])
def test_distance_triangle_inequality(c):
    ball = PoincareBall(BallConfig(c=c))
    rng = np.random.default_rng(5)
    r = 0.95 / math.sqrt(c)
    x, y, z = (Tensor(_points(rng, 500, 3, radius=r)) for _ in range(3))
    d_xz = ball.dist(x, z).data
    d_xy, d_yz = ball.dist(x, y).data, ball.dist(y, z).data
    assert np.all(d_xz <= d_xy + d_yz + 1e-10)
    np.testing.assert_allclose(ball.dist(x, y).data, ball.dist(y, x).data, rtol=1e-12)
