#!/usr/bin/env python3
"""
Tests for the Gromov delta estimators: closed-form cases, tree metrics and
agreement between the brute-force and max-min paths.
"""

import math

import numpy as np
import pytest

from autodiff import DomainError, Tensor
from envs import TreeSpec, path_metric, random_tree_metric, star_metric, tree_metric
from hyperbolicity import (DistanceMatrix, HyperbolicityError, delta_fixed_base_bruteforce,
                           delta_fourpoint_bruteforce, delta_maxmin, delta_rel, delta_rel_matrix,
                           gromov_matrix, gromov_product, maxmin_product, pairwise_dist,
                           report_from_matrix)
from poincare import PoincareBall

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _random_metric(rng, n, dim=3):
    return pairwise_dist(rng.normal(size=(n, dim)))


def test_unit_square():
    D = pairwise_dist(SQUARE)
    assert delta_fourpoint_bruteforce(D) == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
    assert delta_maxmin(D, 0) == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
    assert gromov_product(D, 1, 3, 0) == pytest.approx(1 - math.sqrt(2) / 2, abs=1e-12)
    report = delta_rel(SQUARE, rng=np.random.default_rng(0))
    assert report.delta_rel == pytest.approx(2 - math.sqrt(2), abs=1e-12)
    assert report.diameter == pytest.approx(math.sqrt(2), abs=1e-12)
    assert report.sample_size == 4 and not report.degenerate


@pytest.mark.parametrize("D", [
    path_metric(12),
    star_metric(12),
    tree_metric(TreeSpec(2, 4))[0],
    random_tree_metric(20, np.random.default_rng(0)),
], ids=["path", "star", "binary", "weighted"])
def test_trees_have_zero_delta(D):
    assert delta_fourpoint_bruteforce(D) == 0.0
    for r in (0, D.n // 2, D.n - 1):
        assert delta_maxmin(D, r) == 0.0


def test_random_weighted_trees_have_zero_delta():
    rng = np.random.default_rng(3)
    for n in (4, 9, 17, 33, 64):
        for max_weight in (1, 7):
            D = random_tree_metric(n, rng, max_weight=max_weight)
            assert np.all(D.values == np.round(D.values))
            assert all(delta_maxmin(D, r) == 0.0 for r in range(n))
            if n <= 33:
                assert delta_fourpoint_bruteforce(D) == 0.0


def test_binary_tree_of_depth_five():
    D, nodes = tree_metric(TreeSpec(2, 5))
    assert len(nodes) == 63
    assert delta_maxmin(D, 0) == 0.0
    assert delta_rel_matrix(D, rng=np.random.default_rng(1)).delta == 0.0


def test_maxmin_matches_fixed_base_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(50):
        D = _random_metric(rng, int(rng.integers(2, 13)))
        r = int(rng.integers(D.n))
        assert abs(delta_maxmin(D, r) - delta_fixed_base_bruteforce(D, r)) <= 1e-12


def test_fourpoint_is_worst_fixed_base():
    rng = np.random.default_rng(3)
    for _ in range(10):
        D = _random_metric(rng, 7)
        worst = max(delta_fixed_base_bruteforce(D, r) for r in range(D.n))
        assert delta_fourpoint_bruteforce(D) == pytest.approx(worst, abs=1e-12)


def test_maxmin_product_blocks_and_workers():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(40, 40))
    expected = np.max(np.minimum(A[:, :, None], A[None, :, :]), axis=1)
    np.testing.assert_array_equal(maxmin_product(A), expected)
    np.testing.assert_array_equal(maxmin_product(A, workers=3, block=7), expected)
    with pytest.raises(HyperbolicityError):
        maxmin_product(np.ones((2, 3)))


def test_threaded_delta_rel_is_identical():
    points = np.random.default_rng(5).normal(size=(80, 4))
    serial = delta_rel(points, rng=np.random.default_rng(9))
    threaded = delta_rel(points, rng=np.random.default_rng(9), workers=4)
    assert serial == threaded


def test_delta_rel_is_scale_free():
    D = _random_metric(np.random.default_rng(6), 30)
    base = report_from_matrix(D)
    scaled = report_from_matrix(D.scaled(3.0))
    assert scaled.delta == pytest.approx(3.0 * base.delta)
    assert scaled.delta_rel == pytest.approx(base.delta_rel)
    assert 0.0 <= base.delta_rel <= 1.0


def test_degenerate_point_set():
    report = delta_rel(np.ones((5, 3)), rng=np.random.default_rng(0))
    assert report.degenerate
    assert report.delta_rel == 0.0
    assert report.to_dict()["degenerate"] is True


def test_poincare_pairwise_matches_ball_distance():
    rng = np.random.default_rng(7)
    X = rng.uniform(-0.4, 0.4, size=(6, 2))
    D = pairwise_dist(X, "poincare")
    ball = PoincareBall()
    assert D.values[1, 4] == pytest.approx(ball.dist(Tensor(X[1]), Tensor(X[4])).item(), rel=1e-12)
    with pytest.raises(DomainError):
        pairwise_dist(np.array([[0.0, 0.0], [1.5, 0.0]]), "poincare")
    with pytest.raises(HyperbolicityError):
        pairwise_dist(X, "manhattan")


def test_gromov_matrix_base_row_is_zero():
    A = gromov_matrix(pairwise_dist(SQUARE), 2)
    np.testing.assert_allclose(A[2], 0.0, atol=1e-15)
    np.testing.assert_allclose(A[:, 2], 0.0, atol=1e-15)


@pytest.mark.parametrize("values, message", [
    (np.ones((2, 3)), "square"),
    ([[0.0, 1.0], [2.0, 0.0]], "symmetric"),
    ([[1.0, 1.0], [1.0, 0.0]], "diagonal"),
    ([[0.0, -1.0], [-1.0, 0.0]], "negative"),
    ([[0.0, np.nan], [np.nan, 0.0]], "non-finite"),
])
def test_distance_matrix_validation(values, message):
    with pytest.raises(HyperbolicityError, match=message):
        DistanceMatrix(values)


def test_triangle_check_and_indices():
    D = DistanceMatrix([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    with pytest.raises(HyperbolicityError, match="triangle"):
        D.check_triangle()
    with pytest.raises(HyperbolicityError):
        gromov_product(D, 0, 1, 3)
    with pytest.raises(HyperbolicityError):
        D.scaled(0.0)
    assert delta_fourpoint_bruteforce(D) == 0.0
    with pytest.raises(ValueError):
        D.values[0, 1] = 2.0


def test_sampling_errors():
    with pytest.raises(HyperbolicityError):
        delta_rel(SQUARE, sample_size=1)
    with pytest.raises(HyperbolicityError):
        delta_rel(SQUARE[:1])
    with pytest.raises(HyperbolicityError):
        report_from_matrix(DistanceMatrix([[0.0]]))
