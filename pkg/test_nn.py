#!/usr/bin/env python3
"""
Tests for the network blocks: spectral normalisation, latent rescaling,
head modes and the parameter checkpoint.
"""

import math

import numpy as np
import pytest
from scipy.special import gammaln

import autodiff as ad
from autodiff import Tape, Tensor
from nn import (EncoderNet, HeadMode, HyperbolicHead, LinearLayer, NetworkError, PolicyNetwork,
                SpectralNormState, clip_latent, clipped_forward, head_forward, init_small,
                load_checkpoint, save_checkpoint, spectral_normalize, srym_forward)

ALL_MODES = [m.value for m in HeadMode]


def _top_singular(W):
    return float(np.linalg.svd(W, compute_uv=False)[0])


def _with_spectrum(rng, s):
    U, _ = np.linalg.qr(rng.normal(size=(len(s), len(s))))
    V, _ = np.linalg.qr(rng.normal(size=(len(s), len(s))))
    return U @ np.diag(s) @ V.T


def test_spectral_norm_fifty_iterations_with_gap():
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = np.concatenate([[2.0], np.linspace(1.5, 0.1, 63)])
        W = _with_spectrum(rng, s)
        state = SpectralNormState(64, rng)
        state.update(W, iters=50)
        assert 1.0 - 1e-12 <= _top_singular(W / state.sigma(W)) <= 1.0 + 1e-9


def test_spectral_norm_converged_on_gaussian():
    # top two singular values of a square Gaussian sit within a few percent
    rng = np.random.default_rng(0)
    for _ in range(5):
        W = rng.normal(size=(64, 64))
        state = SpectralNormState(64, rng)
        state.update(W, iters=1000)
        s = _top_singular(W / state.sigma(W))
        assert 0.999 <= s <= 1.001
        # the power-iteration estimate never overshoots the true norm
        assert s >= 1.0 - 1e-12


def test_spectral_norm_persistent_single_iterations():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(64, 64))
    state = SpectralNormState(64, rng, power_iters=1)
    for _ in range(200):
        state.update(W)
    assert 0.99 <= _top_singular(W / state.sigma(W)) <= 1.01


def test_spectral_layer_effective_weight():
    rng = np.random.default_rng(2)
    layer = LinearLayer(20, 30, rng, spectral_norm=True, power_iters=1)
    for _ in range(100):
        W_eff = spectral_normalize(layer)
    assert _top_singular(W_eff.data) == pytest.approx(1.0, abs=1e-2)
    plain = LinearLayer(20, 30, rng)
    assert plain.effective_weight() is plain.W
    with pytest.raises(NetworkError):
        spectral_normalize(plain)


def test_spectral_layer_gradient_holds_u_v_constant():
    rng = np.random.default_rng(3)
    layer = LinearLayer(4, 3, rng, spectral_norm=True)
    layer.effective_weight(training=True)
    x = rng.normal(size=(5, 4))
    W0 = layer.W.data.copy()

    def f(W):
        layer.W = W
        return ad.sum_(ad.square(layer.forward(Tensor(x))))

    assert ad.grad_check(f, W0) < 1e-5


@pytest.mark.parametrize("n", [8, 32, 256])
def test_rescaled_latent_norm_follows_chi(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(20000, n))
    head = HyperbolicHead(n, 4, "srym", rng)
    norms = np.linalg.norm(head.premap(Tensor(x)).data, axis=1)
    chi_mean = math.sqrt(2.0) * math.exp(gammaln((n + 1) / 2) - gammaln(n / 2))
    assert np.mean(norms) == pytest.approx(chi_mean / math.sqrt(n), rel=1e-2)
    if n >= 32:
        assert np.mean(norms) == pytest.approx(1.0, rel=2e-2)


def test_srym_and_clip_maps():
    x = Tensor([[3.0, 4.0], [0.3, 0.4]])
    np.testing.assert_allclose(clip_latent(x).data, [[0.6, 0.8], [0.3, 0.4]])
    expected = np.tanh(5.0 / math.sqrt(2.0)) * np.array([0.6, 0.8])
    np.testing.assert_allclose(srym_forward(x).data[0], expected, rtol=1e-12)
    np.testing.assert_allclose(clipped_forward(x).data[1], np.tanh(0.5) * np.array([0.6, 0.8]), rtol=1e-12)
    assert np.linalg.norm(clipped_forward(x).data[0]) == pytest.approx(np.tanh(1.0))
    with pytest.raises(NetworkError):
        srym_forward(Tensor(np.zeros((2, 0))))


def test_head_mode_flags():
    assert not HeadMode("euclid").hyperbolic and not HeadMode("euclid").spectral_norm
    assert HeadMode("euclid-sn").spectral_norm and not HeadMode("euclid-sn").hyperbolic
    assert HeadMode("srym").rescale and HeadMode("srym").spectral_norm
    assert HeadMode("srym-no-sn").rescale and not HeadMode("srym-no-sn").spectral_norm
    assert HeadMode("srym-no-rescale").spectral_norm and not HeadMode("srym-no-rescale").rescale
    assert HeadMode("clipped").clip and HeadMode("clipped").small_init
    assert HeadMode("naive").small_init and not HeadMode("srym").small_init
    with pytest.raises(ValueError):
        HeadMode("bogus")


@pytest.mark.parametrize("mode", ALL_MODES)
def test_network_forward_shapes(mode):
    rng = np.random.default_rng(4)
    net = PolicyNetwork(10, 4, mode, rng, latent_dim=6, hidden=(16,))
    out = net.forward(rng.normal(size=(5, 10)))
    assert out.logits.shape == (5, 4)
    assert out.value.shape == (5,)
    assert out.latent.shape == (5, 6)
    assert np.all(np.isfinite(out.logits.data))
    q_net = PolicyNetwork(10, 4, mode, rng, latent_dim=6, hidden=(16,), with_value=False)
    assert q_net.forward(rng.normal(size=(5, 10))).value is None
    n_ball = 5 if HeadMode(mode).hyperbolic else 0
    assert len(net.ball_parameters()) == n_ball


@pytest.mark.parametrize("mode", ALL_MODES)
def test_head_gradients(mode):
    rng = np.random.default_rng(5)
    head = HyperbolicHead(6, 4, mode, rng)

    def f(x_E):
        logits, value = head_forward(ad.reshape(x_E, (3, 6)), head)
        return ad.sum_(ad.square(logits)) + ad.sum_(value)

    for _ in range(5):
        assert ad.grad_check(f, rng.normal(scale=0.1, size=18)) < 1e-5


def test_small_init_applies_per_mode():
    rng = np.random.default_rng(6)
    bound = 1.0 / math.sqrt(16)
    naive = PolicyNetwork(10, 4, "naive", rng, latent_dim=6, hidden=(16,))
    assert np.max(np.abs(naive.encoder.layers[-1].W.data)) <= 0.01 * bound
    assert all(np.max(np.abs(p.data)) <= 0.05 for p in naive.head.parameters())
    with pytest.raises(NetworkError):
        init_small([naive.head], factor=0.0)


@pytest.mark.parametrize("mode", ["euclid", "euclid-sn", "srym", "srym-no-sn", "srym-no-rescale"])
def test_default_init_left_alone(mode):
    net = PolicyNetwork(10, 4, mode, np.random.default_rng(6), latent_dim=6, hidden=(16,))
    rng = np.random.default_rng(6)
    encoder = EncoderNet(10, 6, rng, hidden=(16,), spectral_norm=HeadMode(mode).spectral_norm)
    head = HyperbolicHead(6, 4, mode, rng)
    np.testing.assert_array_equal(net.encoder.layers[-1].W.data, encoder.layers[-1].W.data)
    for got, want in zip(net.head.parameters(), head.parameters()):
        np.testing.assert_array_equal(got.data, want.data)


def test_encoder_retains_layer_cuts():
    rng = np.random.default_rng(7)
    enc = EncoderNet(10, 6, rng, hidden=(8, 8))
    with Tape() as tape:
        out = enc.forward(rng.normal(size=(3, 10)))
        loss = ad.sum_(out)
    tape.backward(loss)
    for i in range(3):
        assert tape.retained[f"encoder.{i}.input"].shape[0] == 3
        assert tape.retained_grad(f"encoder.{i}.output").shape == (3, enc.layers[i].out_dim)


def test_input_validation():
    rng = np.random.default_rng(8)
    net = PolicyNetwork(10, 4, "srym", rng, latent_dim=6, hidden=(16,))
    with pytest.raises(NetworkError):
        net.forward(np.zeros((2, 9)))
    with pytest.raises(NetworkError):
        net.head.forward(np.zeros((2, 5)))
    with pytest.raises(NetworkError):
        EncoderNet(10, 0, rng)
    with pytest.raises(NetworkError):
        SpectralNormState(4, rng, power_iters=0)


def test_checkpoint_restores_outputs(tmp_path):
    rng = np.random.default_rng(9)
    obs = rng.normal(size=(4, 10))
    net = PolicyNetwork(10, 4, "srym", np.random.default_rng(1), latent_dim=6, hidden=(16,))
    save_checkpoint(tmp_path / "net.params", net.named_arrays())
    expected = net.forward(obs).logits.data

    other = PolicyNetwork(10, 4, "srym", np.random.default_rng(2), latent_dim=6, hidden=(16,))
    arrays = load_checkpoint(tmp_path / "net.params")
    assert "encoder.0.sn_u" in arrays
    other.load_arrays(arrays)
    np.testing.assert_allclose(other.forward(obs).logits.data, expected, rtol=1e-10)

    (tmp_path / "junk.params").write_bytes(b"\x01")
    with pytest.raises(NetworkError):
        load_checkpoint(tmp_path / "junk.params")
    with pytest.raises(NetworkError):
        other.load_arrays({})


def test_clone_is_independent():
    net = PolicyNetwork(10, 4, "naive", np.random.default_rng(3), latent_dim=6, hidden=(16,))
    twin = net.clone()
    p = net.euclidean_parameters()[0]
    p.assign(p.data + 1.0)
    assert not np.allclose(twin.euclidean_parameters()[0].data, p.data)


def test_hyperbolic_head_golden_logits():
    head = HyperbolicHead(4, 3, "srym", np.random.default_rng(10))
    normals = [[1.0, 0.0, 0.0, 0.0], [0.0, -2.0, 0.0, 0.0], [0.0, 0.0, 3.0, 4.0], [1.0, 1.0, 1.0, 1.0]]
    for g, w in zip(head.gyroplanes, normals):
        g.p.assign(np.zeros(4))
        g.w.assign(np.array(w))
    # x_E / 2 has unit norm, so x_H = tanh(1) x_E / 2 and 1 - |x_H|^2 = sech(1)^2
    logits, value = head.forward(Tensor([[1.0, 1.0, 1.0, 1.0], [-1.0, -1.0, -1.0, -1.0]]))
    half = math.asinh(math.sinh(2.0) / 2.0)
    expected = [2.0 * half, -4.0 * half, 10.0 * math.asinh(0.7 * math.sinh(2.0))]
    np.testing.assert_allclose(logits.data, [expected, [-e for e in expected]], rtol=1e-12)
    np.testing.assert_allclose(value.data, [8.0, -8.0], rtol=1e-12)


def test_euclidean_head_golden_logits():
    head = HyperbolicHead(4, 3, "euclid", np.random.default_rng(11))
    head.W.assign(np.array([[1.0, 2.0, 0.0, 0.0], [0.0, 0.0, -1.0, 1.0], [0.5, 0.5, 0.5, 0.5]]))
    head.b.assign(np.array([0.1, -0.2, 0.0]))
    head.w_value.assign(np.ones(4))
    head.b_value.assign(np.array([0.5]))
    logits, value = head.forward(Tensor([[1.0, -2.0, 3.0, 0.5], [0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(logits.data, [[1.1, -2.7, 2.25], [0.1, -0.2, 0.0]], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(value.data, [5.0, 0.5], rtol=1e-12)


def test_spectral_encoder_is_lipschitz():
    rng = np.random.default_rng(12)
    enc = EncoderNet(10, 8, rng, hidden=(16, 16), spectral_norm=True)
    for layer in enc.layers:
        layer.sn_state.update(layer.W.data, iters=2000)
    bound = (1.0 + 1e-2) ** len(enc.layers)
    x, y = rng.normal(scale=3.0, size=(2, 200, 10))
    gap = np.linalg.norm(enc.forward(x).data - enc.forward(y).data, axis=1)
    assert np.all(gap <= bound * np.linalg.norm(x - y, axis=1))
    near = x + rng.normal(scale=1e-3, size=x.shape)
    gap = np.linalg.norm(enc.forward(x).data - enc.forward(near).data, axis=1)
    assert np.all(gap <= bound * np.linalg.norm(x - near, axis=1))
