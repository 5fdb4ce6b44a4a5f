#!/usr/bin/env python3
"""
Network building blocks: spectrally-normalised MLP encoder, hyperbolic and
Euclidean output heads, and the parameter checkpoint format.

A network maps observations to Euclidean latents x_E = f_E(s), then either
applies a plain affine head (Euclidean modes) or maps x_E onto the Poincare
ball and evaluates one gyroplane per output (hyperbolic modes).
"""

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

import autodiff as ad
from autodiff import Tensor
from poincare import BallConfig, GyroplaneParams, PoincareBall

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
CHECKPOINT_MAGIC = "hyprl-params"


class NetworkError(ValueError):
    """Invalid network construction or input"""


class HeadMode(str, Enum):
    EUCLID = "euclid"
    EUCLID_SN = "euclid-sn"
    NAIVE = "naive"
    CLIPPED = "clipped"
    SRYM = "srym"
    SRYM_NO_SN = "srym-no-sn"
    SRYM_NO_RESCALE = "srym-no-rescale"

    @property
    def hyperbolic(self):
        return self not in (HeadMode.EUCLID, HeadMode.EUCLID_SN)

    @property
    def spectral_norm(self):
        return self in (HeadMode.EUCLID_SN, HeadMode.SRYM, HeadMode.SRYM_NO_RESCALE)

    @property
    def rescale(self):
        return self in (HeadMode.SRYM, HeadMode.SRYM_NO_SN)

    @property
    def clip(self):
        return self is HeadMode.CLIPPED

    @property
    def small_init(self):
        """Shrink the last encoder layer as well as the head"""
        return self in (HeadMode.NAIVE, HeadMode.CLIPPED)


def _ball(config):
    if isinstance(config, PoincareBall):
        return config
    return PoincareBall(config or BallConfig())


# -- spectral normalisation ---------------------------------------------------

class SpectralNormState:
    """Persistent left singular vector estimate for power iteration"""

    def __init__(self, out_dim, rng, power_iters=1):
        if power_iters < 1:
            raise NetworkError(f"power_iters must be at least 1, got {power_iters}")
        u = rng.normal(size=out_dim)
        self.u = u / np.linalg.norm(u)
        self.v = None
        self.power_iters = int(power_iters)

    def update(self, W, iters=None):
        """v = W^T u / |W^T u|, u = W v / |W v|, repeated"""
        for _ in range(iters or self.power_iters):
            v = W.T @ self.u
            v = v / max(np.linalg.norm(v), SIGMA_FLOOR)
            u = W @ v
            self.u = u / max(np.linalg.norm(u), SIGMA_FLOOR)
            self.v = v

    def sigma(self, W):
        if self.v is None:
            self.update(W)
        return float(self.u @ W @ self.v)


class LinearLayer:
    """Affine map W x + b, optionally with W divided by its spectral norm"""

    def __init__(self, in_dim, out_dim, rng, spectral_norm=False, power_iters=1, name="linear"):
        bound = 1.0 / math.sqrt(in_dim)
        self.W = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                        requires_grad=True, name=f"{name}.W")
        self.b = Tensor(rng.uniform(-bound, bound, size=out_dim),
                        requires_grad=True, name=f"{name}.b")
        self.name = name
        self.sn_state = SpectralNormState(out_dim, rng, power_iters) if spectral_norm else None

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def parameters(self):
        return [self.W, self.b]

    def effective_weight(self, training=False):
        """W, or W / sigma(W) with u and v held constant"""
        if self.sn_state is None:
            return self.W
        if training or self.sn_state.v is None:
            self.sn_state.update(self.W.data)
        u = Tensor(self.sn_state.u)
        v = Tensor(self.sn_state.v)
        sigma = ad.sum_(u * (self.W @ v))
        return self.W / ad.clamp(sigma, lo=SIGMA_FLOOR)

    def forward(self, x, training=False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.in_dim:
            raise NetworkError(f"{self.name}: input dim {x.shape[-1]} != {self.in_dim}")
        h = x @ ad.transpose(self.effective_weight(training))
        b = ad.broadcast_rows(self.b, x.shape[0]) if x.ndim == 2 else self.b
        return h + b


def spectral_normalize(layer):
    """One power-iteration step on the layer, returning W / sigma_hat"""
    if layer.sn_state is None:
        raise NetworkError(f"{layer.name} has no spectral norm state")
    return layer.effective_weight(training=True)


class EncoderNet:
    """MLP f_E with ReLU between layers and a linear latent output"""

    def __init__(self, in_dim, latent_dim, rng, hidden=(128, 128), spectral_norm=False, power_iters=1):
        dims = [in_dim, *hidden, latent_dim]
        if any(d < 1 for d in dims):
            raise NetworkError(f"encoder dims must be positive, got {dims}")
        self.layers = [
            LinearLayer(dims[i], dims[i + 1], rng, spectral_norm, power_iters, name=f"encoder.{i}")
            for i in range(len(dims) - 1)
        ]

    @property
    def latent_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, training=False):
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            ad.maybe_retain(f"encoder.{i}.input", h)
            h = layer.forward(h, training)
            ad.maybe_retain(f"encoder.{i}.output", h)
            if i < last:
                h = ad.relu(h)
        return h


# -- latent to ball maps ------------------------------------------------------

def srym_forward(x_E, config=None):
    """exp_0(x_E / sqrt(n))"""
    x_E = x_E if isinstance(x_E, Tensor) else Tensor(x_E)
    n = x_E.shape[-1] if x_E.ndim else 0
    if n == 0:
        raise NetworkError("srym_forward: latent dimension is zero")
    return _ball(config).expmap0(x_E * (1.0 / math.sqrt(n)))


def clip_latent(x_E):
    """min(1, 1/|x_E|) x_E"""
    x_E = x_E if isinstance(x_E, Tensor) else Tensor(x_E)
    norm = ad.clamp(ad.norm_last(x_E), lo=1e-15)
    factor = ad.clamp(1.0 / norm, hi=1.0)
    return x_E * ad.expand_last(factor, x_E.shape[-1])


def clipped_forward(x_E, config=None):
    return _ball(config).expmap0(clip_latent(x_E))


# -- heads --------------------------------------------------------------------

class HyperbolicHead:
    """One gyroplane (or affine row) per output: |A| logits plus an optional value"""

    def __init__(self, latent_dim, n_actions, mode, rng, config=None, with_value=True):
        self.mode = HeadMode(mode)
        self.ball = _ball(config)
        self.latent_dim = latent_dim
        self.n_actions = n_actions
        self.with_value = with_value
        bound = 1.0 / math.sqrt(latent_dim)
        n_out = n_actions + (1 if with_value else 0)
        if self.mode.hyperbolic:
            self.gyroplanes = [
                GyroplaneParams(
                    p=Tensor(rng.normal(scale=1e-2, size=latent_dim), requires_grad=True,
                             name=f"head.gyro.{k}.p"),
                    w=Tensor(rng.uniform(-bound, bound, size=latent_dim), requires_grad=True,
                             name=f"head.gyro.{k}.w"),
                )
                for k in range(n_out)
            ]
        else:
            self.W = Tensor(rng.uniform(-bound, bound, size=(n_actions, latent_dim)),
                            requires_grad=True, name="head.W")
            self.b = Tensor(rng.uniform(-bound, bound, size=n_actions),
                            requires_grad=True, name="head.b")
            if with_value:
                self.w_value = Tensor(rng.uniform(-bound, bound, size=latent_dim),
                                      requires_grad=True, name="head.w_value")
                self.b_value = Tensor(rng.uniform(-bound, bound, size=1),
                                      requires_grad=True, name="head.b_value")

    def euclidean_parameters(self):
        if self.mode.hyperbolic:
            return [g.w for g in self.gyroplanes]
        params = [self.W, self.b]
        if self.with_value:
            params += [self.w_value, self.b_value]
        return params

    def ball_parameters(self):
        return [g.p for g in self.gyroplanes] if self.mode.hyperbolic else []

    def parameters(self):
        return self.euclidean_parameters() + self.ball_parameters()

    def premap(self, x_E):
        """The latent as it enters the exponential map"""
        x_E = x_E if isinstance(x_E, Tensor) else Tensor(x_E)
        if self.mode.clip:
            return clip_latent(x_E)
        if self.mode.rescale:
            return x_E * (1.0 / math.sqrt(x_E.shape[-1]))
        return x_E

    def to_ball(self, x_E):
        """Map the Euclidean latent onto the ball according to the head mode"""
        if self.mode.clip:
            return clipped_forward(x_E, self.ball)
        if self.mode.rescale:
            return srym_forward(x_E, self.ball)
        return self.ball.expmap0(x_E)

    def forward(self, x_E):
        x_E = x_E if isinstance(x_E, Tensor) else Tensor(x_E)
        if x_E.shape[-1] != self.latent_dim:
            raise NetworkError(f"head expects latent dim {self.latent_dim}, got {x_E.shape[-1]}")
        if not self.mode.hyperbolic:
            h = ad.relu(x_E)
            b = ad.broadcast_rows(self.b, h.shape[0]) if h.ndim == 2 else self.b
            logits = h @ ad.transpose(self.W) + b
            value = h @ self.w_value + self.b_value if self.with_value else None
            return logits, value
        x_H = self.to_ball(x_E)
        outputs = [self.ball.gyroplane_affine(x_H, g) for g in self.gyroplanes]
        logits = ad.stack_last(outputs[:self.n_actions])
        value = outputs[self.n_actions] if self.with_value else None
        return logits, value


def head_forward(x, head):
    return head.forward(x)


def init_small(layers, factor=0.01):
    """Scale every parameter of the given layers/heads in place"""
    if factor <= 0:
        raise NetworkError(f"init factor must be positive, got {factor}")
    for layer in layers:
        for p in layer.parameters():
            p.assign(p.data * factor)


# -- full network -------------------------------------------------------------

@dataclass
class NetworkOutput:
    logits: Tensor
    value: Tensor
    latent: Tensor


class PolicyNetwork:
    """Shared encoder feeding a policy/value (or Q) head"""

    def __init__(self, obs_dim, n_actions, mode, rng, latent_dim=32, hidden=(128, 128),
                 ball_config=None, with_value=True, power_iters=1):
        self.mode = HeadMode(mode)
        self.ball = _ball(ball_config)
        self.encoder = EncoderNet(obs_dim, latent_dim, rng, hidden,
                                  spectral_norm=self.mode.spectral_norm, power_iters=power_iters)
        self.head = HyperbolicHead(latent_dim, n_actions, self.mode, rng, self.ball, with_value)
        if self.mode.small_init:
            init_small([self.encoder.layers[-1], self.head])
        log.debug("built %s network: obs %d -> latent %d -> %d actions",
                  self.mode.value, obs_dim, latent_dim, n_actions)

    @property
    def latent_dim(self):
        return self.encoder.latent_dim

    def euclidean_parameters(self):
        return self.encoder.parameters() + self.head.euclidean_parameters()

    def ball_parameters(self):
        return self.head.ball_parameters()

    def forward(self, obs, training=False):
        x_E = self.encoder.forward(obs, training)
        ad.maybe_retain("latent", x_E)
        logits, value = self.head.forward(x_E)
        return NetworkOutput(logits, value, x_E)

    def named_arrays(self):
        named = {}
        for p in self.euclidean_parameters() + self.ball_parameters():
            named[p.name] = p.data
        for layer in self.encoder.layers:
            if layer.sn_state is not None:
                named[f"{layer.name}.sn_u"] = layer.sn_state.u
        return named

    def load_arrays(self, arrays):
        for p in self.euclidean_parameters() + self.ball_parameters():
            if p.name not in arrays:
                raise NetworkError(f"checkpoint is missing {p.name}")
            p.assign(arrays[p.name])
        for layer in self.encoder.layers:
            key = f"{layer.name}.sn_u"
            if layer.sn_state is not None and key in arrays:
                layer.sn_state.u = np.array(arrays[key], dtype=np.float64)
                layer.sn_state.v = None

    def clone(self):
        return copy.deepcopy(self)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, arrays):
    """u64 LE header length, JSON header {name, shape, offset}, LE f64 payload"""
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format": CHECKPOINT_MAGIC, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise NetworkError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise NetworkError(f"{path}: not a parameter checkpoint")
    payload = raw[8 + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays
