"""Instance encoders: an expensive teacher and a cheap distilled student.

Both map a candidate's 10x50 alignment tensor ``x`` and its structural
attributes ``u = (p, s_esa)`` to an embedding ``h`` and a scalar logit ``z``.
Inputs are handled channels-last internally ([N, 50, 10]).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

WIDTH = 50
CHANNELS = 10


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "teacher"  # teacher | student
    d: int = 384
    conv1: int = 32
    conv2: int = 32
    hidden: int = 128
    ca_reduction: int = 4

    def __post_init__(self):
        if self.kind not in ("teacher", "student"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        for f in ("d", "conv1", "conv2", "hidden", "ca_reduction"):
            if getattr(self, f) < 1:
                raise ValueError(f"encoder.{f} must be >= 1")


TEACHER_DEFAULT = EncoderConfig("teacher", d=384, conv1=32, conv2=32, hidden=128)
STUDENT_DEFAULT = EncoderConfig("student", d=64, conv1=16)


@dataclass
class ExpensiveOut:
    h: np.ndarray
    z: float


@dataclass
class CheapSignals:
    h: np.ndarray
    z: float


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def u_features(u: np.ndarray) -> np.ndarray:
    # s_esa lives on a ~[6, 10] scale; bring it near p's range
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    return np.stack([u[:, 0], u[:, 1] / 10.0], axis=1)


def channel_attention(features: Tensor, w1, b1, w2, b2) -> Tensor:
    """Gate each channel by sigmoid(MLP(mean over width)); features are [..., W, C].

    The gate does not depend on position, so the output is ``g * features``
    with one g per channel.
    """
    pooled = nc.mean(features, axis=-2, keepdims=True)  # [..., 1, C]
    gate = nc.sigmoid(nc.relu(pooled @ w1 + b1) @ w2 + b2)
    return features * gate


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: nc.RngState | int = 0):
        self.cfg = cfg
        self.calls = 0
        if isinstance(rng, int):
            rng = nc.RngState(rng)
        g = rng.child(f"encoder/{cfg.kind}").generator()
        p = {}
        c1 = cfg.conv1
        w1 = WIDTH - 5 + 1
        p["conv1.w"] = uniform_init(g, (5 * CHANNELS, c1), 5 * CHANNELS)
        p["conv1.b"] = np.zeros(c1)
        if cfg.kind == "teacher":
            r = max(c1 // cfg.ca_reduction, 1)
            p["ca.w1"] = uniform_init(g, (c1, r), c1)
            p["ca.b1"] = np.zeros(r)
            p["ca.w2"] = uniform_init(g, (r, c1), r)
            p["ca.b2"] = np.zeros(c1)
            p["conv2.w"] = uniform_init(g, (3 * c1, cfg.conv2), 3 * c1)
            p["conv2.b"] = np.zeros(cfg.conv2)
            flat = (w1 - 3 + 1) * cfg.conv2 + 2
            p["hidden.w"] = uniform_init(g, (flat, cfg.hidden), flat)
            p["hidden.b"] = np.zeros(cfg.hidden)
            p["h.w"] = uniform_init(g, (cfg.hidden, cfg.d), cfg.hidden)
            p["h.b"] = np.zeros(cfg.d)
            p["z.w"] = uniform_init(g, (cfg.hidden, 1), cfg.hidden)
            p["z.b"] = np.zeros(1)
        else:
            flat = w1 * c1 + 2
            p["h.w"] = uniform_init(g, (flat, cfg.d), flat)
            p["h.b"] = np.zeros(cfg.d)
            p["z.w"] = uniform_init(g, (cfg.d, 1), cfg.d)
            p["z.b"] = np.zeros(1)
        self.params = {k: nc.parameter(v, k) for k, v in p.items()}

    @property
    def d(self) -> int:
        return self.cfg.d

    def forward(self, x, u) -> tuple:
        """Batched forward: x [N, 10, 50], u [N, 2] -> (h [N, d], z [N])."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (CHANNELS, WIDTH):
            raise ValueError(f"expected x of shape [N, {CHANNELS}, {WIDTH}], got {x.shape}")
        n = x.shape[0]
        self.calls += n
        P = self.params
        xt = Tensor(np.ascontiguousarray(np.swapaxes(x, 1, 2)))
        uf = Tensor(u_features(u))
        a = nc.relu(nc.conv1d(xt, P["conv1.w"], P["conv1.b"], 5))
        if self.cfg.kind == "teacher":
            a = channel_attention(a, P["ca.w1"], P["ca.b1"], P["ca.w2"], P["ca.b2"])
            a = nc.relu(nc.conv1d(a, P["conv2.w"], P["conv2.b"], 3))
            flat = nc.concat([a.reshape(n, -1), uf], axis=1)
            hid = nc.relu(flat @ P["hidden.w"] + P["hidden.b"])
            h = hid @ P["h.w"] + P["h.b"]
            z = hid @ P["z.w"] + P["z.b"]
        else:
            flat = nc.concat([a.reshape(n, -1), uf], axis=1)
            h = flat @ P["h.w"] + P["h.b"]
            z = nc.relu(h) @ P["z.w"] + P["z.b"]
        return h, z.reshape(n)

    def encode(self, x, u, batch: int = 512) -> tuple:
        """Gradient-free forward in chunks; returns numpy (h, z)."""
        n = len(x)
        if n == 0:
            return np.zeros((0, self.d)), np.zeros(0)
        hs, zs = [], []
        with nc.no_grad():
            for s in range(0, n, batch):
                h, z = self.forward(x[s:s + batch], u[s:s + batch])
                hs.append(h.data)
                zs.append(z.data)
        return np.concatenate(hs), np.concatenate(zs)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def teacher_forward(enc: Encoder, x, u) -> ExpensiveOut:
    h, z = enc.encode(np.asarray(x)[None], np.asarray(u, dtype=np.float64).reshape(1, 2))
    return ExpensiveOut(h[0], float(z[0]))


def student_forward(enc: Encoder, x, u) -> CheapSignals:
    h, z = enc.encode(np.asarray(x)[None], np.asarray(u, dtype=np.float64).reshape(1, 2))
    return CheapSignals(h[0], float(z[0]))


class Projection:
    """Linear map from student embeddings to teacher width (feature matching)."""

    def __init__(self, d_in: int, d_out: int, rng: nc.RngState | int = 0):
        if isinstance(rng, int):
            rng = nc.RngState(rng)
        g = rng.child("projection").generator()
        self.params = {
            "w": nc.parameter(uniform_init(g, (d_in, d_out), d_in), "w"),
            "b": nc.parameter(np.zeros(d_out), "b"),
        }

    def __call__(self, h: Tensor) -> Tensor:
        return h @ self.params["w"] + self.params["b"]

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64)
