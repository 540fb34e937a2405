"""Deformation model: frequency encoding + a small MLP, with manual backprop.

The field maps (encoded canonical mean, encoded time) to per-primitive
offsets (dx, dr, ds): a translation of the mean, an so(3) tangent applied to
the tangent frame by exponential retraction, and a log-scale offset. With the
final layer zero-initialized the field is exactly the identity warp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCheckpoint, MissingActivations
from .geometry import so3_exp_batch, so3_right_jacobian_batch

OUTPUT_DIM = 8  # dx (3) + dr (3) + ds (2)


@dataclass
class EncodingConfig:
    """NeRF-style frequency counts for position and time."""

    position_frequencies: int = 4
    time_frequencies: int = 1

    @property
    def encoded_dim(self) -> int:
        return 3 + 6 * self.position_frequencies + 1 + 2 * self.time_frequencies


def encode(x: np.ndarray, t: float, cfg: EncodingConfig) -> np.ndarray:
    """Features [x, sin/cos(2^j pi x), t, sin/cos(2^j pi t)] per row."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    parts = [x]
    for j in range(cfg.position_frequencies):
        w = (2.0**j) * np.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    parts.append(np.full((n, 1), float(t)))
    for j in range(cfg.time_frequencies):
        w = (2.0**j) * np.pi
        parts.append(np.full((n, 1), np.sin(w * t)))
        parts.append(np.full((n, 1), np.cos(w * t)))
    return np.concatenate(parts, axis=1)


def _encode_backward(x: np.ndarray, cfg: EncodingConfig, dfeat: np.ndarray) -> np.ndarray:
    """dL/dx through the positional part of the encoding."""
    dx = dfeat[:, 0:3].copy()
    col = 3
    for j in range(cfg.position_frequencies):
        w = (2.0**j) * np.pi
        dx += dfeat[:, col : col + 3] * w * np.cos(w * x)
        col += 3
        dx += dfeat[:, col : col + 3] * (-w) * np.sin(w * x)
        col += 3
    return dx


class WarpField:
    """Dense ReLU MLP emitting (dx, dr, ds) from encoded (position, time)."""

    def __init__(self, cfg: EncodingConfig, hidden_layers: int = 4, width: int = 64,
                 seed: int = 0, zero_head: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dims = [cfg.encoded_dim] + [width] * hidden_layers + [OUTPUT_DIM]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            if i == len(dims) - 2 and zero_head:
                W = np.zeros((dims[i + 1], fan_in))
            else:
                bound = np.sqrt(6.0 / fan_in)
                W = rng.uniform(-bound, bound, size=(dims[i + 1], fan_in))
            self.weights.append(W)
            self.biases.append(np.zeros(dims[i + 1]))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, t: float):
        """Offsets (N, 8) plus the activation cache for backward."""
        feat = encode(x, t, self.cfg)
        h = feat
        pre_acts = []
        posts = [feat]
        for i in range(self.n_layers - 1):
            z = h @ self.weights[i].T + self.biases[i]
            pre_acts.append(z)
            h = np.maximum(z, 0.0)
            posts.append(h)
        out = h @ self.weights[-1].T + self.biases[-1]
        cache = {"x": np.atleast_2d(x).copy(), "t": float(t), "pre": pre_acts, "post": posts}
        return out, cache

    def backward(self, cache, dout: np.ndarray):
        """Reverse-mode through the stack: (dW list, db list, dL/dx)."""
        if cache is None or "post" not in cache:
            raise MissingActivations("warp backward needs the forward cache")
        posts, pre_acts = cache["post"], cache["pre"]
        if dout.shape[0] != posts[0].shape[0]:
            raise MissingActivations("cache row count does not match upstream")
        dW = [None] * self.n_layers
        db = [None] * self.n_layers
        g = dout
        dW[-1] = g.T @ posts[-1]
        db[-1] = g.sum(axis=0)
        g = g @ self.weights[-1]
        for i in range(self.n_layers - 2, -1, -1):
            g = g * (pre_acts[i] > 0.0)
            dW[i] = g.T @ posts[i]
            db[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        dx = _encode_backward(cache["x"], self.cfg, g)
        return dW, db, dx

    def quantize_to_f32(self):
        self.weights = [w.astype(np.float32).astype(np.float64) for w in self.weights]
        self.biases = [b.astype(np.float32).astype(np.float64) for b in self.biases]


@dataclass
class DeformedSnapshot:
    """Canonical primitives pushed to time t; colors/opacities shared."""

    means: np.ndarray
    frames: np.ndarray
    scale_log: np.ndarray
    color_logit: np.ndarray
    opacity_logit: np.ndarray
    t: float
    delta_r: np.ndarray = field(repr=False, default=None)


@dataclass
class WarpCache:
    mlp: dict
    delta_r: np.ndarray
    canonical_frames: np.ndarray
    n: int


def warp_forward(fieldnet: WarpField, snapshot, t: float):
    """Apply the field at time t: (DeformedSnapshot, WarpCache)."""
    n = snapshot.means.shape[0]
    if n == 0:
        deformed = DeformedSnapshot(
            means=snapshot.means.copy(),
            frames=snapshot.frames.copy(),
            scale_log=snapshot.scale_log.copy(),
            color_logit=snapshot.color_logit,
            opacity_logit=snapshot.opacity_logit,
            t=t,
            delta_r=np.zeros((0, 3)),
        )
        return deformed, WarpCache(mlp=None, delta_r=np.zeros((0, 3)),
                                   canonical_frames=snapshot.frames.copy(), n=0)
    out, mlp_cache = fieldnet.forward(snapshot.means, t)
    dx, dr, ds = out[:, 0:3], out[:, 3:6], out[:, 6:8]
    frames = np.einsum("nij,njk->nik", so3_exp_batch(dr), snapshot.frames)
    deformed = DeformedSnapshot(
        means=snapshot.means + dx,
        frames=frames,
        scale_log=snapshot.scale_log + ds,
        color_logit=snapshot.color_logit,
        opacity_logit=snapshot.opacity_logit,
        t=t,
        delta_r=dr,
    )
    return deformed, WarpCache(mlp=mlp_cache, delta_r=dr,
                               canonical_frames=snapshot.frames, n=n)


@dataclass
class WarpGradients:
    weight_grads: list
    bias_grads: list
    mean: np.ndarray  # dL/d(canonical means): identity + encoding paths
    frame: np.ndarray  # dL/d(canonical frame tangent)
    scale_log: np.ndarray
    delta: np.ndarray  # dL/d(dx, dr, ds), for diagnostics


def warp_backward(fieldnet: WarpField, cache: WarpCache,
                  d_mean: np.ndarray, d_frame_tangent: np.ndarray, d_scale: np.ndarray):
    """Pull deformed-state gradients back to weights and canonical params.

    The deformed frame is R' = Exp(dr) @ R, and `d_frame_tangent` is the
    gradient w.r.t. a right-multiplied tangent of R'. A canonical tangent
    passes through unchanged; dr picks up the right Jacobian:
    dL/ddr = Jr(dr)^T R dL/domega'.
    """
    if cache is None:
        raise MissingActivations("warp backward needs the forward cache")
    if cache.n == 0:
        return WarpGradients(
            weight_grads=[np.zeros_like(w) for w in fieldnet.weights],
            bias_grads=[np.zeros_like(b) for b in fieldnet.biases],
            mean=np.zeros((0, 3)),
            frame=np.zeros((0, 3)),
            scale_log=np.zeros((0, 2)),
            delta=np.zeros((0, OUTPUT_DIM)),
        )
    if d_mean.shape[0] != cache.n:
        raise MissingActivations("upstream rows do not match cached forward")

    Jr = so3_right_jacobian_batch(cache.delta_r)
    y = np.einsum("nij,nj->ni", cache.canonical_frames, d_frame_tangent)
    d_dr = np.einsum("nji,nj->ni", Jr, y)

    dout = np.concatenate([d_mean, d_dr, d_scale], axis=1)
    dW, db, dx_enc = fieldnet.backward(cache.mlp, dout)
    return WarpGradients(
        weight_grads=dW,
        bias_grads=db,
        mean=d_mean + dx_enc,
        frame=d_frame_tangent.copy(),
        scale_log=d_scale.copy(),
        delta=dout,
    )


def write_warp_block(fieldnet: WarpField) -> bytes:
    """Serialize encoding config and layer stack (row-major f32)."""
    out = [struct.pack("<III", fieldnet.cfg.position_frequencies,
                       fieldnet.cfg.time_frequencies, fieldnet.n_layers)]
    for W, b in zip(fieldnet.weights, fieldnet.biases):
        out.append(struct.pack("<II", W.shape[0], W.shape[1]))
        out.append(W.astype("<f4").tobytes())
        out.append(b.astype("<f4").tobytes())
    return b"".join(out)


def read_warp_block(buf: bytes, offset: int = 0):
    """Parse a warp block; returns (WarpField, next offset)."""
    try:
        lx, lt, n_layers = struct.unpack_from("<III", buf, offset)
    except struct.error as e:
        raise CorruptCheckpoint("truncated warp header") from e
    offset += 12
    cfg = EncodingConfig(position_frequencies=lx, time_frequencies=lt)
    weights, biases = [], []
    for _ in range(n_layers):
        try:
            rows, cols = struct.unpack_from("<II", buf, offset)
        except struct.error as e:
            raise CorruptCheckpoint("truncated warp layer header") from e
        offset += 8
        need = rows * cols * 4 + rows * 4
        if len(buf) - offset < need:
            raise CorruptCheckpoint("truncated warp layer data")
        W = np.frombuffer(buf[offset : offset + rows * cols * 4], dtype="<f4")
        offset += rows * cols * 4
        b = np.frombuffer(buf[offset : offset + rows * 4], dtype="<f4")
        offset += rows * 4
        weights.append(W.astype(np.float64).reshape(rows, cols))
        biases.append(b.astype(np.float64))

    if not weights or weights[0].shape[1] != cfg.encoded_dim or weights[-1].shape[0] != OUTPUT_DIM:
        raise CorruptCheckpoint("warp block dimensions inconsistent")
    fieldnet = WarpField.__new__(WarpField)
    fieldnet.cfg = cfg
    fieldnet.weights = weights
    fieldnet.biases = biases
    return fieldnet, offset


def make_field(preset: str, cfg_override=None, seed: int = 0) -> WarpField:
    """Named architectures: `small` (tests) and `paper` (full-scale)."""
    if preset == "small":
        cfg = cfg_override or EncodingConfig(position_frequencies=4, time_frequencies=1)
        return WarpField(cfg, hidden_layers=4, width=64, seed=seed)
    if preset == "paper":
        cfg = cfg_override or EncodingConfig(position_frequencies=4, time_frequencies=1)
        return WarpField(cfg, hidden_layers=8, width=256, seed=seed)
    raise ValueError(f"unknown warp preset {preset!r}")
