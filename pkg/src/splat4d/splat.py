"""Canonical surfel map: primitive storage, insertion, pruning, checkpointing.

Each primitive is a planar elliptical Gaussian ("surfel") with an explicit
orthonormal tangent frame [t_u, t_v, t_w]; t_w is the surface normal. Scales,
colors, and opacity are stored in unconstrained (log / logit) space and
activated on use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCheckpoint, EmptyInsertion
from .geometry import PinholeCamera, SE3Pose, transform_point

CHECKPOINT_MAGIC = b"S4D1"
FLOATS_PER_PRIMITIVE = 18  # mean 3 + frame 9 + scale_log 2 + color_logit 3 + opacity_logit 1

SCALE_MIN = 1e-6
SCALE_MAX = 10.0


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-7, 1.0 - 1e-7)
    return np.log(p / (1.0 - p))


def clamp_scale_log(scale_log):
    return np.clip(scale_log, np.log(SCALE_MIN), np.log(SCALE_MAX))


@dataclass
class Gaussian2D:
    """One surfel: world-space mean, tangent frame, and activated-on-use params."""

    mean: np.ndarray
    frame: np.ndarray  # columns [t_u, t_v, t_w], orthonormal
    scale_log: np.ndarray
    color_logit: np.ndarray
    opacity_logit: float
    birth_keyframe: int = 0


def build_transform(g: Gaussian2D) -> np.ndarray:
    """4x4 map H sending tangent-plane (u, v, 1, 1) to the world-space point.

    Columns are (s_u*t_u, s_v*t_v, 0, mean) over a (0, 0, 0, 1) bottom row,
    so H @ (u, v, 1, 1) = mean + s_u*t_u*u + s_v*t_v*v.
    """
    s = np.exp(np.asarray(g.scale_log, dtype=float))
    H = np.zeros((4, 4))
    H[:3, 0] = s[0] * g.frame[:, 0]
    H[:3, 1] = s[1] * g.frame[:, 1]
    H[:3, 3] = g.mean
    H[3, 3] = 1.0
    return H


def build_transforms(means, frames, scale_log) -> np.ndarray:
    """Vectorized build_transform over (N, ...) primitive arrays."""
    n = means.shape[0]
    s = np.exp(scale_log)
    H = np.zeros((n, 4, 4))
    H[:, :3, 0] = s[:, 0:1] * frames[:, :, 0]
    H[:, :3, 1] = s[:, 1:2] * frames[:, :, 1]
    H[:, :3, 3] = means
    H[:, 3, 3] = 1.0
    return H


@dataclass
class NormalMap:
    """Per-pixel camera-frame unit normals with a validity mask."""

    vectors: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


def normals_from_depth(depth: np.ndarray, cam: PinholeCamera) -> NormalMap:
    """Sensor normals from central differences of back-projected depth points.

    n = cross(dp/dx, dp/dy), unit-normalized and oriented to face the camera
    (n . view_ray < 0). Pixels adjacent to invalid (zero) depth, and border
    pixels, are flagged invalid.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    pts = cam.backproject_grid(depth)
    valid_d = depth > 0

    vectors = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(vectors, valid)

    dpdx = 0.5 * (pts[1:-1, 2:] - pts[1:-1, :-2])
    dpdy = 0.5 * (pts[2:, 1:-1] - pts[:-2, 1:-1])
    n = np.cross(dpdx, dpdy)
    norm = np.linalg.norm(n, axis=-1)

    ok = (
        valid_d[1:-1, 1:-1]
        & valid_d[1:-1, 2:]
        & valid_d[1:-1, :-2]
        & valid_d[2:, 1:-1]
        & valid_d[:-2, 1:-1]
        & (norm > 1e-12)
    )
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    # Flip so normals face the camera.
    facing_away = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n = np.where(facing_away[..., None], -n, n)

    vectors[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return NormalMap(vectors, valid)


class GaussianMap:
    """Growable SoA store of surfels plus insert/prune bookkeeping."""

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.frames = np.zeros((0, 3, 3))
        self.scale_log = np.zeros((0, 2))
        self.color_logit = np.zeros((0, 3))
        self.opacity_logit = np.zeros(0)
        self.birth_keyframe = np.zeros(0, dtype=np.int32)
        self.unseen_epochs = np.zeros(0, dtype=np.int32)
        self.generation = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    def append(self, means, frames, scale_log, color_logit, opacity_logit, birth):
        n = means.shape[0]
        self.means = np.concatenate([self.means, means])
        self.frames = np.concatenate([self.frames, frames])
        self.scale_log = np.concatenate([self.scale_log, clamp_scale_log(scale_log)])
        self.color_logit = np.concatenate([self.color_logit, color_logit])
        self.opacity_logit = np.concatenate([self.opacity_logit, opacity_logit])
        self.birth_keyframe = np.concatenate(
            [self.birth_keyframe, np.full(n, birth, dtype=np.int32)]
        )
        self.unseen_epochs = np.concatenate([self.unseen_epochs, np.zeros(n, dtype=np.int32)])
        self.generation += 1

    def primitive(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            mean=self.means[i].copy(),
            frame=self.frames[i].copy(),
            scale_log=self.scale_log[i].copy(),
            color_logit=self.color_logit[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            birth_keyframe=int(self.birth_keyframe[i]),
        )

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def reorthonormalize(self):
        """Project frames back onto SO(3), keeping t_w = t_u x t_v exact."""
        tu = self.frames[:, :, 0]
        tu = tu / np.linalg.norm(tu, axis=1, keepdims=True)
        tv = self.frames[:, :, 1]
        tv = tv - np.sum(tv * tu, axis=1, keepdims=True) * tu
        tv = tv / np.linalg.norm(tv, axis=1, keepdims=True)
        tw = np.cross(tu, tv)
        self.frames = np.stack([tu, tv, tw], axis=2)

    def quantize_to_f32(self):
        """Round state to float32 values (the checkpoint precision boundary)."""
        for name in ("means", "frames", "scale_log", "color_logit", "opacity_logit"):
            setattr(self, name, getattr(self, name).astype(np.float32).astype(np.float64))


def insert_from_rgbd(
    gmap: GaussianMap,
    cam: PinholeCamera,
    color: np.ndarray,
    depth: np.ndarray,
    normal_map: NormalMap,
    pose_cw: SE3Pose,
    mask: np.ndarray,
    stride: int = 4,
    birth_index: int = 0,
    opacity_init: float = 0.7,
) -> int:
    """Back-project masked pixels into new world-space surfels.

    Normals come from the sensor normal map (rotated to world and used as
    t_w); scale is an isotropic pixel-footprint heuristic; returns the number
    of primitives inserted. Raises EmptyInsertion if no masked pixel is valid.
    """
    h, w = depth.shape
    gy, gx = np.mgrid[0:h, 0:w]
    off = stride // 2  # centered grid keeps subsampled pixels off the border
    keep = (
        np.asarray(mask, dtype=bool)
        & (depth > 0)
        & (gy % stride == off)
        & (gx % stride == off)
    )
    ys, xs = np.nonzero(keep)
    if ys.size == 0:
        raise EmptyInsertion("no valid masked pixels to insert")

    pts_cam = cam.backproject_grid(depth)[ys, xs]
    T_wc = pose_cw.inverse()
    means = transform_point(T_wc, pts_cam)
    # Sensor normal where available, anti-view-ray fallback elsewhere.
    n_cam = normal_map.vectors[ys, xs].copy()
    no_normal = ~normal_map.valid[ys, xs]
    n_cam[no_normal] = -pts_cam[no_normal] / np.linalg.norm(
        pts_cam[no_normal], axis=1, keepdims=True
    )
    t_w = n_cam @ T_wc.rotation.T

    # Deterministic tangent completion around t_w.
    a = np.tile(np.array([1.0, 0.0, 0.0]), (len(ys), 1))
    use_ey = np.abs(t_w[:, 0]) > 0.9
    a[use_ey] = np.array([0.0, 1.0, 0.0])
    t_u = np.cross(a, t_w)
    t_u = t_u / np.linalg.norm(t_u, axis=1, keepdims=True)
    t_v = np.cross(t_w, t_u)
    frames = np.stack([t_u, t_v, t_w], axis=2)

    scale = 0.5 * (depth[ys, xs] / cam.fx) * stride
    scale_log = clamp_scale_log(np.log(np.stack([scale, scale], axis=1)))
    color_logit = logit(color[ys, xs])
    opacity_logit = np.full(len(ys), float(logit(opacity_init)))

    gmap.append(means, frames, scale_log, color_logit, opacity_logit, birth_index)
    return len(ys)


class MapStats:
    """Per-primitive accumulators feeding prune/densify decisions."""

    def __init__(self, n: int = 0):
        self.pos_grad_sum = np.zeros(n)
        self.steps = 0
        self.seen = np.zeros(n, dtype=bool)

    def ensure_rows(self, n: int):
        if n > self.pos_grad_sum.shape[0]:
            extra = n - self.pos_grad_sum.shape[0]
            self.pos_grad_sum = np.concatenate([self.pos_grad_sum, np.zeros(extra)])
            self.seen = np.concatenate([self.seen, np.zeros(extra, dtype=bool)])

    def accumulate(self, mean_grads: np.ndarray, visible: np.ndarray):
        self.ensure_rows(mean_grads.shape[0])
        self.pos_grad_sum += np.linalg.norm(mean_grads, axis=1)
        self.seen |= visible
        self.steps += 1

    def mean_grad(self) -> np.ndarray:
        return self.pos_grad_sum / max(self.steps, 1)

    def reset(self, n: int):
        self.__init__(n)


@dataclass
class PruneResult:
    pruned: int
    cloned: int
    split: int
    # Maps new primitive rows to the old row they came from; -1 for children
    # created by clone/split (their optimizer state starts fresh).
    index_map: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def prune_and_densify(
    gmap: GaussianMap,
    stats: MapStats,
    opacity_threshold: float = 0.05,
    unseen_epochs_limit: int = 3,
    grad_threshold: float = 2e-4,
    split_scale: float = 0.1,
    split_scale_shrink: float = 1.6,
) -> PruneResult:
    """One management pass: prune transparent/stale surfels, clone/split busy ones.

    Split when the largest activated scale exceeds `split_scale` (children
    placed at mean +- 0.5 s_u t_u with scale_log reduced by log(shrink)),
    clone otherwise. Resets the accumulators.
    """
    n = len(gmap)
    if n == 0:
        stats.reset(0)
        return PruneResult(0, 0, 0, np.zeros(0, dtype=np.int64))
    stats.ensure_rows(n)

    gmap.unseen_epochs = np.where(stats.seen[:n], 0, gmap.unseen_epochs + 1)
    prune_mask = (gmap.opacities() < opacity_threshold) | (
        gmap.unseen_epochs >= unseen_epochs_limit
    )

    grad = stats.mean_grad()[:n]
    busy = (~prune_mask) & (grad > grad_threshold) & (stats.steps > 0)
    max_scale = np.exp(gmap.scale_log).max(axis=1)
    split_mask = busy & (max_scale > split_scale)
    clone_mask = busy & ~split_mask

    keep_mask = (~prune_mask) & (~split_mask)
    keep_idx = np.nonzero(keep_mask)[0]
    clone_idx = np.nonzero(clone_mask)[0]
    split_idx = np.nonzero(split_mask)[0]

    def gather(idx):
        return (
            gmap.means[idx],
            gmap.frames[idx],
            gmap.scale_log[idx],
            gmap.color_logit[idx],
            gmap.opacity_logit[idx],
            gmap.birth_keyframe[idx],
            gmap.unseen_epochs[idx],
        )

    parts = [gather(keep_idx), gather(clone_idx)]
    maps = [keep_idx, np.full(len(clone_idx), -1, dtype=np.int64)]

    if len(split_idx) > 0:
        m, f, s, c, o, b, u = gather(split_idx)
        su = np.exp(s[:, 0])
        offset = 0.5 * su[:, None] * f[:, :, 0]
        s_child = clamp_scale_log(s - np.log(split_scale_shrink))
        for sign in (1.0, -1.0):
            parts.append((m + sign * offset, f, s_child, c, o, b, np.zeros_like(u)))
            maps.append(np.full(len(split_idx), -1, dtype=np.int64))

    gmap.means = np.concatenate([p[0] for p in parts])
    gmap.frames = np.concatenate([p[1] for p in parts])
    gmap.scale_log = np.concatenate([p[2] for p in parts])
    gmap.color_logit = np.concatenate([p[3] for p in parts])
    gmap.opacity_logit = np.concatenate([p[4] for p in parts])
    gmap.birth_keyframe = np.concatenate([p[5] for p in parts])
    gmap.unseen_epochs = np.concatenate([p[6] for p in parts])
    gmap.generation += 1

    stats.reset(len(gmap))
    return PruneResult(
        pruned=int(prune_mask.sum()),
        cloned=len(clone_idx),
        split=len(split_idx),
        index_map=np.concatenate(maps) if maps else np.zeros(0, dtype=np.int64),
    )


def write_map_block(gmap: GaussianMap) -> bytes:
    """Serialize the primitive block: magic, u64 count, 18 f32 per primitive."""
    n = len(gmap)
    body = np.empty((n, FLOATS_PER_PRIMITIVE), dtype="<f4")
    body[:, 0:3] = gmap.means
    body[:, 3:12] = gmap.frames.reshape(n, 9)
    body[:, 12:14] = gmap.scale_log
    body[:, 14:17] = gmap.color_logit
    body[:, 17] = gmap.opacity_logit
    return CHECKPOINT_MAGIC + struct.pack("<Q", n) + body.tobytes()


def read_map_block(buf: bytes, offset: int = 0) -> tuple[GaussianMap, int]:
    """Parse a primitive block; returns (map, next offset)."""
    if len(buf) - offset < 12:
        raise CorruptCheckpoint("truncated header")
    if buf[offset : offset + 4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"bad magic {buf[offset:offset + 4]!r}")
    (n,) = struct.unpack_from("<Q", buf, offset + 4)
    start = offset + 12
    nbytes = n * FLOATS_PER_PRIMITIVE * 4
    if len(buf) - start < nbytes:
        raise CorruptCheckpoint("truncated primitive block")
    body = np.frombuffer(buf[start : start + nbytes], dtype="<f4").reshape(
        n, FLOATS_PER_PRIMITIVE
    )
    gmap = GaussianMap()
    gmap.means = body[:, 0:3].astype(np.float64)
    gmap.frames = body[:, 3:12].astype(np.float64).reshape(n, 3, 3)
    gmap.scale_log = body[:, 12:14].astype(np.float64)
    gmap.color_logit = body[:, 14:17].astype(np.float64)
    gmap.opacity_logit = body[:, 17].astype(np.float64)
    gmap.birth_keyframe = np.zeros(n, dtype=np.int32)
    gmap.unseen_epochs = np.zeros(n, dtype=np.int32)
    return gmap, start + nbytes
