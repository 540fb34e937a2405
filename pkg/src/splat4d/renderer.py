"""Forward rasterization of surfel maps: binning, sorting, compositing.

The snapshot argument of `render` is anything exposing `means`, `frames`,
`scale_log`, `color_logit`, `opacity_logit` arrays (a GaussianMap, or a
DeformedSnapshot produced by the warp field).

Per pixel, splats are composited front to back:
    c(x) = sum_i c_i a_i G_i prod_{j<i} (1 - a_j G_j)
with the depth buffer accumulating the ray-splat intersection depth and the
normal buffer the camera-frame surfel normals, both alpha-normalized after
the sum. Compositing terminates once transmittance drops below 1e-4, and
contributions with a_i G_i < 1/255 are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .geometry import PinholeCamera, SE3Pose, transform_point
from .splat import Gaussian2D, build_transform, build_transforms, sigmoid

TILE_SIZE = 16
ALPHA_NORM_EPS = 1e-3
BBOX_SIGMA = 3.45  # 1/255 response cutoff is 3.33 sigma; slack for perspective
BBOX_FLOOR_PX = 2.4  # screen-floor response support (3.33 * 0.707 px)
BBOX_GUARD_PX = 0.55


def eval_gaussian(u: float, v: float) -> float:
    """Splat response in tangent-plane coordinates: exp(-(u^2 + v^2) / 2)."""
    return float(np.exp(-0.5 * (u * u + v * v)))


def screen_projection(cam: PinholeCamera) -> np.ndarray:
    """4x4 camera-space -> screen map producing (x_px*z, y_px*z, z, z).

    The homogeneous coordinate carries depth so that the transformed planes
    h_x = (-1, 0, 0, px), h_y = (0, -1, 0, py) cut out the pixel ray for any
    depth. (Intentionally rank-3; nothing inverts it.)
    """
    K = cam.intrinsic4()
    K[3, :] = K[2, :]
    return K


def ray_splat_intersect(g: Gaussian2D, pose: SE3Pose, cam: PinholeCamera, pixel):
    """Tangent-plane coordinates where the pixel ray meets the splat plane.

    Scalar reference implementation of the two-plane solve; returns (u, v)
    or None when the splat is edge-on (|denominator| < 1e-12) or the
    intersection is at or behind the near plane.
    """
    W = screen_projection(cam) @ pose.as_matrix()
    M = W @ build_transform(g)
    px, py = float(pixel[0]), float(pixel[1])
    h_u = M.T @ np.array([-1.0, 0.0, 0.0, px])
    h_v = M.T @ np.array([0.0, -1.0, 0.0, py])
    denom = h_u[0] * h_v[1] - h_u[1] * h_v[0]
    if abs(denom) < _kernels.EDGE_ON_EPS:
        return None
    u = (h_u[1] * h_v[3] - h_u[3] * h_v[1]) / denom
    v = (h_u[3] * h_v[0] - h_u[0] * h_v[3]) / denom
    z = M[2, 0] * u + M[2, 1] * v + M[2, 2] + M[2, 3]
    if z <= cam.near:
        return None
    return u, v


@dataclass
class SplatBin:
    """Per-tile contributor lists, depth-sorted within each tile."""

    tile_offsets: np.ndarray  # (n_tiles + 1,) int64
    entries: np.ndarray  # (total,) int32, rows of the culled/sorted arrays
    keys: np.ndarray  # (total,) mean camera depth per entry
    prim_orig: np.ndarray  # (K,) culled row -> original primitive index
    tiles_x: int
    tiles_y: int
    tile: int

    def tile_entries(self, tx: int, ty: int):
        """(original indices, depth keys) for one tile."""
        t = ty * self.tiles_x + tx
        sl = slice(self.tile_offsets[t], self.tile_offsets[t + 1])
        return self.prim_orig[self.entries[sl]], self.keys[sl]


@dataclass
class PreparedScene:
    """Culled, depth-sorted per-primitive quantities for one render pass."""

    prim_orig: np.ndarray  # (K,)
    M: np.ndarray  # (K, 4, 4) = W @ H
    coef: np.ndarray  # (K, 11) packed kernel coefficients of M
    zc: np.ndarray  # (K,) constant depth term
    radius2: np.ndarray  # (K,) squared conservative screen radius
    H: np.ndarray  # (K, 4, 4)
    W: np.ndarray  # (4, 4)
    mu: np.ndarray  # (K, 2) projected means
    p_cam: np.ndarray  # (K, 3)
    alpha: np.ndarray  # (K,) activated opacity
    color: np.ndarray  # (K, 3) activated color
    n_cam: np.ndarray  # (K, 3) camera-frame normals
    bbox: np.ndarray  # (K, 4) int32 [x0, y0, x1, y1)
    frames: np.ndarray  # (K, 3, 3)
    scales: np.ndarray  # (K, 2) activated
    bins: SplatBin


def _prepare(snapshot, pose: SE3Pose, cam: PinholeCamera, tile: int) -> Optional[PreparedScene]:
    n = snapshot.means.shape[0]
    if n == 0:
        return None
    p_cam = transform_point(pose, snapshot.means)
    z = p_cam[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    if not keep.any():
        return None
    idx = np.nonzero(keep)[0]
    p_cam = p_cam[idx]
    z = z[idx]
    mu = cam.project(p_cam)

    scales = np.exp(snapshot.scale_log[idx])
    frames = snapshot.frames[idx]
    means = snapshot.means[idx]

    # Conservative screen radius: the projected tangent disc u^2 + v^2 <= r^2
    # maps (to first order) through A = [a_px, b_px]; its screen extent is
    # r * sigma_max(A), with sigma_max from the closed-form 2x2 eigenvalue.
    # Endpoints behind the camera fall back to the image diagonal (the bbox
    # clips to the image anyway).
    img_diag = float(np.hypot(cam.width, cam.height))
    n_cull = len(idx)
    axis_px = np.zeros((n_cull, 2, 2))  # projected axis vectors as columns
    degenerate = np.zeros(n_cull, dtype=bool)
    for ax in (0, 1):
        axis_vec = scales[:, ax : ax + 1] * frames[:, :, ax]
        offs = np.zeros((2, n_cull, 2))
        for si, sign in enumerate((1.0, -1.0)):
            end = transform_point(pose, means + sign * axis_vec)
            safe = end[:, 2] > 1e-6
            degenerate |= ~safe
            if safe.any():
                offs[si, safe] = cam.project(end[safe]) - mu[safe]
        pick = np.argmax(np.linalg.norm(offs, axis=2), axis=0)
        axis_px[:, :, ax] = offs[pick, np.arange(n_cull)]
    lu2 = np.sum(axis_px[:, :, 0] ** 2, axis=1)
    lv2 = np.sum(axis_px[:, :, 1] ** 2, axis=1)
    ab = np.sum(axis_px[:, :, 0] * axis_px[:, :, 1], axis=1)
    sigma_max = np.sqrt(0.5 * (lu2 + lv2 + np.sqrt((lu2 - lv2) ** 2 + 4.0 * ab * ab)))
    radius = np.maximum(BBOX_SIGMA * sigma_max, BBOX_FLOOR_PX) + BBOX_GUARD_PX
    radius[degenerate] = img_diag

    x0 = np.clip(np.floor(mu[:, 0] - radius), 0, cam.width).astype(np.int32)
    x1 = np.clip(np.ceil(mu[:, 0] + radius), 0, cam.width).astype(np.int32)
    y0 = np.clip(np.floor(mu[:, 1] - radius), 0, cam.height).astype(np.int32)
    y1 = np.clip(np.ceil(mu[:, 1] + radius), 0, cam.height).astype(np.int32)
    on_screen = (x1 > x0) & (y1 > y0)
    if not on_screen.any():
        return None

    idx = idx[on_screen]
    order = np.argsort(z[on_screen], kind="stable")
    sel = np.nonzero(on_screen)[0][order]

    prim_orig = idx[order].astype(np.int64)
    p_cam = p_cam[sel]
    mu = mu[sel]
    z = z[sel]
    bbox = np.stack([x0[sel], y0[sel], x1[sel], y1[sel]], axis=1).astype(np.int32)
    radius2_sorted = (radius[sel] ** 2)
    means = snapshot.means[prim_orig]
    frames = snapshot.frames[prim_orig]
    scales = np.exp(snapshot.scale_log[prim_orig])

    H = build_transforms(means, frames, snapshot.scale_log[prim_orig])
    W = screen_projection(cam) @ pose.as_matrix()
    M = np.einsum("ab,kbc->kac", W, H)

    alpha = sigmoid(snapshot.opacity_logit[prim_orig])
    color = sigmoid(snapshot.color_logit[prim_orig])
    n_cam = frames[:, :, 2] @ pose.rotation.T

    # Tile bins: rectangular tile ranges, filled in depth order.
    tiles_x = (cam.width + tile - 1) // tile
    tiles_y = (cam.height + tile - 1) // tile
    tx0 = bbox[:, 0] // tile
    tx1 = (bbox[:, 2] - 1) // tile
    ty0 = bbox[:, 1] // tile
    ty1 = (bbox[:, 3] - 1) // tile
    nx = (tx1 - tx0 + 1).astype(np.int64)
    ny = (ty1 - ty0 + 1).astype(np.int64)
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(prim_orig), dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - starts[owner]
    lx = local % nx[owner]
    ly = local // nx[owner]
    tile_id = (ty0[owner] + ly) * tiles_x + (tx0[owner] + lx)
    by_tile = np.argsort(tile_id, kind="stable")
    entries = owner[by_tile].astype(np.int32)
    tile_counts = np.bincount(tile_id, minlength=tiles_x * tiles_y)
    tile_offsets = np.concatenate([[0], np.cumsum(tile_counts)]).astype(np.int64)

    bins = SplatBin(
        tile_offsets=tile_offsets,
        entries=entries,
        keys=z[entries],
        prim_orig=prim_orig,
        tiles_x=tiles_x,
        tiles_y=tiles_y,
        tile=tile,
    )
    coef, zc = _kernels.pack_coefficients(M)
    return PreparedScene(
        prim_orig=prim_orig,
        M=np.ascontiguousarray(M),
        coef=coef,
        zc=zc,
        radius2=np.ascontiguousarray(radius2_sorted),
        H=H,
        W=W,
        mu=np.ascontiguousarray(mu),
        p_cam=p_cam,
        alpha=np.ascontiguousarray(alpha),
        color=np.ascontiguousarray(color),
        n_cam=np.ascontiguousarray(n_cam),
        bbox=bbox,
        frames=frames,
        scales=scales,
        bins=bins,
    )


def bin_and_sort(snapshot, pose: SE3Pose, cam: PinholeCamera, tile: int = TILE_SIZE) -> SplatBin:
    """Frustum-cull, depth-sort, and bin the snapshot's primitives by tile."""
    prep = _prepare(snapshot, pose, cam, tile)
    if prep is None:
        tiles_x = (cam.width + tile - 1) // tile
        tiles_y = (cam.height + tile - 1) // tile
        return SplatBin(
            tile_offsets=np.zeros(tiles_x * tiles_y + 1, dtype=np.int64),
            entries=np.zeros(0, dtype=np.int32),
            keys=np.zeros(0),
            prim_orig=np.zeros(0, dtype=np.int64),
            tiles_x=tiles_x,
            tiles_y=tiles_y,
            tile=tile,
        )
    return prep.bins


@dataclass
class ForwardRecord:
    """Everything the backward pass needs to replay one render."""

    scene: PreparedScene
    pose: SE3Pose
    cam: PinholeCamera
    n_primitives: int
    offsets: np.ndarray  # (H*W + 1,) int64 contributor CSR
    prim: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    g_int: np.ndarray
    g_scr: np.ndarray
    color_logit: np.ndarray  # snapshot views, for activation derivatives
    opacity_logit: np.ndarray


@dataclass
class RenderBuffers:
    """Outputs of one forward pass; raw sums retained for the backward pass."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-normalized intersection depth
    normal: np.ndarray  # (H, W, 3), unit where valid
    normal_valid: np.ndarray  # (H, W) bool
    alpha: np.ndarray  # (H, W)
    contrib_count: np.ndarray  # (H, W) int32
    depth_raw: np.ndarray = field(repr=False, default=None)
    normal_raw: np.ndarray = field(repr=False, default=None)
    t_final: np.ndarray = field(repr=False, default=None)
    record: Optional[ForwardRecord] = field(repr=False, default=None)


def _empty_buffers(cam: PinholeCamera) -> RenderBuffers:
    h, w = cam.height, cam.width
    return RenderBuffers(
        color=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        normal_valid=np.zeros((h, w), dtype=bool),
        alpha=np.zeros((h, w)),
        contrib_count=np.zeros((h, w), dtype=np.int32),
        depth_raw=np.zeros((h, w)),
        normal_raw=np.zeros((h, w, 3)),
        t_final=np.ones((h, w)),
    )


def render(
    snapshot,
    pose: SE3Pose,
    cam: PinholeCamera,
    record=False,
    tile: int = TILE_SIZE,
) -> RenderBuffers:
    """Rasterize the snapshot from T_CW `pose`. Background is black.

    With record=True the per-pixel contributor lists are retained on
    `buffers.record` for `gradients.backward_render`; record="replay" keeps
    only the prepared scene, and the backward pass re-derives contributors
    from the tile bins (same result, no contributor storage).
    """
    prep = _prepare(snapshot, pose, cam, tile)
    buffers = _empty_buffers(cam)
    if prep is None:
        if record:
            buffers.record = ForwardRecord(
                scene=None,
                pose=pose,
                cam=cam,
                n_primitives=snapshot.means.shape[0],
                offsets=np.zeros(cam.height * cam.width + 1, dtype=np.int64),
                prim=np.zeros(0, dtype=np.int32),
                u=np.zeros(0),
                v=np.zeros(0),
                z=np.zeros(0),
                g_int=np.zeros(0),
                g_scr=np.zeros(0),
                color_logit=snapshot.color_logit,
                opacity_logit=snapshot.opacity_logit,
            )
        return buffers

    _kernels.forward_kernel(
        prep.bins.tile_offsets,
        prep.bins.entries,
        prep.coef,
        prep.zc,
        prep.mu,
        prep.radius2,
        prep.alpha,
        prep.color,
        prep.n_cam,
        cam.width,
        cam.height,
        tile,
        prep.bins.tiles_x,
        cam.near,
        buffers.color,
        buffers.alpha,
        buffers.depth_raw,
        buffers.normal_raw,
        buffers.contrib_count,
        buffers.t_final,
    )

    covered = buffers.alpha > ALPHA_NORM_EPS
    buffers.depth = np.where(covered, buffers.depth_raw / np.maximum(buffers.alpha, 1e-300), 0.0)
    n_norm = np.linalg.norm(buffers.normal_raw, axis=-1)
    buffers.normal_valid = covered & (n_norm > 1e-12)
    buffers.normal = np.where(
        buffers.normal_valid[..., None],
        buffers.normal_raw / np.maximum(n_norm, 1e-300)[..., None],
        0.0,
    )

    if record == "replay":
        buffers.record = ForwardRecord(
            scene=prep, pose=pose, cam=cam,
            n_primitives=snapshot.means.shape[0],
            offsets=None, prim=None, u=None, v=None, z=None,
            g_int=None, g_scr=None,
            color_logit=snapshot.color_logit,
            opacity_logit=snapshot.opacity_logit,
        )
    elif record:
        counts = buffers.contrib_count.reshape(-1).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        total = int(offsets[-1])
        rec = ForwardRecord(
            scene=prep,
            pose=pose,
            cam=cam,
            n_primitives=snapshot.means.shape[0],
            offsets=offsets,
            prim=np.zeros(total, dtype=np.int32),
            u=np.zeros(total),
            v=np.zeros(total),
            z=np.zeros(total),
            g_int=np.zeros(total),
            g_scr=np.zeros(total),
            color_logit=snapshot.color_logit,
            opacity_logit=snapshot.opacity_logit,
        )
        _kernels.record_kernel(
            prep.bins.tile_offsets,
            prep.bins.entries,
            prep.coef,
            prep.zc,
            prep.mu,
            prep.radius2,
            prep.alpha,
            cam.width,
            cam.height,
            tile,
            prep.bins.tiles_x,
            cam.near,
            rec.offsets,
            rec.prim,
            rec.u,
            rec.v,
            rec.z,
            rec.g_int,
            rec.g_scr,
        )
        buffers.record = rec
    return buffers
