"""Backward pass: buffer gradients down to primitive, warp, and pose space.

Pose gradients live in the (rho, theta) tangent of a left-composed update
T <- Exp(tau) @ T.  For the camera matrix itself the derivative stacks, per
tangent direction, the three rotation columns followed by the translation:

    dT/dtau = [ 0  -skew(R_col1) ]
              [ 0  -skew(R_col2) ]
              [ 0  -skew(R_col3) ]
              [ I  -skew(t)      ]

The rendered camera-frame normal n_c = R @ t_w only responds to the
rotational tangent, so the normal-buffer path feeds theta with n_c x dL/dn_c;
the full [I | -skew(n_c)] block applies to the homogeneous point action and
is exposed as `normal_pose_jacobian`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numba as nb
import numpy as np

from . import _kernels
from .errors import MissingRecord
from .renderer import ALPHA_NORM_EPS, RenderBuffers, screen_projection
from .splat import sigmoid


def pose_jacobian_block(T) -> np.ndarray:
    """12x6 derivative of the stacked camera matrix entries w.r.t. the tangent."""
    from .geometry import skew  # local import keeps module load light

    R, t = T.rotation, T.translation
    J = np.zeros((12, 6))
    for i in range(3):
        J[3 * i : 3 * i + 3, 3:] = -skew(R[:, i])
    J[9:12, 0:3] = np.eye(3)
    J[9:12, 3:] = -skew(t)
    return J


def normal_pose_jacobian(n_c: np.ndarray) -> np.ndarray:
    """3x6 derivative [I | -skew(n_c)] of the homogeneous action on n_c."""
    from .geometry import skew

    n_c = np.asarray(n_c, dtype=float).reshape(3)
    if abs(np.linalg.norm(n_c) - 1.0) > 1e-6:
        raise ValueError("normal_pose_jacobian expects a unit vector")
    return np.concatenate([np.eye(3), -skew(n_c)], axis=1)


def fd_oracle(loss: Callable[[np.ndarray], float], x0: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of a scalar loss over a flat parameter vector."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        flat[i] = (loss(xp.reshape(x0.shape)) - loss(xm.reshape(x0.shape))) / (2.0 * eps)
    return grad


@dataclass
class BufferGradients:
    """Upstream dL/d(render buffers); omitted entries are treated as zero."""

    color: Optional[np.ndarray] = None  # (H, W, 3)
    depth: Optional[np.ndarray] = None  # (H, W), w.r.t. alpha-normalized depth
    normal: Optional[np.ndarray] = None  # (H, W, 3), w.r.t. unit normals
    alpha: Optional[np.ndarray] = None  # (H, W)


@dataclass
class ParamGradients:
    """Per-primitive gradients, aligned with the rendered snapshot's rows.

    `frame` is a local so(3) tangent of a right-multiplied perturbation
    R -> R @ Exp(omega). Exposure and warp-output slots are filled further up
    the stack (losses / warp backward).
    """

    mean: np.ndarray
    frame: np.ndarray
    scale_log: np.ndarray
    color_logit: np.ndarray
    opacity_logit: np.ndarray
    visible: np.ndarray
    exposure: Optional[np.ndarray] = None
    warp_delta: Optional[np.ndarray] = None

    @staticmethod
    def zeros(n: int) -> "ParamGradients":
        return ParamGradients(
            mean=np.zeros((n, 3)),
            frame=np.zeros((n, 3)),
            scale_log=np.zeros((n, 2)),
            color_logit=np.zeros((n, 3)),
            opacity_logit=np.zeros(n),
            visible=np.zeros(n, dtype=bool),
        )

    def add(self, other: "ParamGradients"):
        self.mean += other.mean
        self.frame += other.frame
        self.scale_log += other.scale_log
        self.color_logit += other.color_logit
        self.opacity_logit += other.opacity_logit
        self.visible |= other.visible


def _raw_upstreams(buffers: RenderBuffers, up: BufferGradients, h: int, w: int):
    """Fold normalization chains into gradients w.r.t. the raw weighted sums."""
    up_color = up.color if up.color is not None else np.zeros((h, w, 3))
    up_alpha = (up.alpha if up.alpha is not None else np.zeros((h, w))).copy()
    up_draw = np.zeros((h, w))
    up_nraw = np.zeros((h, w, 3))

    covered = buffers.alpha > ALPHA_NORM_EPS
    if up.depth is not None:
        a_safe = np.where(covered, buffers.alpha, 1.0)
        up_draw = np.where(covered, up.depth / a_safe, 0.0)
        # depth = depth_raw / alpha also moves with alpha.
        up_alpha -= np.where(covered, up.depth * buffers.depth_raw / (a_safe * a_safe), 0.0)
    if up.normal is not None:
        valid = buffers.normal_valid
        nraw = buffers.normal_raw
        norm = np.maximum(np.linalg.norm(nraw, axis=-1), 1e-300)
        nhat = buffers.normal
        dot = np.sum(up.normal * nhat, axis=-1, keepdims=True)
        up_nraw = np.where(valid[..., None], (up.normal - nhat * dot) / norm[..., None], 0.0)
    return up_color, up_alpha, up_draw, up_nraw


def backward_render(buffers: RenderBuffers, up: BufferGradients):
    """Gradients of a recorded render: (ParamGradients, pose tangent (6,)).

    Parameter gradients are expressed at the rendered snapshot (the deformed
    state when a warp was applied); rows that contributed to no pixel are
    exactly zero.
    """
    rec = buffers.record
    if rec is None:
        raise MissingRecord("render was run without record=True")
    n = rec.n_primitives
    grads = ParamGradients.zeros(n)
    pose_grad = np.zeros(6)
    if rec.scene is None or (rec.prim is not None and rec.prim.size == 0):
        return grads, pose_grad

    scene = rec.scene
    cam = rec.cam
    h, w = cam.height, cam.width
    up_color, up_alpha, up_draw, up_nraw = _raw_upstreams(buffers, up, h, w)

    k = len(scene.prim_orig)
    n_threads = nb.get_num_threads()
    d_M = np.zeros((n_threads, k, 4, 4))
    d_color = np.zeros((n_threads, k, 3))
    d_alpha = np.zeros((n_threads, k))
    d_mu = np.zeros((n_threads, k, 2))
    d_nc = np.zeros((n_threads, k, 3))
    seen_flags = np.zeros((n_threads, k), dtype=np.uint8)

    if rec.prim is None:
        _kernels.backward_replay_kernel(
            scene.bins.tile_offsets,
            scene.bins.entries,
            scene.coef,
            scene.zc,
            scene.mu,
            scene.radius2,
            scene.alpha,
            scene.color,
            scene.n_cam,
            np.ascontiguousarray(up_color),
            np.ascontiguousarray(up_alpha),
            np.ascontiguousarray(up_draw),
            np.ascontiguousarray(up_nraw),
            buffers.color,
            buffers.alpha,
            buffers.depth_raw,
            buffers.normal_raw,
            w,
            h,
            scene.bins.tile,
            scene.bins.tiles_x,
            cam.near,
            d_M,
            d_color,
            d_alpha,
            d_mu,
            d_nc,
            seen_flags,
        )
    else:
        _kernels.backward_kernel(
            rec.offsets,
            rec.prim,
            rec.u,
            rec.v,
            rec.z,
            rec.g_int,
            rec.g_scr,
            scene.coef,
            scene.mu,
            scene.alpha,
            scene.color,
            scene.n_cam,
            np.ascontiguousarray(up_color),
            np.ascontiguousarray(up_alpha),
            np.ascontiguousarray(up_draw),
            np.ascontiguousarray(up_nraw),
            buffers.color,
            buffers.alpha,
            buffers.depth_raw,
            buffers.normal_raw,
            w,
            h,
            scene.bins.tile,
            scene.bins.tiles_x,
            d_M,
            d_color,
            d_alpha,
            d_mu,
            d_nc,
        )
    d_M = d_M.sum(axis=0)
    d_color = d_color.sum(axis=0)
    d_alpha = d_alpha.sum(axis=0)
    d_mu = d_mu.sum(axis=0)
    d_nc = d_nc.sum(axis=0)

    pose = rec.pose
    R_cw, t_cw = pose.rotation, pose.translation

    # Split dM into the primitive transform H and the camera matrix W = K T.
    dH = np.einsum("ba,kbc->kac", scene.W, d_M)
    dW = np.einsum("kab,kcb->ac", d_M, scene.H)

    d_mean = dH[:, :3, 3].copy()
    su, sv = scene.scales[:, 0], scene.scales[:, 1]
    dt_u = su[:, None] * dH[:, :3, 0]
    dt_v = sv[:, None] * dH[:, :3, 1]
    d_su = np.einsum("ki,ki->k", scene.frames[:, :, 0], dH[:, :3, 0])
    d_sv = np.einsum("ki,ki->k", scene.frames[:, :, 1], dH[:, :3, 1])
    d_scale_log = np.stack([d_su * su, d_sv * sv], axis=1)

    # Screen-floor path: projected mean -> camera point -> mean and pose.
    p = scene.p_cam
    z_safe = p[:, 2]
    d_pcam = np.zeros((k, 3))
    d_pcam[:, 0] = cam.fx / z_safe * d_mu[:, 0]
    d_pcam[:, 1] = cam.fy / z_safe * d_mu[:, 1]
    d_pcam[:, 2] = (
        -cam.fx * p[:, 0] / (z_safe * z_safe) * d_mu[:, 0]
        - cam.fy * p[:, 1] / (z_safe * z_safe) * d_mu[:, 1]
    )
    d_mean += d_pcam @ R_cw

    # Normal path: n_c = R t_w.
    dt_w = d_nc @ R_cw

    # Local frame tangent omega of R -> R @ Exp(omega):
    # omega = sum_axis e_axis x (R^T dL/dt_axis).
    gu = np.einsum("kij,kj->ki", scene.frames.transpose(0, 2, 1), dt_u)
    gv = np.einsum("kij,kj->ki", scene.frames.transpose(0, 2, 1), dt_v)
    gw = np.einsum("kij,kj->ki", scene.frames.transpose(0, 2, 1), dt_w)
    omega = np.zeros((k, 3))
    omega[:, 1] -= gu[:, 2]
    omega[:, 2] += gu[:, 1]
    omega[:, 0] += gv[:, 2]
    omega[:, 2] -= gv[:, 0]
    omega[:, 0] -= gw[:, 1]
    omega[:, 1] += gw[:, 0]

    # Pose tangent: camera-matrix path plus the two per-primitive paths.
    dT = screen_projection(cam).T @ dW
    pose_grad[:3] = dT[:3, 3] + d_pcam.sum(axis=0)
    theta = np.cross(R_cw[:, 0], dT[:3, 0])
    theta += np.cross(R_cw[:, 1], dT[:3, 1])
    theta += np.cross(R_cw[:, 2], dT[:3, 2])
    theta += np.cross(t_cw, dT[:3, 3])
    theta += np.cross(p, d_pcam).sum(axis=0)
    theta += np.cross(scene.n_cam, d_nc).sum(axis=0)
    pose_grad[3:] = theta

    # Activation chains, then scatter from culled rows to snapshot rows.
    colors = scene.color
    alphas = scene.alpha
    d_color_logit = d_color * colors * (1.0 - colors)
    d_opacity_logit = d_alpha * alphas * (1.0 - alphas)

    orig = scene.prim_orig
    grads.mean[orig] = d_mean
    grads.frame[orig] = omega
    grads.scale_log[orig] = d_scale_log
    grads.color_logit[orig] = d_color_logit
    grads.opacity_logit[orig] = d_opacity_logit
    if rec.prim is not None:
        seen = np.bincount(rec.prim, minlength=k) > 0
    else:
        seen = seen_flags.any(axis=0)
    grads.visible[orig] = seen
    return grads, pose_grad
