"""Rigid-body math: SO(3)/SE(3) maps, poses, and the pinhole camera model.

Conventions used throughout the package:

- Poses are world-to-camera transforms T_CW unless stated otherwise:
  p_cam = R @ p_world + t.
- se(3) tangent vectors are ordered (rho, theta): indices 0-2 translational,
  3-5 rotational. Pose updates compose on the left, T <- Exp(tau) @ T.
- The camera looks down +z. Pixel (0,0) is the top-left corner; continuous
  pixel coordinates put the center of pixel (i, j) at (i + 0.5, j + 0.5).
  A camera-space point (x, y, z) projects to (fx*x/z + cx, fy*y/z + cy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

# Below this angle the closed-form coefficients are replaced by their
# second-order Taylor expansions to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula: exp of a rotation vector to a rotation matrix."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix.

    Raises AngleNearPi within 1e-6 of the pi singularity, where the
    axis extraction below loses precision.
    """
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle > np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {angle:.9f} too close to pi")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < SMALL_ANGLE:
        return w
    return (angle / np.sin(angle)) * w


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    """Left Jacobian V(theta) with Exp((rho, theta)) translation V @ rho."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def so3_left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    """Inverse of the left Jacobian, used by the SE(3) logarithm."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def so3_right_jacobian(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian: Exp(theta + d) ~= Exp(theta) @ Exp(Jr(theta) @ d)."""
    return so3_left_jacobian(-np.asarray(theta, dtype=float).reshape(3))


def _skew_batch(phi: np.ndarray) -> np.ndarray:
    n = phi.shape[0]
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -phi[:, 2], phi[:, 1]
    K[:, 1, 0], K[:, 1, 2] = phi[:, 2], -phi[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -phi[:, 1], phi[:, 0]
    return K


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula over (N, 3) rotation vectors."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    angle = np.linalg.norm(phi, axis=1)
    K = _skew_batch(phi)
    K2 = np.einsum("nij,njk->nik", K, K)
    small = angle < SMALL_ANGLE
    a = np.where(small, 1.0, angle)
    c1 = np.where(small, 1.0, np.sin(a) / a)
    c2 = np.where(small, 0.5, (1.0 - np.cos(a)) / (a * a))
    return np.eye(3)[None] + c1[:, None, None] * K + c2[:, None, None] * K2


def so3_right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian over (N, 3) rotation vectors."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    angle = np.linalg.norm(phi, axis=1)
    K = _skew_batch(phi)
    K2 = np.einsum("nij,njk->nik", K, K)
    small = angle < SMALL_ANGLE
    a = np.where(small, 1.0, angle)
    c1 = np.where(small, 0.5, (1.0 - np.cos(a)) / (a * a))
    c2 = np.where(small, 1.0 / 6.0, (a - np.sin(a)) / (a * a * a))
    return np.eye(3)[None] - c1[:, None, None] * K + c2[:, None, None] * K2


@dataclass
class SE3Pose:
    """Rigid transform with a 3x3 rotation matrix and a translation vector."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(M: np.ndarray) -> "SE3Pose":
        M = np.asarray(M, dtype=float)
        return SE3Pose(M[:3, :3].copy(), M[:3, 3].copy())

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self after other: (self @ other) p = self(other(p))."""
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt.copy(), -Rt @ self.translation)

    def copy(self) -> "SE3Pose":
        return SE3Pose(self.rotation.copy(), self.translation.copy())


def se3_exp(tau: np.ndarray) -> SE3Pose:
    """Exponential map of a (rho, theta) tangent vector."""
    tau = np.asarray(tau, dtype=float).reshape(6)
    rho, theta = tau[:3], tau[3:]
    return SE3Pose(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def se3_log(T: SE3Pose) -> np.ndarray:
    """Logarithm map; inverse of se3_exp away from the pi singularity."""
    theta = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(theta) @ T.translation
    return np.concatenate([rho, theta])


def transform_point(T: SE3Pose, p: np.ndarray) -> np.ndarray:
    """Apply the rigid transform: R @ p + t. Accepts (3,) or (N, 3)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return T.rotation @ p + T.translation
    return p @ T.rotation.T + T.translation


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) from a rotation matrix.

    Only used at serialization boundaries (TUM trajectory format).
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (qx, qy, qz, qw) quaternion."""
    x, y, z, w = np.asarray(q, dtype=float).reshape(4)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class PinholeCamera:
    """Pinhole intrinsics plus the near/far clip range in meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self) -> None:
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")

    def intrinsic4(self) -> np.ndarray:
        """Homogeneous 4x4 projection: maps (x,y,z,1) to (u*z, v*z, z, 1)."""
        return np.array([
            [self.fx, 0.0, self.cx, 0.0],
            [0.0, self.fy, self.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Pixel coordinates of camera-space points (..., 3)."""
        p = np.asarray(p_cam, dtype=float)
        z = p[..., 2]
        return np.stack(
            [self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy],
            axis=-1,
        )

    def backproject_grid(self, depth: np.ndarray) -> np.ndarray:
        """Camera-space points (H, W, 3) for a depth image, pixel centers."""
        h, w = depth.shape
        px = np.arange(w, dtype=float) + 0.5
        py = np.arange(h, dtype=float) + 0.5
        gx, gy = np.meshgrid(px, py)
        x = (gx - self.cx) / self.fx * depth
        y = (gy - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)

    def pixel_rays(self) -> np.ndarray:
        """Unit-z camera-space ray directions (H, W, 3) through pixel centers."""
        ones = np.ones((self.height, self.width))
        return self.backproject_grid(ones)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> SE3Pose:
    """Camera-to-world pose T_WC with +z toward target and image y downward."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        # Looking along 'up': pick any perpendicular right vector.
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    return SE3Pose(R_wc, eye)
