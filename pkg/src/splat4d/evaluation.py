"""Trajectory and image-quality metrics plus report emission helpers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (DegenerateConfiguration, DimensionMismatch, EmptyMask,
                     EmptyTrajectory, MissingFile, NoMatches)
from .geometry import SE3Pose, quaternion_to_rotation, rotation_to_quaternion

MATCH_TOLERANCE = 1e-6  # timestamps from one pipeline run coincide exactly


@dataclass
class Trajectory:
    """Ordered (timestamp, camera-to-world pose) samples."""

    timestamps: np.ndarray
    poses: list  # of SE3Pose (T_WC)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.poses) != self.timestamps.shape[0]:
            raise ValueError("timestamp/pose count mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def save(self, path):
        """TUM format: `timestamp tx ty tz qx qy qz qw` per line."""
        with open(path, "w") as f:
            for ts, pose in zip(self.timestamps, self.poses):
                q = rotation_to_quaternion(pose.rotation)
                t = pose.translation
                f.write(
                    f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
                )

    @staticmethod
    def load(path) -> "Trajectory":
        if not os.path.exists(path):
            raise MissingFile(path)
        ts, poses = [], []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split()]
                ts.append(vals[0])
                poses.append(SE3Pose(quaternion_to_rotation(vals[4:8]), np.array(vals[1:4])))
        return Trajectory(np.array(ts), poses)


def _matched_indices(est: Trajectory, gt: Trajectory):
    gt_t = gt.timestamps
    pairs = []
    for i, t in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt_t - t)))
        if abs(gt_t[j] - t) <= MATCH_TOLERANCE:
            pairs.append((i, j))
    return pairs


def align_first_frame(est: Trajectory, gt: Trajectory) -> Trajectory:
    """Left-multiply every estimated pose by gt_0 @ est_0^-1."""
    if len(est) == 0 or len(gt) == 0:
        raise EmptyTrajectory("cannot align empty trajectories")
    S = gt.poses[0].compose(est.poses[0].inverse())
    return Trajectory(est.timestamps.copy(), [S.compose(p) for p in est.poses])


def umeyama_align(est: Trajectory, gt: Trajectory) -> Trajectory:
    """Closed-form least-squares rigid alignment (no scale) of positions."""
    pairs = _matched_indices(est, gt)
    if len(pairs) < 3:
        raise DegenerateConfiguration("need at least 3 matched poses")
    P = np.stack([est.poses[i].translation for i, _ in pairs])
    Q = np.stack([gt.poses[j].translation for _, j in pairs])
    mu_p, mu_q = P.mean(axis=0), Q.mean(axis=0)
    cov = (Q - mu_q).T @ (P - mu_p) / len(pairs)
    U, sv, Vt = np.linalg.svd(cov)
    if sv[1] < 1e-12:
        raise DegenerateConfiguration("positions are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_q - R @ mu_p
    X = SE3Pose(R, t)
    return Trajectory(est.timestamps.copy(), [X.compose(p) for p in est.poses])


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """Root-mean-square translational error over matched timestamps (meters)."""
    pairs = _matched_indices(est, gt)
    if not pairs:
        raise NoMatches("no matched timestamps")
    errs = [
        est.poses[i].translation - gt.poses[j].translation for i, j in pairs
    ]
    return float(np.sqrt(np.mean(np.sum(np.square(errs), axis=1))))


def depth_l1(rendered, gt, mask) -> float:
    """Mean absolute depth difference over jointly valid pixels (meters)."""
    mask = np.asarray(mask, dtype=bool)
    if rendered.shape != gt.shape:
        raise DimensionMismatch(f"{rendered.shape} vs {gt.shape}")
    if not mask.any():
        raise EmptyMask("no valid pixels for depth L1")
    return float(np.abs(rendered - gt)[mask].mean())


PSNR_CAP = 100.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 100 dB."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 5.0 / SSIM_SIGMA  # 11x11 window
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim(a, b, return_map: bool = False):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Channels are scored independently and averaged.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]

    def blur(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="nearest", axes=(0, 1))

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    smap = num / den
    return smap if return_map else float(smap.mean())


def format_report(metrics: dict) -> str:
    """Human-readable two-column table."""
    width = max(len(k) for k in metrics) if metrics else 0
    lines = [f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}"
             for k, v in metrics.items()]
    return "\n".join(lines)


def write_report_csv(metrics: dict, path):
    with open(path, "w") as f:
        f.write(",".join(metrics.keys()) + "\n")
        f.write(",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                         for v in metrics.values()) + "\n")
