"""Objective terms and their gradients: photometric, depth, normal,
isotropy, and the two rigidity regularizers over a neighbor graph.

L1 subgradients take the value 0 at kinks. All means are over the
participating pixels/edges/primitives so weights stay resolution- and
count-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGraph, EmptyMask


@dataclass
class LossWeights:
    """Term weights and rigidity-graph parameters.

    Defaults follow the full-method training configuration: photometric 0.9,
    depth 0.1, normal 0.002, isotropic 10.0; 20 neighbors within 0.05 m with
    exponential decay 500. The two rigidity terms enter with unit weight.
    """

    photometric: float = 0.9
    depth: float = 0.1
    normal: float = 0.002
    isotropic: float = 10.0
    arap_neighbors: int = 20
    arap_radius: float = 0.05
    arap_decay: float = 500.0


def photometric_loss(rendered, observed, exposure, mask):
    """Exposure-adjusted L1: mean |exp(a) * rendered + b - observed|.

    Returns (value, grad w.r.t. rendered, grad w.r.t. (a, b)).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("photometric mask selects no pixels")
    a, b = float(exposure[0]), float(exposure[1])
    gain = np.exp(a)
    diff = gain * rendered + b - observed
    m3 = np.broadcast_to(mask[..., None], diff.shape)
    n = m3.sum()
    value = np.abs(diff[m3]).mean()
    s = np.where(m3, np.sign(diff), 0.0) / n
    d_rendered = s * gain
    d_a = float((s * gain * rendered).sum())
    d_b = float(s.sum())
    return float(value), d_rendered, np.array([d_a, d_b])


def depth_loss(rendered, observed, mask):
    """Mean L1 depth error over the joint validity mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("depth mask selects no pixels")
    diff = rendered - observed
    n = mask.sum()
    value = np.abs(diff[mask]).mean()
    d_rendered = np.where(mask, np.sign(diff), 0.0) / n
    return float(value), d_rendered


def normal_loss(rendered, sensor, mask):
    """Mean (1 - n . n_sensor) over jointly valid pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("normal mask selects no pixels")
    n = mask.sum()
    dots = np.sum(rendered * sensor, axis=-1)
    value = (1.0 - dots[mask]).mean()
    d_rendered = np.where(mask[..., None], -sensor, 0.0) / n
    return float(value), d_rendered


def isotropic_loss(scale_log):
    """Mean |s_u - s_mean| + |s_v - s_mean| in activated scale space."""
    scale_log = np.asarray(scale_log, dtype=float)
    n = scale_log.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(scale_log)
    s = np.exp(scale_log)
    s_bar = s.mean(axis=1, keepdims=True)
    dev = s - s_bar
    value = np.abs(dev).sum(axis=1).mean()
    sign = np.sign(dev)
    # d/ds_u of (|s_u - s_bar| + |s_v - s_bar|) with s_bar = (s_u + s_v)/2.
    g = 0.5 * (sign - sign[:, ::-1]) / n
    return float(value), g * s


@dataclass
class NeighborGraph:
    """Directed k-NN edges over canonical means with decayed weights."""

    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    weight: np.ndarray  # (E,) in (0, 1]
    generation: int = -1

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


def build_neighbor_graph(means, k=20, radius=0.05, decay=500.0, generation=-1) -> NeighborGraph:
    """k nearest neighbors within `radius`, weighted exp(-decay * d^2)."""
    n = means.shape[0]
    if n < 2:
        return NeighborGraph(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), generation)
    tree = cKDTree(means)
    kk = min(k + 1, n)
    dist, idx = tree.query(means, k=kk)
    src = np.repeat(np.arange(n), kk - 1)
    dst = idx[:, 1:].reshape(-1)
    d = dist[:, 1:].reshape(-1)
    keep = d <= radius
    src, dst, d = src[keep], dst[keep], d[keep]
    return NeighborGraph(src, dst, np.exp(-decay * d * d), generation)


@dataclass
class ArapGradients:
    mean_t1: np.ndarray
    mean_t2: np.ndarray
    frame_t1: np.ndarray  # local so(3) tangents (normal column only)
    frame_t2: np.ndarray


def arap_losses(snap1, snap2, graph: NeighborGraph):
    """Pairwise-distance and normal-alignment rigidity between two times.

    L_arap penalizes |dist(t1) - dist(t2)| per edge; L_arap_n penalizes
    |n_i.n_j(t1) - n_i.n_j(t2)|. Both are weighted means over edges and are
    invariant to rigid motion of either snapshot.
    """
    if graph.n_edges == 0:
        raise EmptyGraph("neighbor graph has no edges")
    i, j, w = graph.src, graph.dst, graph.weight
    e = graph.n_edges

    x1, x2 = snap1.means, snap2.means
    d1v = x1[i] - x1[j]
    d2v = x2[i] - x2[j]
    d1 = np.linalg.norm(d1v, axis=1)
    d2 = np.linalg.norm(d2v, axis=1)
    l_arap = float((w * np.abs(d1 - d2)).mean())
    s = w * np.sign(d1 - d2) / e
    u1 = d1v / np.maximum(d1, 1e-12)[:, None]
    u2 = d2v / np.maximum(d2, 1e-12)[:, None]
    g_mean1 = np.zeros_like(x1)
    g_mean2 = np.zeros_like(x2)
    np.add.at(g_mean1, i, s[:, None] * u1)
    np.add.at(g_mean1, j, -s[:, None] * u1)
    np.add.at(g_mean2, i, -s[:, None] * u2)
    np.add.at(g_mean2, j, s[:, None] * u2)

    n1 = snap1.frames[:, :, 2]
    n2 = snap2.frames[:, :, 2]
    dot1 = np.sum(n1[i] * n1[j], axis=1)
    dot2 = np.sum(n2[i] * n2[j], axis=1)
    l_arap_n = float((w * np.abs(dot1 - dot2)).mean())
    t = w * np.sign(dot1 - dot2) / e
    g_n1 = np.zeros_like(n1)
    g_n2 = np.zeros_like(n2)
    np.add.at(g_n1, i, t[:, None] * n1[j])
    np.add.at(g_n1, j, t[:, None] * n1[i])
    np.add.at(g_n2, i, -t[:, None] * n2[j])
    np.add.at(g_n2, j, -t[:, None] * n2[i])

    grads = ArapGradients(
        mean_t1=g_mean1,
        mean_t2=g_mean2,
        frame_t1=_normal_grad_to_tangent(snap1.frames, g_n1),
        frame_t2=_normal_grad_to_tangent(snap2.frames, g_n2),
    )
    return l_arap, l_arap_n, grads


def _normal_grad_to_tangent(frames, d_tw):
    """Map dL/dt_w onto the right-multiplied frame tangent: e3 x (R^T g)."""
    g_local = np.einsum("nij,nj->ni", frames.transpose(0, 2, 1), d_tw)
    omega = np.zeros_like(g_local)
    omega[:, 0] = -g_local[:, 1]
    omega[:, 1] = g_local[:, 0]
    return omega


def total_loss(l_p, l_g, l_n, l_iso, l_arap, l_arap_n, weights: LossWeights) -> float:
    """Weighted sum of all terms; the rigidity pair enters unweighted."""
    return (
        weights.photometric * l_p
        + weights.depth * l_g
        + weights.normal * l_n
        + weights.isotropic * l_iso
        + l_arap
        + l_arap_n
    )
