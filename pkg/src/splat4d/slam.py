"""Tracking-and-mapping loop: per-frame pose optimization against the warped
map, keyframe registration with surfel insertion, windowed joint optimization
of map/warp/poses/exposures, and the frozen-pose global refinement.

The default (and only) execution mode is strictly sequential:
track -> register -> map iterations, interleaved per frame. All randomness
(history picks, global-optimization picks) flows from the config seed through
counter-based streams, so runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numba
import numpy as np

from .config import RunConfig
from .errors import DivergedTracking, EmptyInsertion, EmptyMap
from .evaluation import Trajectory
from .geometry import PinholeCamera, SE3Pose, se3_exp, so3_exp_batch
from .gradients import BufferGradients, backward_render
from .losses import (arap_losses, build_neighbor_graph, depth_loss,
                     isotropic_loss, normal_loss, photometric_loss)
from .optim import Adam
from .renderer import ALPHA_NORM_EPS, render
from .splat import (GaussianMap, MapStats, NormalMap, insert_from_rgbd,
                    normals_from_depth, prune_and_densify)
from .warpfield import EncodingConfig, make_field, warp_backward, warp_forward

STREAM_HISTORY = 1
STREAM_GLOBAL = 2


@dataclass
class Keyframe:
    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    normals: NormalMap
    pose_cw: SE3Pose
    exposure: np.ndarray  # (a, b)


@dataclass
class FrameRecord:
    timestamp: float
    pose_cw: SE3Pose
    keyframe_index: int | None = None


def optimizer_step(state: Adam, grad: np.ndarray) -> np.ndarray:
    """One adaptive-moment update; returns the parameter delta."""
    return state.step(grad)


@dataclass
class MapIterationResult:
    photometric: float
    depth: float
    normal: float
    isotropic: float
    arap: float
    arap_n: float
    total: float

    def as_row(self):
        return [self.photometric, self.depth, self.normal, self.isotropic,
                self.arap, self.arap_n, self.total]


class SlamSystem:
    """Sequential 4D tracking and mapping over a fixed-length RGB-D stream."""

    def __init__(self, cam: PinholeCamera, config: RunConfig, n_frames: int):
        self.cam = cam
        self.config = config
        self.n_frames = max(n_frames, 1)
        numba.set_num_threads(max(config.workers, 1))

        self.gmap = GaussianMap()
        self.stats = MapStats()
        if config.warp_enabled:
            enc = EncodingConfig(config.warp_position_frequencies, config.warp_time_frequencies)
            self.warp = make_field(config.warp_preset, cfg_override=enc, seed=config.seed)
        else:
            self.warp = None

        self.keyframes: list[Keyframe] = []
        self.window: list[int] = []
        self.frames: list[FrameRecord] = []
        self.weights = config.loss_weights()

        self.map_opts = {
            "means": Adam(config.lr_means),
            "frame": Adam(config.lr_frame),
            "scale_log": Adam(config.lr_scale),
            "color_logit": Adam(config.lr_color),
            "opacity_logit": Adam(config.lr_opacity),
        }
        if self.warp is not None:
            self.warp_opts_w = [Adam(config.lr_warp) for _ in self.warp.weights]
            self.warp_opts_b = [Adam(config.lr_warp) for _ in self.warp.biases]
        self.pose_opts: dict[int, Adam] = {}
        self.exposure_opts: dict[int, Adam] = {}

        self._graph = None
        self._graph_generation = -1
        self.map_iterations_done = 0
        self.loss_log: list[list] = []

    # -- helpers -------------------------------------------------------------

    def _rng(self, stream: int, step: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=(self.config.seed << 8) + stream, counter=[step, 0, 0, 0])
        )

    def _timestamp(self, frame_index: int) -> float:
        return frame_index / self.n_frames

    def _pose_lr(self) -> np.ndarray:
        c = self.config
        return np.array([c.lr_pose_rho] * 3 + [c.lr_pose_theta] * 3)

    def _deformed(self, t: float, with_cache: bool = False):
        if self.warp is None:
            return (self.gmap, None) if with_cache else self.gmap
        snap, cache = warp_forward(self.warp, self.gmap, t)
        return (snap, cache) if with_cache else snap

    def _neighbor_graph(self):
        if self._graph is None or self._graph_generation != self.gmap.generation:
            w = self.weights
            self._graph = build_neighbor_graph(
                self.gmap.means, k=w.arap_neighbors, radius=w.arap_radius,
                decay=w.arap_decay, generation=self.gmap.generation,
            )
            self._graph_generation = self.gmap.generation
        return self._graph

    # -- tracking ------------------------------------------------------------

    def track_frame(self, color: np.ndarray, depth: np.ndarray,
                    iterations: int | None = None) -> SE3Pose:
        """Optimize (pose tangent, exposure) of the latest frame against the
        map warped to the most recent keyframe's timestamp."""
        if len(self.gmap) == 0 or not self.keyframes:
            raise EmptyMap("tracking requires a mapped keyframe")
        cfg = self.config
        iterations = cfg.tracking_iterations if iterations is None else iterations

        t_kf = self.keyframes[-1].timestamp
        snap = self._deformed(t_kf)
        pose = self.frames[-1].pose_cw.copy() if self.frames else SE3Pose.identity()
        exposure = np.zeros(2)
        opt_pose = Adam(self._pose_lr())
        opt_exp = Adam(cfg.tracking_lr_exposure)

        initial_loss = None
        loss = 0.0
        for _ in range(iterations):
            buf = render(snap, pose, self.cam, record="replay", tile=cfg.tile_size)
            mask_photo = buf.alpha > cfg.tracking_alpha_mask
            if not mask_photo.any():
                mask_photo = buf.alpha > ALPHA_NORM_EPS
            if not mask_photo.any():
                raise DivergedTracking("tracked frame sees none of the map")
            l_p, d_color, d_ab = photometric_loss(buf.color, color, exposure, mask_photo)
            up = BufferGradients(color=self.weights.photometric * d_color)
            loss = self.weights.photometric * l_p
            mask_depth = (depth > 0) & (buf.alpha > ALPHA_NORM_EPS)
            if mask_depth.any():
                l_g, d_depth = depth_loss(buf.depth, depth, mask_depth)
                up.depth = self.weights.depth * d_depth
                loss += self.weights.depth * l_g
            if not np.isfinite(loss):
                raise DivergedTracking("non-finite tracking loss")
            if initial_loss is None:
                initial_loss = loss
            _, pose_grad = backward_render(buf, up)
            pose = se3_exp(opt_pose.step(pose_grad)).compose(pose)
            exposure = exposure + opt_exp.step(self.weights.photometric * d_ab)

        if initial_loss is not None and loss > cfg.tracking_divergence_factor * max(
            initial_loss, 1e-12
        ):
            raise DivergedTracking(f"loss grew {loss:.3g} from {initial_loss:.3g}")
        self._last_exposure = exposure
        return pose

    # -- keyframe registration -----------------------------------------------

    def register_keyframe(self, color: np.ndarray, depth: np.ndarray,
                          pose_cw: SE3Pose, frame_index: int) -> int:
        """Compute sensor normals, insert surfels where coverage is missing,
        and append the keyframe to the sliding window."""
        cfg = self.config
        t = self._timestamp(frame_index)
        normals = normals_from_depth(depth, self.cam)

        if len(self.gmap) == 0:
            mask = depth > 0
        else:
            buf = render(self._deformed(t), pose_cw, self.cam, tile=cfg.tile_size)
            depth_ok = (depth > 0) & (buf.alpha > ALPHA_NORM_EPS)
            disagree = depth_ok & (
                np.abs(buf.depth - depth) > cfg.insertion_depth_threshold
            )
            mask = (buf.alpha < cfg.insertion_alpha_threshold) | disagree

        kf_index = len(self.keyframes)
        try:
            insert_from_rgbd(
                self.gmap, self.cam, color, depth, normals, pose_cw, mask,
                stride=cfg.insertion_stride, birth_index=kf_index,
                opacity_init=cfg.opacity_init,
            )
        except EmptyInsertion:
            if len(self.gmap) == 0:
                raise
        self.stats.ensure_rows(len(self.gmap))
        for opt in self.map_opts.values():
            opt.ensure_rows(len(self.gmap))

        exposure = getattr(self, "_last_exposure", np.zeros(2)).copy()
        kf = Keyframe(kf_index, t, color.copy(), depth.copy(), normals, pose_cw.copy(), exposure)
        self.keyframes.append(kf)
        self.pose_opts[kf_index] = Adam(self._pose_lr())
        self.exposure_opts[kf_index] = Adam(self.config.lr_exposure)
        self.window.append(kf_index)
        if len(self.window) > cfg.window_capacity:
            self.window.pop(0)
        return kf_index

    # -- mapping -------------------------------------------------------------

    def _select_window(self) -> list[int]:
        selected = list(self.window)
        history = [k for k in range(len(self.keyframes)) if k not in self.window]
        if history and self.config.random_history > 0:
            rng = self._rng(STREAM_HISTORY, self.map_iterations_done)
            picks = rng.choice(
                len(history), size=min(self.config.random_history, len(history)),
                replace=False,
            )
            selected.extend(history[int(p)] for p in sorted(picks))
        return selected

    def map_iteration(self) -> MapIterationResult:
        """One joint step over the sampled window (poses, map, warp, exposures)."""
        if not self.keyframes:
            raise EmptyMap("no keyframes to map")
        cfg = self.config
        w = self.weights
        n = len(self.gmap)
        selected = self._select_window()

        acc_mean = np.zeros((n, 3))
        acc_frame = np.zeros((n, 3))
        acc_scale = np.zeros((n, 2))
        acc_color = np.zeros((n, 3))
        acc_opacity = np.zeros(n)
        visible = np.zeros(n, dtype=bool)
        if self.warp is not None:
            acc_w = [np.zeros_like(x) for x in self.warp.weights]
            acc_b = [np.zeros_like(x) for x in self.warp.biases]

        sum_lp = sum_lg = sum_ln = 0.0
        per_kf = []
        for kf_idx in selected:
            kf = self.keyframes[kf_idx]
            snap, cache = self._deformed(kf.timestamp, with_cache=True)
            buf = render(snap, kf.pose_cw, self.cam, record="replay", tile=cfg.tile_size)

            mask_photo = np.ones(kf.depth.shape, dtype=bool)
            l_p, d_color, d_ab = photometric_loss(buf.color, kf.color, kf.exposure, mask_photo)
            up = BufferGradients(color=w.photometric * d_color)
            sum_lp += l_p

            mask_depth = (kf.depth > 0) & (buf.alpha > ALPHA_NORM_EPS)
            if mask_depth.any():
                l_g, d_depth = depth_loss(buf.depth, kf.depth, mask_depth)
                up.depth = w.depth * d_depth
                sum_lg += l_g

            mask_normal = kf.normals.valid & buf.normal_valid
            if mask_normal.any():
                l_n, d_normal = normal_loss(buf.normal, kf.normals.vectors, mask_normal)
                up.normal = w.normal * d_normal
                sum_ln += l_n

            grads, pose_grad = backward_render(buf, up)
            per_kf.append((kf_idx, snap, cache, grads, pose_grad, d_ab))
            visible |= grads.visible

        # Rigidity terms between the oldest and latest selected timestamps.
        l_arap = l_arap_n = 0.0
        if self.warp is not None and len(selected) >= 2:
            times = [self.keyframes[k].timestamp for k in selected]
            i_old = int(np.argmin(times))
            i_new = int(np.argmax(times))
            if i_old != i_new:
                graph = self._neighbor_graph()
                if graph.n_edges > 0:
                    snap_old = per_kf[i_old][1]
                    snap_new = per_kf[i_new][1]
                    l_arap, l_arap_n, ag = arap_losses(snap_old, snap_new, graph)
                    per_kf[i_old][3].mean += ag.mean_t1
                    per_kf[i_old][3].frame += ag.frame_t1
                    per_kf[i_new][3].mean += ag.mean_t2
                    per_kf[i_new][3].frame += ag.frame_t2

        for kf_idx, snap, cache, grads, pose_grad, d_ab in per_kf:
            if self.warp is not None:
                wg = warp_backward(self.warp, cache, grads.mean, grads.frame, grads.scale_log)
                acc_mean += wg.mean
                acc_frame += wg.frame
                acc_scale += wg.scale_log
                for i in range(len(acc_w)):
                    acc_w[i] += wg.weight_grads[i]
                    acc_b[i] += wg.bias_grads[i]
            else:
                acc_mean += grads.mean
                acc_frame += grads.frame
                acc_scale += grads.scale_log
            acc_color += grads.color_logit
            acc_opacity += grads.opacity_logit

            kf = self.keyframes[kf_idx]
            if kf_idx in self.window and kf_idx != 0:
                kf.pose_cw = se3_exp(self.pose_opts[kf_idx].step(pose_grad)).compose(kf.pose_cw)
            kf.exposure = kf.exposure + self.exposure_opts[kf_idx].step(
                w.photometric * d_ab
            )

        l_iso, d_iso = isotropic_loss(self.gmap.scale_log)
        acc_scale += w.isotropic * d_iso

        self._apply_map_step(acc_mean, acc_frame, acc_scale, acc_color, acc_opacity)
        if self.warp is not None:
            for i in range(len(acc_w)):
                self.warp.weights[i] += self.warp_opts_w[i].step(acc_w[i])
                self.warp.biases[i] += self.warp_opts_b[i].step(acc_b[i])

        self.stats.accumulate(acc_mean, visible)
        self.map_iterations_done += 1
        if cfg.prune_every > 0 and self.map_iterations_done % cfg.prune_every == 0:
            self._management_pass()

        k = max(len(selected), 1)
        result = MapIterationResult(
            photometric=sum_lp / k, depth=sum_lg / k, normal=sum_ln / k,
            isotropic=l_iso, arap=l_arap, arap_n=l_arap_n,
            total=(w.photometric * sum_lp / k + w.depth * sum_lg / k
                   + w.normal * sum_ln / k + w.isotropic * l_iso + l_arap + l_arap_n),
        )
        if cfg.log_losses:
            self.loss_log.append([self.map_iterations_done] + result.as_row())
        return result

    def _apply_map_step(self, g_mean, g_frame, g_scale, g_color, g_opacity):
        from .splat import clamp_scale_log

        gmap = self.gmap
        gmap.means = gmap.means + self.map_opts["means"].step(g_mean)
        omega = self.map_opts["frame"].step(g_frame)
        gmap.frames = np.einsum("nij,njk->nik", gmap.frames, so3_exp_batch(omega))
        gmap.reorthonormalize()
        gmap.scale_log = clamp_scale_log(gmap.scale_log + self.map_opts["scale_log"].step(g_scale))
        gmap.color_logit = gmap.color_logit + self.map_opts["color_logit"].step(g_color)
        gmap.opacity_logit = gmap.opacity_logit + self.map_opts["opacity_logit"].step(g_opacity)
        if not (np.isfinite(gmap.means).all() and np.isfinite(gmap.opacity_logit).all()):
            raise FloatingPointError("non-finite map parameters after step")

    def _management_pass(self):
        cfg = self.config
        result = prune_and_densify(
            self.gmap, self.stats,
            opacity_threshold=cfg.prune_opacity,
            unseen_epochs_limit=cfg.unseen_epochs_limit,
            grad_threshold=cfg.densify_grad_threshold,
            split_scale=cfg.split_scale,
        )
        for opt in self.map_opts.values():
            opt.remap_rows(result.index_map)
        return result

    # -- global refinement ---------------------------------------------------

    def global_optimize(self, iterations: int):
        """Frozen poses and primitive count: appearance/geometry polish only."""
        if not self.keyframes or len(self.gmap) == 0 or iterations <= 0:
            return
        cfg = self.config
        w = self.weights
        n = len(self.gmap)
        for it in range(iterations):
            rng = self._rng(STREAM_GLOBAL, it)
            kf = self.keyframes[int(rng.integers(len(self.keyframes)))]
            snap, cache = self._deformed(kf.timestamp, with_cache=True)
            buf = render(snap, kf.pose_cw, self.cam, record="replay", tile=cfg.tile_size)

            l_p, d_color, _ = photometric_loss(
                buf.color, kf.color, kf.exposure, np.ones(kf.depth.shape, dtype=bool)
            )
            up = BufferGradients(color=w.photometric * d_color)
            mask_depth = (kf.depth > 0) & (buf.alpha > ALPHA_NORM_EPS)
            if mask_depth.any():
                _, d_depth = depth_loss(buf.depth, kf.depth, mask_depth)
                up.depth = w.depth * d_depth
            mask_normal = kf.normals.valid & buf.normal_valid
            if mask_normal.any():
                _, d_normal = normal_loss(buf.normal, kf.normals.vectors, mask_normal)
                up.normal = w.normal * d_normal

            grads, _ = backward_render(buf, up)
            if self.warp is not None:
                wg = warp_backward(self.warp, cache, grads.mean, grads.frame, grads.scale_log)
                g_mean, g_frame, g_scale = wg.mean, wg.frame, wg.scale_log
                for i in range(len(self.warp.weights)):
                    self.warp.weights[i] += self.warp_opts_w[i].step(wg.weight_grads[i])
                    self.warp.biases[i] += self.warp_opts_b[i].step(wg.bias_grads[i])
            else:
                g_mean, g_frame, g_scale = grads.mean, grads.frame, grads.scale_log
            _, d_iso = isotropic_loss(self.gmap.scale_log)
            self._apply_map_step(
                g_mean, g_frame, g_scale + w.isotropic * d_iso,
                grads.color_logit, grads.opacity_logit,
            )
            assert len(self.gmap) == n  # primitive count frozen

    # -- sequence driver -------------------------------------------------------

    def process_frame(self, frame_index: int, color: np.ndarray, depth: np.ndarray,
                      initial_pose: SE3Pose | None = None):
        """Track (bootstrap on the first frame), register on schedule, map."""
        cfg = self.config
        t = self._timestamp(frame_index)
        if not self.keyframes:
            pose = initial_pose.copy() if initial_pose is not None else SE3Pose.identity()
            self._last_exposure = np.zeros(2)
        else:
            pose = self.track_frame(color, depth)

        is_kf = frame_index % cfg.keyframe_every == 0
        if is_kf:
            kf_index = self.register_keyframe(color, depth, pose, frame_index)
            self.frames.append(FrameRecord(t, pose, kf_index))
            for _ in range(cfg.mapping_iterations):
                self.map_iteration()
        else:
            self.frames.append(FrameRecord(t, pose))

    def process_sequence(self, frames, initial_pose: SE3Pose | None = None):
        for i, fr in enumerate(frames):
            init = initial_pose if i == 0 else None
            if i == 0 and init is None and fr.gt_pose_cw is not None:
                init = fr.gt_pose_cw
            self.process_frame(i, fr.color, fr.depth, initial_pose=init)
        self.global_optimize(self.config.global_iterations)

    def trajectory(self) -> Trajectory:
        """Per-frame camera-to-world poses; keyframes use optimized poses."""
        ts, poses = [], []
        for rec in self.frames:
            pose = (self.keyframes[rec.keyframe_index].pose_cw
                    if rec.keyframe_index is not None else rec.pose_cw)
            ts.append(rec.timestamp)
            poses.append(pose.inverse())
        return Trajectory(np.array(ts), poses)
