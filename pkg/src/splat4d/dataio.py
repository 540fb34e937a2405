"""Sequence generation and persistence.

The procedural generator ray-casts analytic shapes (textured height-field
planes, spheres, boxes) with exact depth and normals and a simple diffuse
shading, placing cameras on an object-centered sphere of radius `cam_radius`:
training views sweep arcs in spherical (theta, phi), test views sit on the
circle of angular radius `test_angle_deg` around the mean viewing direction.

Also here: TUM-format directory I/O and whole-run checkpoint persistence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import imgio
from .errors import CorruptCheckpoint, InvalidSpec, MissingFile, NoAssociations
from .geometry import (PinholeCamera, SE3Pose, look_at, quaternion_to_rotation,
                       rotation_to_quaternion)
from .splat import NormalMap, GaussianMap, read_map_block, write_map_block
from .warpfield import WarpField, read_warp_block, write_warp_block

DEPTH_SCALE = 5000.0  # TUM convention: meters * 5000 in 16-bit PNGs
ASSOCIATION_WINDOW = 0.02  # seconds


@dataclass
class SequenceFrame:
    color: np.ndarray
    depth: np.ndarray  # meters, 0 = invalid
    timestamp: float
    gt_pose_cw: SE3Pose | None = None
    gt_normals: NormalMap | None = None
    mask: np.ndarray | None = None  # shape-id buffer, 0 = background


@dataclass
class Sequence:
    cam: PinholeCamera
    frames: list
    test_views: list = dc_field(default_factory=list)


@dataclass
class PlaneSpec:
    """Finite textured plane with optional sinusoidal bending along its normal.

    The local frame has columns (u, v, n); bending displaces the surface by
    amp * sin(k_u u + k_v v + phase) * sin(2 pi f_t t).
    """

    center: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, -1.0)
    extent: tuple = (1.0, 1.0)  # half-sizes along u, v
    albedo: tuple = (0.75, 0.7, 0.6)
    checker: float = 4.0  # checker frequency per meter, 0 = flat color
    bend_amp: float = 0.0
    bend_k: tuple = (4.0, 0.0)
    bend_phase: float = 0.0
    bend_freq_t: float = 1.0


@dataclass
class SphereSpec:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.3
    albedo: tuple = (0.6, 0.3, 0.25)
    osc_amp: tuple = (0.0, 0.0, 0.0)  # rigid sinusoidal translation
    osc_freq: float = 1.0


@dataclass
class BoxSpec:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.2, 0.2, 0.2)
    albedo: tuple = (0.3, 0.45, 0.7)
    osc_amp: tuple = (0.0, 0.0, 0.0)
    osc_freq: float = 1.0


@dataclass
class SynthSceneSpec:
    width: int = 64
    height: int = 64
    focal: float = 80.0
    n_frames: int = 30
    seed: int = 0
    cam_radius: float = 2.0
    cam_center: tuple = (0.0, 0.0, 0.0)
    arc_theta_deg: tuple = (-10.0, 10.0)
    arc_phi_deg: tuple = (-10.0, 10.0)
    path: str = "arc_theta"  # arc_theta | arc_cross
    test_angle_deg: float = 5.0
    n_test_views: int = 8
    depth_noise_sigma: float = 0.0
    shapes: list = dc_field(default_factory=list)

    def validate(self):
        if self.n_frames < 0 or self.width <= 0 or self.height <= 0:
            raise InvalidSpec("non-positive frame count or resolution")
        if self.cam_radius <= 0:
            raise InvalidSpec("camera radius must be positive")
        if self.path not in ("arc_theta", "arc_cross"):
            raise InvalidSpec(f"unknown camera path {self.path!r}")
        for s in self.shapes:
            if not isinstance(s, (PlaneSpec, SphereSpec, BoxSpec)):
                raise InvalidSpec(f"unknown shape spec {type(s).__name__}")


def _sphere_dir(theta: float, phi: float) -> np.ndarray:
    """Camera offset direction for spherical angles (radians)."""
    return np.array([
        np.sin(theta) * np.cos(phi),
        np.sin(phi),
        -np.cos(theta) * np.cos(phi),
    ])


def camera_pose_on_sphere(spec: SynthSceneSpec, theta_deg: float, phi_deg: float) -> SE3Pose:
    """T_CW for a camera on the view sphere looking at the scene center."""
    c = np.asarray(spec.cam_center, dtype=float)
    eye = c + spec.cam_radius * _sphere_dir(np.radians(theta_deg), np.radians(phi_deg))
    return look_at(eye, c).inverse()


def training_angles(spec: SynthSceneSpec, t: float) -> tuple:
    th0, th1 = spec.arc_theta_deg
    ph0, ph1 = spec.arc_phi_deg
    if spec.path == "arc_theta":
        return th0 + (th1 - th0) * t, 0.0
    # arc_cross: sweep the theta arc, then the phi arc.
    if t < 0.5:
        return th0 + (th1 - th0) * (2 * t), 0.0
    return 0.0, ph0 + (ph1 - ph0) * (2 * t - 1.0)


def test_view_angles(spec: SynthSceneSpec, i: int) -> tuple:
    """Points on the circle through (+-a, 0) and (0, +-a) in (theta, phi)."""
    alpha = 2.0 * np.pi * i / max(spec.n_test_views, 1)
    a = spec.test_angle_deg
    return a * np.cos(alpha), a * np.sin(alpha)


def _checker(u, v, freq, albedo):
    base = np.asarray(albedo)
    if freq <= 0:
        return np.broadcast_to(base, u.shape + (3,)).copy()
    par = (np.floor(u * freq) + np.floor(v * freq)) % 2
    shade = np.where(par > 0.5, 1.0, 0.55)
    return shade[..., None] * base


def _plane_heights(shape: PlaneSpec, u, v, t):
    if shape.bend_amp == 0.0:
        return np.zeros_like(u)
    ku, kv = shape.bend_k
    return (
        shape.bend_amp
        * np.sin(ku * u + kv * v + shape.bend_phase)
        * np.sin(2.0 * np.pi * shape.bend_freq_t * t)
    )


def _plane_frame(shape: PlaneSpec):
    n = np.asarray(shape.normal, dtype=float)
    n = n / np.linalg.norm(n)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=1)


def _raycast_plane(shape: PlaneSpec, origin, dirs, t):
    """Height-field intersection by bracketed bisection in the local frame."""
    R = _plane_frame(shape)
    o_l = R.T @ (origin - np.asarray(shape.center))  # shared ray origin
    d_l = dirs @ R
    n_px = dirs.shape[0]
    miss = np.full(n_px, np.inf)

    dz = d_l[:, 2]
    ok = np.abs(dz) > 1e-9
    amp = abs(shape.bend_amp) + 1e-9
    s_lo = (-amp - o_l[2]) / np.where(ok, dz, 1.0)
    s_hi = (amp - o_l[2]) / np.where(ok, dz, 1.0)
    lo = np.minimum(s_lo, s_hi)
    hi = np.maximum(s_lo, s_hi)
    lo = np.maximum(lo, 1e-6)
    ok &= hi > lo

    def residual(s):
        p = o_l[None, :] + s[:, None] * d_l
        return p[:, 2] - _plane_heights(shape, p[:, 0], p[:, 1], t)

    # March for a sign change, then bisect.
    n_march = 32
    f_lo = residual(lo)
    found = np.zeros(n_px, dtype=bool)
    a = lo.copy()
    b = hi.copy()
    prev_s = lo.copy()
    prev_f = f_lo.copy()
    for i in range(1, n_march + 1):
        s_i = lo + (hi - lo) * (i / n_march)
        f_i = residual(s_i)
        cross = ok & ~found & (np.sign(f_i) != np.sign(prev_f))
        a[cross] = prev_s[cross]
        b[cross] = s_i[cross]
        found |= cross
        prev_s, prev_f = s_i, f_i
    for _ in range(60):
        mid = 0.5 * (a + b)
        f_mid = residual(mid)
        f_a = residual(a)
        same = np.sign(f_mid) == np.sign(f_a)
        a = np.where(found & same, mid, a)
        b = np.where(found & ~same, mid, b)
    s = 0.5 * (a + b)

    p = o_l[None, :] + s[:, None] * d_l
    inside = (np.abs(p[:, 0]) <= shape.extent[0]) & (np.abs(p[:, 1]) <= shape.extent[1])
    hit = found & inside
    s = np.where(hit, s, miss)

    # Analytic normal from the height gradient, in world space.
    ku, kv = shape.bend_k
    osc = np.sin(2.0 * np.pi * shape.bend_freq_t * t) if shape.bend_amp != 0.0 else 0.0
    ph = ku * p[:, 0] + kv * p[:, 1] + shape.bend_phase
    dh_du = shape.bend_amp * ku * np.cos(ph) * osc
    dh_dv = shape.bend_amp * kv * np.cos(ph) * osc
    n_l = np.stack([-dh_du, -dh_dv, np.ones(n_px)], axis=1)
    n_l /= np.linalg.norm(n_l, axis=1, keepdims=True)
    normals = n_l @ R.T
    colors = _checker(p[:, 0], p[:, 1], shape.checker, shape.albedo)
    return s, normals, colors


def _osc_offset(amp, freq, t):
    return np.asarray(amp, dtype=float) * np.sin(2.0 * np.pi * freq * t)


def _raycast_sphere(shape: SphereSpec, origin, dirs, t):
    c = np.asarray(shape.center) + _osc_offset(shape.osc_amp, shape.osc_freq, t)
    oc = origin - c
    a = np.sum(dirs * dirs, axis=1)
    b = dirs @ oc
    disc = b * b - a * (oc @ oc - shape.radius**2)
    hit = disc > 0
    sqrt_d = np.sqrt(np.maximum(disc, 0.0))
    s = (-b - sqrt_d) / a
    s = np.where(hit & (s > 1e-6), s, np.inf)
    p = origin + s[:, None] * dirs
    normals = (p - c) / shape.radius
    bands = 0.7 + 0.3 * np.sign(np.sin(8.0 * np.arctan2(normals[:, 1], normals[:, 0])))
    colors = bands[:, None] * np.asarray(shape.albedo)
    return s, normals, colors


def _raycast_box(shape: BoxSpec, origin, dirs, t):
    c = np.asarray(shape.center) + _osc_offset(shape.osc_amp, shape.osc_freq, t)
    h = np.asarray(shape.half_extents)
    o = origin - c
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (-h - o) * inv
    t1 = (h - o) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=1)
    hit = (t_near < t_far) & (t_near > 1e-6)
    s = np.where(hit, t_near, np.inf)
    p = o + s[:, None] * dirs
    axis = np.argmax(np.abs(p / h), axis=1)
    normals = np.zeros((dirs.shape[0], 3))
    rows = np.arange(dirs.shape[0])
    normals[rows, axis] = np.sign(p[rows, axis])
    colors = np.broadcast_to(np.asarray(shape.albedo), (dirs.shape[0], 3)).copy()
    shade = 0.7 + 0.1 * axis
    colors = colors * shade[:, None]
    return s, normals, colors


_CASTERS = {PlaneSpec: _raycast_plane, SphereSpec: _raycast_sphere, BoxSpec: _raycast_box}

LIGHT_DIR = np.array([0.3, -0.5, -0.8]) / np.linalg.norm([0.3, -0.5, -0.8])


def render_ground_truth(spec: SynthSceneSpec, pose_cw: SE3Pose, t: float, cam: PinholeCamera):
    """Ray-cast one frame: exact depth/normals, diffuse shading, shape ids."""
    h, w = cam.height, cam.width
    rays_cam = cam.pixel_rays().reshape(-1, 3)
    T_wc = pose_cw.inverse()
    dirs = rays_cam @ T_wc.rotation.T  # z-normalized: s equals camera depth
    origin = T_wc.translation

    best_s = np.full(h * w, np.inf)
    best_n = np.zeros((h * w, 3))
    best_c = np.zeros((h * w, 3))
    best_id = np.zeros(h * w, dtype=np.int32)
    for sid, shape in enumerate(spec.shapes, start=1):
        s, normals, colors = _CASTERS[type(shape)](shape, origin, dirs, t)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_n[closer] = normals[closer]
        best_c[closer] = colors[closer]
        best_id[closer] = sid

    hit = np.isfinite(best_s)
    depth = np.where(hit, best_s, 0.0).reshape(h, w)
    # Orient normals toward the camera, matching sensor-normal convention.
    to_surf = dirs
    flip = np.sum(best_n * to_surf, axis=1) > 0
    best_n[flip] = -best_n[flip]
    lambert = np.clip(-best_n @ LIGHT_DIR, 0.0, 1.0)
    color = np.clip(best_c * (0.35 + 0.65 * lambert[:, None]), 0.0, 1.0)
    color[~hit] = 0.0
    n_cam = best_n @ T_wc.rotation  # world -> camera frame
    normals = NormalMap(
        vectors=np.where(hit[:, None], n_cam, 0.0).reshape(h, w, 3),
        valid=hit.reshape(h, w),
    )
    return color.reshape(h, w, 3), depth, normals, best_id.reshape(h, w)


def generate_sequence(spec: SynthSceneSpec) -> Sequence:
    """Deterministic training frames along the arc plus held-out test views."""
    spec.validate()
    cam = PinholeCamera(
        fx=spec.focal, fy=spec.focal, cx=spec.width / 2, cy=spec.height / 2,
        width=spec.width, height=spec.height, near=0.05, far=100.0,
    )
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    frames = []
    for i in range(spec.n_frames):
        t = i / spec.n_frames
        theta, phi = training_angles(spec, i / max(spec.n_frames - 1, 1))
        pose = camera_pose_on_sphere(spec, theta, phi)
        color, depth, normals, mask = render_ground_truth(spec, pose, t, cam)
        if spec.depth_noise_sigma > 0:
            noise = rng.normal(0.0, spec.depth_noise_sigma, size=depth.shape)
            depth = np.where(depth > 0, np.maximum(depth + noise, 1e-4), 0.0)
        frames.append(SequenceFrame(color, depth, t, pose, normals, mask))

    test_views = []
    for i in range(spec.n_test_views):
        t = i / max(spec.n_test_views - 1, 1) if spec.n_test_views > 1 else 0.0
        theta, phi = test_view_angles(spec, i)
        pose = camera_pose_on_sphere(spec, theta, phi)
        color, depth, normals, mask = render_ground_truth(spec, pose, t, cam)
        test_views.append(SequenceFrame(color, depth, t, pose, normals, mask))
    return Sequence(cam=cam, frames=frames, test_views=test_views)


# -- TUM-format directory I/O -------------------------------------------------


def write_tum_sequence(seq: Sequence, root):
    """rgb/, depth/ PNG trees plus rgb.txt, depth.txt, groundtruth.txt."""
    os.makedirs(os.path.join(root, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    rgb_lines, depth_lines, gt_lines = [], [], []
    for i, fr in enumerate(seq.frames):
        ts = f"{fr.timestamp:.6f}"
        rgb_rel = f"rgb/{i:05d}.png"
        depth_rel = f"depth/{i:05d}.png"
        imgio.write_png_color(os.path.join(root, rgb_rel), fr.color)
        imgio.write_png_depth16(os.path.join(root, depth_rel), fr.depth, DEPTH_SCALE)
        rgb_lines.append(f"{ts} {rgb_rel}")
        depth_lines.append(f"{ts} {depth_rel}")
        if fr.gt_pose_cw is not None:
            T_wc = fr.gt_pose_cw.inverse()
            q = rotation_to_quaternion(T_wc.rotation)
            tx, ty, tz = T_wc.translation
            gt_lines.append(
                f"{ts} {tx:.9f} {ty:.9f} {tz:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
            )
    for name, lines in (("rgb.txt", rgb_lines), ("depth.txt", depth_lines),
                        ("groundtruth.txt", gt_lines)):
        with open(os.path.join(root, name), "w") as f:
            f.write("# " + name + "\n")
            f.write("\n".join(lines) + ("\n" if lines else ""))
    with open(os.path.join(root, "camera.txt"), "w") as f:
        c = seq.cam
        f.write(f"{c.fx} {c.fy} {c.cx} {c.cy} {c.width} {c.height}\n")


def _read_listing(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            rows.append((float(parts[0]), parts[1:]))
    return rows


def load_tum_sequence(root) -> Sequence:
    """Nearest-timestamp association of rgb/depth (20 ms window), depth/5000."""
    rgb = _read_listing(os.path.join(root, "rgb.txt"))
    depth = _read_listing(os.path.join(root, "depth.txt"))
    gt_path = os.path.join(root, "groundtruth.txt")
    gt = _read_listing(gt_path) if os.path.exists(gt_path) else []

    cam_path = os.path.join(root, "camera.txt")
    if os.path.exists(cam_path):
        with open(cam_path) as f:
            fx, fy, cx, cy, w, h = f.read().split()
        cam = PinholeCamera(float(fx), float(fy), float(cx), float(cy), int(float(w)), int(float(h)))
    else:
        cam = None

    if not depth or not rgb:
        raise NoAssociations("empty rgb or depth listing")
    d_times = np.array([r[0] for r in depth])
    gt_times = np.array([r[0] for r in gt]) if gt else None

    frames = []
    for ts, (rgb_rel,) in rgb:
        j = int(np.argmin(np.abs(d_times - ts)))
        if abs(d_times[j] - ts) > ASSOCIATION_WINDOW:
            continue
        color = imgio.read_png_color(os.path.join(root, rgb_rel))
        depth_img = imgio.read_png_depth16(os.path.join(root, depth[j][1][0]), DEPTH_SCALE)
        pose = None
        if gt_times is not None and len(gt_times):
            g = int(np.argmin(np.abs(gt_times - ts)))
            if abs(gt_times[g] - ts) <= ASSOCIATION_WINDOW:
                vals = [float(x) for x in gt[g][1]]
                T_wc = SE3Pose(quaternion_to_rotation(vals[3:7]), np.array(vals[0:3]))
                pose = T_wc.inverse()
        frames.append(SequenceFrame(color, depth_img, ts, pose, None, None))
    if not frames:
        raise NoAssociations("no rgb/depth pairs within the association window")
    if cam is None:
        h, w = frames[0].depth.shape
        cam = PinholeCamera(fx=w * 1.2, fy=w * 1.2, cx=w / 2, cy=h / 2, width=w, height=h)
    return Sequence(cam=cam, frames=frames)


# -- Run persistence ----------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.s4d"
TRAJECTORY_NAME = "trajectory.txt"
CONFIG_NAME = "config.yaml"


def save_run(gmap: GaussianMap, warp: WarpField | None, trajectory, config_yaml: str, out_dir):
    """Write checkpoint (map + warp blocks), TUM trajectory, config snapshot.

    Quantizes the live state to float32 first so that a subsequent load
    renders bit-identically to the saved state.
    """
    os.makedirs(out_dir, exist_ok=True)
    gmap.quantize_to_f32()
    blob = write_map_block(gmap)
    if warp is not None:
        warp.quantize_to_f32()
        blob += write_warp_block(warp)
    with open(os.path.join(out_dir, CHECKPOINT_NAME), "wb") as f:
        f.write(blob)
    trajectory.save(os.path.join(out_dir, TRAJECTORY_NAME))
    with open(os.path.join(out_dir, CONFIG_NAME), "w") as f:
        f.write(config_yaml)


def load_checkpoint(path):
    """(GaussianMap, WarpField | None) from a checkpoint file."""
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as f:
        blob = f.read()
    gmap, offset = read_map_block(blob)
    warp = None
    if offset < len(blob):
        warp, offset = read_warp_block(blob, offset)
        if offset != len(blob):
            raise CorruptCheckpoint("trailing bytes after warp block")
    return gmap, warp


def load_run(run_dir):
    """(GaussianMap, WarpField | None, Trajectory, config text)."""
    from .evaluation import Trajectory

    gmap, warp = load_checkpoint(os.path.join(run_dir, CHECKPOINT_NAME))
    traj = Trajectory.load(os.path.join(run_dir, TRAJECTORY_NAME))
    cfg_path = os.path.join(run_dir, CONFIG_NAME)
    config_yaml = open(cfg_path).read() if os.path.exists(cfg_path) else ""
    return gmap, warp, traj, config_yaml
