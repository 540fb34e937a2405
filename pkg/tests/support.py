"""Shared scene builders and loss harnesses for gradient checks."""

import numpy as np

from splat4d.geometry import PinholeCamera, SE3Pose, se3_exp, so3_exp
from splat4d.gradients import BufferGradients, backward_render
from splat4d.renderer import render
from splat4d.splat import GaussianMap, logit


def small_cam(w=8, h=8, f=15.0):
    return PinholeCamera(fx=f, fy=f * 0.95, cx=w / 2 + 0.2, cy=h / 2 - 0.1,
                         width=w, height=h, near=0.05, far=50.0)


def random_scene(rng, n_splats, cam, edge_on_margin_deg=5.0):
    """Random splats in front of the camera, rejecting near-edge-on frames."""
    gmap = GaussianMap()
    means, frames, scales, colors, opacities = [], [], [], [], []
    while len(means) < n_splats:
        mean = np.concatenate([rng.normal(size=2) * 0.3, [rng.uniform(1.0, 2.5)]])
        frame = se3_exp(np.concatenate([np.zeros(3), rng.normal(size=3)])).rotation
        ray = mean / np.linalg.norm(mean)
        incidence = abs(frame[:, 2] @ ray)
        if incidence < np.sin(np.radians(edge_on_margin_deg)) + 0.07:
            continue
        means.append(mean)
        frames.append(frame)
        scales.append(np.log(rng.uniform(0.15, 0.45, size=2)))
        colors.append(rng.normal(size=3))
        opacities.append(float(logit(np.array([rng.uniform(0.35, 0.9)]))[0]))
    gmap.append(np.array(means), np.array(frames), np.array(scales),
                np.array(colors), np.array(opacities), 0)
    return gmap


def make_targets(rng, cam):
    tn = rng.normal(size=(cam.height, cam.width, 3))
    tn /= np.linalg.norm(tn, axis=-1, keepdims=True)
    return {
        "color": rng.random((cam.height, cam.width, 3)),
        "depth": rng.uniform(0.5, 3.0, size=(cam.height, cam.width)),
        "normal": tn,
    }


def scene_loss(gmap, pose, cam, targets, weights=(1.0, 1.0, 1.0, 0.5)):
    """Mixed photometric/depth/normal/alpha loss over one render."""
    wc, wd, wn, wa = weights
    buf = render(gmap, pose, cam)
    loss = wc * np.abs(buf.color - targets["color"]).mean()
    covered = buf.alpha > 1e-3
    if wd and covered.any():
        loss += wd * np.abs(buf.depth - targets["depth"])[covered].mean()
    if wn and buf.normal_valid.any():
        dots = np.sum(buf.normal * targets["normal"], axis=-1)
        loss += wn * (1.0 - dots[buf.normal_valid]).mean()
    loss += wa * ((buf.alpha - 0.5) ** 2).mean()
    return loss


def scene_loss_with_grads(gmap, pose, cam, targets, weights=(1.0, 1.0, 1.0, 0.5)):
    """Same loss, plus analytic (ParamGradients, pose tangent)."""
    wc, wd, wn, wa = weights
    buf = render(gmap, pose, cam, record=True)
    up = BufferGradients(
        color=np.zeros((cam.height, cam.width, 3)),
        depth=np.zeros((cam.height, cam.width)),
        normal=np.zeros((cam.height, cam.width, 3)),
        alpha=np.zeros((cam.height, cam.width)),
    )
    n_all = buf.color.size
    up.color += wc * np.sign(buf.color - targets["color"]) / n_all

    covered = buf.alpha > 1e-3
    if wd and covered.any():
        up.depth += np.where(covered, wd * np.sign(buf.depth - targets["depth"]), 0.0) / covered.sum()
    if wn and buf.normal_valid.any():
        up.normal += np.where(
            buf.normal_valid[..., None], -wn * targets["normal"], 0.0
        ) / buf.normal_valid.sum()
    up.alpha += wa * 2.0 * (buf.alpha - 0.5) / buf.alpha.size
    grads, pose_grad = backward_render(buf, up)
    return grads, pose_grad


def fd_family(gmap, pose, cam, targets, family, eps, weights=(1.0, 1.0, 1.0, 0.5)):
    """Central differences of scene_loss w.r.t. one parameter family."""
    if family == "pose":
        base = np.zeros(6)

        def loss_of(tau):
            return scene_loss(gmap, se3_exp(tau).compose(pose), cam, targets, weights)

    elif family == "frame":
        base = np.zeros((len(gmap), 3))
        frames0 = gmap.frames.copy()

        def loss_of(omega):
            gmap.frames = np.stack(
                [frames0[i] @ so3_exp(omega[i]) for i in range(len(frames0))]
            )
            val = scene_loss(gmap, pose, cam, targets, weights)
            gmap.frames = frames0
            return val

    else:
        base = getattr(gmap, family).copy()
        orig = base.copy()

        def loss_of(x):
            setattr(gmap, family, x)
            val = scene_loss(gmap, pose, cam, targets, weights)
            setattr(gmap, family, orig)
            return val

    grad = np.zeros_like(base)
    flat_g = grad.reshape(-1)
    flat_b = base.reshape(-1)
    for i in range(flat_b.size):
        xp = flat_b.copy()
        xm = flat_b.copy()
        xp[i] += eps
        xm[i] -= eps
        flat_g[i] = (loss_of(xp.reshape(base.shape)) - loss_of(xm.reshape(base.shape))) / (2 * eps)
    return grad


FAMILY_EPS = {
    "means": 1e-4,
    "frame": 1e-4,
    "scale_log": 1e-4,
    "color_logit": 1e-3,
    "opacity_logit": 1e-3,
    "pose": 1e-5,
}


def gradient_check(gmap, pose, cam, targets, weights=(1.0, 1.0, 1.0, 0.5)):
    """Per-family relative error between analytic and FD gradients."""
    grads, pose_grad = scene_loss_with_grads(gmap, pose, cam, targets, weights)
    analytic = {
        "means": grads.mean,
        "frame": grads.frame,
        "scale_log": grads.scale_log,
        "color_logit": grads.color_logit,
        "opacity_logit": grads.opacity_logit,
        "pose": pose_grad,
    }
    rel = {}
    for family, eps in FAMILY_EPS.items():
        num = fd_family(gmap, pose, cam, targets, family, eps, weights)
        scale = max(np.abs(num).max(), 1e-8)
        rel[family] = np.abs(analytic[family] - num).max() / scale
    return rel


def fit_translation_field(n_points=50, steps=24000, seed=11):
    """Train a small warp field to x(t) = x0 + (t, 0, 0); held-out mean error."""
    from splat4d import warpfield as wf
    from splat4d.optim import Adam

    field = wf.make_field("small", seed=seed)
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(n_points, 3)) * 0.4
    opts_w = [Adam(3e-3) for _ in field.weights]
    opts_b = [Adam(3e-3) for _ in field.biases]
    for it in range(steps):
        if it > 0 and it % 4000 == 0:
            for o in opts_w + opts_b:
                o.lr *= 0.5
        t = rng.uniform(0.0, 1.0)
        out, cache = field.forward(x0, t)
        resid = out[:, :3] - np.array([t, 0.0, 0.0])
        dout = np.zeros_like(out)
        dout[:, :3] = 2.0 * resid / resid.size
        dW, db, _ = field.backward(cache, dout)
        for i in range(field.n_layers):
            field.weights[i] += opts_w[i].step(dW[i])
            field.biases[i] += opts_b[i].step(db[i])
    t_held_out = np.array([0.033, 0.21, 0.47, 0.68, 0.91])
    errs = [
        np.linalg.norm(field.forward(x0, t)[0][:, :3] - np.array([t, 0.0, 0.0]), axis=1).mean()
        for t in t_held_out
    ]
    return float(np.mean(errs))
