"""Numba kernels for tile rasterization: forward, contributor record, backward.

The per-pixel math lives here; everything that can be vectorized over
primitives (projection, M = W @ H, gradient assembly into parameter space)
stays in numpy on the renderer/gradients side.

Pixel (ix, iy) is sampled at continuous coordinates (ix + 0.5, iy + 0.5).
Screen points carry depth in the homogeneous coordinate, so the pixel's
x- and y-planes pull back through M = W @ H to

    h_u[c] = px * M[3,c] - M[0,c]      h_v[c] = py * M[3,c] - M[1,c]

and the tangent-plane hit solves the 2x2 system over components (0, 1, 3)
(component 2 is structurally zero):

    D = h_u0*h_v1 - h_u1*h_v0
    u = (h_u1*h_v3 - h_u3*h_v1) / D
    v = (h_u3*h_v0 - h_u0*h_v3) / D
    z = M20*u + M21*v + M22 + M23

|D| < 1e-12 means the splat is edge-on at this pixel and the ray misses it.
A pixel considers a splat only inside its conservative screen circle
(radius2); together with the response cutoff this makes coverage independent
of the tile decomposition.

For cache-friendly access the kernels read a packed (K, 11) coefficient
array instead of M:

    coef[k] = (M00, M01, M03, M10, M11, M13, M30, M31, M33, M20, M21)

plus zc[k] = M22 + M23. The backward kernels reconstitute dL/dM from these.

Two backward variants exist: `backward_kernel` replays recorded per-pixel
contributor lists (the reference path), `backward_replay_kernel` re-derives
contributors from the tile bins without a record (the fast path). They must
agree to machine precision; a test enforces this.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np
from numba import njit, prange

# The default TBB layer is version-gated on some hosts; OMP is always present.
nb.config.THREADING_LAYER = "omp"

# Effective splat response is max(G(u,v), G_screen); G_screen is a pixel-space
# Gaussian at the projected mean with this sigma (low-pass floor).
SCREEN_SIGMA = 0.707
WEIGHT_CUTOFF = 1.0 / 255.0
TERMINATE_T = 1e-4
EDGE_ON_EPS = 1e-12
ALPHA_MAX = 1.0 - 1e-6
R2_CUTOFF = 11.2  # exp(-5.6) < 1/255, so min(r_uv^2, r_scr^2) beyond this never passes

SIGMA2 = SCREEN_SIGMA * SCREEN_SIGMA


def pack_coefficients(M: np.ndarray) -> tuple:
    """(K, 11) plane/depth coefficients and (K,) constant depth term."""
    coef = np.empty((M.shape[0], 11))
    coef[:, 0] = M[:, 0, 0]
    coef[:, 1] = M[:, 0, 1]
    coef[:, 2] = M[:, 0, 3]
    coef[:, 3] = M[:, 1, 0]
    coef[:, 4] = M[:, 1, 1]
    coef[:, 5] = M[:, 1, 3]
    coef[:, 6] = M[:, 3, 0]
    coef[:, 7] = M[:, 3, 1]
    coef[:, 8] = M[:, 3, 3]
    coef[:, 9] = M[:, 2, 0]
    coef[:, 10] = M[:, 2, 1]
    zc = M[:, 2, 2] + M[:, 2, 3]
    return coef, zc


@njit(cache=True, parallel=True)
def forward_kernel(
    tile_offsets,
    entries,
    coef,
    zc,
    mu,
    radius2,
    alpha,
    color,
    n_cam,
    width,
    height,
    tile,
    tiles_x,
    near,
    color_buf,
    alpha_buf,
    depth_raw,
    normal_raw,
    count_buf,
    t_final,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tidx in prange(n_tiles):
        ty = tidx // tiles_x
        tx = tidx % tiles_x
        x_hi = min((tx + 1) * tile, width)
        y_hi = min((ty + 1) * tile, height)
        s0 = tile_offsets[tidx]
        s1 = tile_offsets[tidx + 1]
        for iy in range(ty * tile, y_hi):
            py = iy + 0.5
            for ix in range(tx * tile, x_hi):
                px = ix + 0.5
                T = 1.0
                n_hit = 0
                c_r = 0.0
                c_g = 0.0
                c_b = 0.0
                a_sum = 0.0
                d_sum = 0.0
                n_x = 0.0
                n_y = 0.0
                n_z = 0.0
                for e in range(s0, s1):
                    k = entries[e]
                    dx = px - mu[k, 0]
                    dy = py - mu[k, 1]
                    d2 = dx * dx + dy * dy
                    if d2 > radius2[k]:
                        continue
                    hu0 = px * coef[k, 6] - coef[k, 0]
                    hu1 = px * coef[k, 7] - coef[k, 1]
                    hu3 = px * coef[k, 8] - coef[k, 2]
                    hv0 = py * coef[k, 6] - coef[k, 3]
                    hv1 = py * coef[k, 7] - coef[k, 4]
                    hv3 = py * coef[k, 8] - coef[k, 5]
                    D = hu0 * hv1 - hu1 * hv0
                    if abs(D) < EDGE_ON_EPS:
                        continue
                    invD = 1.0 / D
                    u = (hu1 * hv3 - hu3 * hv1) * invD
                    v = (hu3 * hv0 - hu0 * hv3) * invD
                    z = coef[k, 9] * u + coef[k, 10] * v + zc[k]
                    if z <= near:
                        continue
                    rr = u * u + v * v
                    rs = d2 / SIGMA2
                    r2 = rr if rr <= rs else rs
                    if r2 > R2_CUTOFF:
                        continue
                    g = math.exp(-0.5 * r2)
                    a = alpha[k] * g
                    if a < WEIGHT_CUTOFF:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    c_r += w * color[k, 0]
                    c_g += w * color[k, 1]
                    c_b += w * color[k, 2]
                    a_sum += w
                    d_sum += w * z
                    n_x += w * n_cam[k, 0]
                    n_y += w * n_cam[k, 1]
                    n_z += w * n_cam[k, 2]
                    n_hit += 1
                    T *= 1.0 - a
                    if T < TERMINATE_T:
                        break
                color_buf[iy, ix, 0] = c_r
                color_buf[iy, ix, 1] = c_g
                color_buf[iy, ix, 2] = c_b
                alpha_buf[iy, ix] = a_sum
                depth_raw[iy, ix] = d_sum
                normal_raw[iy, ix, 0] = n_x
                normal_raw[iy, ix, 1] = n_y
                normal_raw[iy, ix, 2] = n_z
                count_buf[iy, ix] = n_hit
                t_final[iy, ix] = T


@njit(cache=True, parallel=True)
def record_kernel(
    tile_offsets,
    entries,
    coef,
    zc,
    mu,
    radius2,
    alpha,
    width,
    height,
    tile,
    tiles_x,
    near,
    rec_offsets,
    rec_prim,
    rec_u,
    rec_v,
    rec_z,
    rec_gint,
    rec_gscr,
):
    """Replay the forward traversal, filling the per-pixel contributor CSR."""
    n_tiles = tile_offsets.shape[0] - 1
    for tidx in prange(n_tiles):
        ty = tidx // tiles_x
        tx = tidx % tiles_x
        x_hi = min((tx + 1) * tile, width)
        y_hi = min((ty + 1) * tile, height)
        s0 = tile_offsets[tidx]
        s1 = tile_offsets[tidx + 1]
        for iy in range(ty * tile, y_hi):
            py = iy + 0.5
            for ix in range(tx * tile, x_hi):
                px = ix + 0.5
                T = 1.0
                pos = rec_offsets[iy * width + ix]
                for e in range(s0, s1):
                    k = entries[e]
                    dx = px - mu[k, 0]
                    dy = py - mu[k, 1]
                    d2 = dx * dx + dy * dy
                    if d2 > radius2[k]:
                        continue
                    hu0 = px * coef[k, 6] - coef[k, 0]
                    hu1 = px * coef[k, 7] - coef[k, 1]
                    hu3 = px * coef[k, 8] - coef[k, 2]
                    hv0 = py * coef[k, 6] - coef[k, 3]
                    hv1 = py * coef[k, 7] - coef[k, 4]
                    hv3 = py * coef[k, 8] - coef[k, 5]
                    D = hu0 * hv1 - hu1 * hv0
                    if abs(D) < EDGE_ON_EPS:
                        continue
                    invD = 1.0 / D
                    u = (hu1 * hv3 - hu3 * hv1) * invD
                    v = (hu3 * hv0 - hu0 * hv3) * invD
                    z = coef[k, 9] * u + coef[k, 10] * v + zc[k]
                    if z <= near:
                        continue
                    rr = u * u + v * v
                    rs = d2 / SIGMA2
                    r2 = rr if rr <= rs else rs
                    if r2 > R2_CUTOFF:
                        continue
                    g_int = math.exp(-0.5 * rr)
                    g_scr = math.exp(-0.5 * rs)
                    g = g_int if g_int >= g_scr else g_scr
                    a = alpha[k] * g
                    if a < WEIGHT_CUTOFF:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    rec_prim[pos] = k
                    rec_u[pos] = u
                    rec_v[pos] = v
                    rec_z[pos] = z
                    rec_gint[pos] = g_int
                    rec_gscr[pos] = g_scr
                    pos += 1
                    T *= 1.0 - a
                    if T < TERMINATE_T:
                        break


@njit(cache=True)
def _backward_contribution(
    k, u, v, z, g_int, g_scr, px, py, T,
    coef, mu, alpha, color, n_cam,
    uc0, uc1, uc2, ua, ud, un0, un1, un2,
    tc0, tc1, tc2, ta, td, tn0, tn1, tn2,
    pc0, pc1, pc2, pa, pd, pn0, pn1, pn2,
    tid, d_M, d_color, d_alpha, d_mu, d_nc,
):
    """Gradient math for one accepted contribution.

    Returns updated (T, prefix sums...). Shared verbatim by both backward
    traversals so the record and replay paths cannot drift apart.
    """
    g = g_int if g_int >= g_scr else g_scr
    a_raw = alpha[k] * g
    clamped = a_raw > ALPHA_MAX
    a = ALPHA_MAX if clamped else a_raw
    w = a * T

    f_dot_up = (
        uc0 * color[k, 0]
        + uc1 * color[k, 1]
        + uc2 * color[k, 2]
        + ua
        + ud * z
        + un0 * n_cam[k, 0]
        + un1 * n_cam[k, 1]
        + un2 * n_cam[k, 2]
    )
    pc0 += w * color[k, 0]
    pc1 += w * color[k, 1]
    pc2 += w * color[k, 2]
    pa += w
    pd += w * z
    pn0 += w * n_cam[k, 0]
    pn1 += w * n_cam[k, 1]
    pn2 += w * n_cam[k, 2]
    suffix_dot_up = (
        uc0 * (tc0 - pc0)
        + uc1 * (tc1 - pc1)
        + uc2 * (tc2 - pc2)
        + ua * (ta - pa)
        + ud * (td - pd)
        + un0 * (tn0 - pn0)
        + un1 * (tn1 - pn1)
        + un2 * (tn2 - pn2)
    )
    da = T * f_dot_up - suffix_dot_up / (1.0 - a)

    d_color[tid, k, 0] += w * uc0
    d_color[tid, k, 1] += w * uc1
    d_color[tid, k, 2] += w * uc2
    d_nc[tid, k, 0] += w * un0
    d_nc[tid, k, 1] += w * un1
    d_nc[tid, k, 2] += w * un2

    # Through a = alpha * max(g_int, g_scr); the clamp is flat.
    dg = 0.0
    if not clamped:
        d_alpha[tid, k] += g * da
        dg = alpha[k] * da

    du = 0.0
    dv = 0.0
    if g_int >= g_scr:
        du = -u * g_int * dg
        dv = -v * g_int * dg
    else:
        ds = dg * g_scr / SIGMA2
        d_mu[tid, k, 0] += ds * (px - mu[k, 0])
        d_mu[tid, k, 1] += ds * (py - mu[k, 1])

    # Depth path: z = M20 u + M21 v + M22 + M23.
    dz = w * ud
    du += dz * coef[k, 9]
    dv += dz * coef[k, 10]
    d_M[tid, k, 2, 0] += dz * u
    d_M[tid, k, 2, 1] += dz * v
    d_M[tid, k, 2, 2] += dz
    d_M[tid, k, 2, 3] += dz

    # Quotient rule back to the transformed plane vectors
    # a = h_u = px*M[3,:] - M[0,:], b = h_v = py*M[3,:] - M[1,:].
    a0 = px * coef[k, 6] - coef[k, 0]
    a1 = px * coef[k, 7] - coef[k, 1]
    a3 = px * coef[k, 8] - coef[k, 2]
    b0 = py * coef[k, 6] - coef[k, 3]
    b1 = py * coef[k, 7] - coef[k, 4]
    b3 = py * coef[k, 8] - coef[k, 5]
    D = a0 * b1 - a1 * b0
    invD = 1.0 / D
    da0 = (du * (-u * b1) + dv * (-b3 - v * b1)) * invD
    da1 = (du * (b3 + u * b0) + dv * (v * b0)) * invD
    da3 = (du * (-b1) + dv * b0) * invD
    db0 = (du * (u * a1) + dv * (a3 + v * a1)) * invD
    db1 = (du * (-a3 - u * a0) + dv * (-v * a0)) * invD
    db3 = (du * a1 - dv * a0) * invD
    d_M[tid, k, 0, 0] -= da0
    d_M[tid, k, 0, 1] -= da1
    d_M[tid, k, 0, 3] -= da3
    d_M[tid, k, 1, 0] -= db0
    d_M[tid, k, 1, 1] -= db1
    d_M[tid, k, 1, 3] -= db3
    d_M[tid, k, 3, 0] += px * da0 + py * db0
    d_M[tid, k, 3, 1] += px * da1 + py * db1
    d_M[tid, k, 3, 3] += px * da3 + py * db3

    T *= 1.0 - a
    return T, pc0, pc1, pc2, pa, pd, pn0, pn1, pn2


@njit(cache=True, parallel=True)
def backward_kernel(
    rec_offsets,
    rec_prim,
    rec_u,
    rec_v,
    rec_z,
    rec_gint,
    rec_gscr,
    coef,
    mu,
    alpha,
    color,
    n_cam,
    up_color,
    up_alpha,
    up_draw,
    up_nraw,
    tot_color,
    tot_alpha,
    tot_draw,
    tot_nraw,
    width,
    height,
    tile,
    tiles_x,
    d_M,
    d_color,
    d_alpha,
    d_mu,
    d_nc,
):
    """Reference backward: replays recorded contributor lists.

    Per-thread partial accumulators (leading axis) keep the parallel loop
    race-free; the caller reduces over that axis afterwards.
    """
    n_tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * n_tiles_y
    for tidx in prange(n_tiles):
        tid = nb.get_thread_id()
        ty = tidx // tiles_x
        tx = tidx % tiles_x
        x_hi = min((tx + 1) * tile, width)
        y_hi = min((ty + 1) * tile, height)
        for iy in range(ty * tile, y_hi):
            py = iy + 0.5
            for ix in range(tx * tile, x_hi):
                px = ix + 0.5
                lin = iy * width + ix
                s0 = rec_offsets[lin]
                s1 = rec_offsets[lin + 1]
                if s1 == s0:
                    continue
                uc0 = up_color[iy, ix, 0]
                uc1 = up_color[iy, ix, 1]
                uc2 = up_color[iy, ix, 2]
                ua = up_alpha[iy, ix]
                ud = up_draw[iy, ix]
                un0 = up_nraw[iy, ix, 0]
                un1 = up_nraw[iy, ix, 1]
                un2 = up_nraw[iy, ix, 2]
                pc0 = pc1 = pc2 = pa = pd = pn0 = pn1 = pn2 = 0.0
                T = 1.0
                for r in range(s0, s1):
                    T, pc0, pc1, pc2, pa, pd, pn0, pn1, pn2 = _backward_contribution(
                        rec_prim[r], rec_u[r], rec_v[r], rec_z[r],
                        rec_gint[r], rec_gscr[r], px, py, T,
                        coef, mu, alpha, color, n_cam,
                        uc0, uc1, uc2, ua, ud, un0, un1, un2,
                        tot_color[iy, ix, 0], tot_color[iy, ix, 1], tot_color[iy, ix, 2],
                        tot_alpha[iy, ix], tot_draw[iy, ix],
                        tot_nraw[iy, ix, 0], tot_nraw[iy, ix, 1], tot_nraw[iy, ix, 2],
                        pc0, pc1, pc2, pa, pd, pn0, pn1, pn2,
                        tid, d_M, d_color, d_alpha, d_mu, d_nc,
                    )


@njit(cache=True, parallel=True)
def backward_replay_kernel(
    tile_offsets,
    entries,
    coef,
    zc,
    mu,
    radius2,
    alpha,
    color,
    n_cam,
    up_color,
    up_alpha,
    up_draw,
    up_nraw,
    tot_color,
    tot_alpha,
    tot_draw,
    tot_nraw,
    width,
    height,
    tile,
    tiles_x,
    near,
    d_M,
    d_color,
    d_alpha,
    d_mu,
    d_nc,
    seen,
):
    """Fast backward: re-derives contributors from the tile bins (no record)."""
    n_tiles = tile_offsets.shape[0] - 1
    for tidx in prange(n_tiles):
        tid = nb.get_thread_id()
        ty = tidx // tiles_x
        tx = tidx % tiles_x
        x_hi = min((tx + 1) * tile, width)
        y_hi = min((ty + 1) * tile, height)
        s0 = tile_offsets[tidx]
        s1 = tile_offsets[tidx + 1]
        for iy in range(ty * tile, y_hi):
            py = iy + 0.5
            for ix in range(tx * tile, x_hi):
                px = ix + 0.5
                uc0 = up_color[iy, ix, 0]
                uc1 = up_color[iy, ix, 1]
                uc2 = up_color[iy, ix, 2]
                ua = up_alpha[iy, ix]
                ud = up_draw[iy, ix]
                un0 = up_nraw[iy, ix, 0]
                un1 = up_nraw[iy, ix, 1]
                un2 = up_nraw[iy, ix, 2]
                tc0 = tot_color[iy, ix, 0]
                tc1 = tot_color[iy, ix, 1]
                tc2 = tot_color[iy, ix, 2]
                ta = tot_alpha[iy, ix]
                td = tot_draw[iy, ix]
                tn0 = tot_nraw[iy, ix, 0]
                tn1 = tot_nraw[iy, ix, 1]
                tn2 = tot_nraw[iy, ix, 2]
                pc0 = pc1 = pc2 = pa = pd = pn0 = pn1 = pn2 = 0.0
                T = 1.0
                for e in range(s0, s1):
                    k = entries[e]
                    dx = px - mu[k, 0]
                    dy = py - mu[k, 1]
                    d2 = dx * dx + dy * dy
                    if d2 > radius2[k]:
                        continue
                    hu0 = px * coef[k, 6] - coef[k, 0]
                    hu1 = px * coef[k, 7] - coef[k, 1]
                    hu3 = px * coef[k, 8] - coef[k, 2]
                    hv0 = py * coef[k, 6] - coef[k, 3]
                    hv1 = py * coef[k, 7] - coef[k, 4]
                    hv3 = py * coef[k, 8] - coef[k, 5]
                    D = hu0 * hv1 - hu1 * hv0
                    if abs(D) < EDGE_ON_EPS:
                        continue
                    invD = 1.0 / D
                    u = (hu1 * hv3 - hu3 * hv1) * invD
                    v = (hu3 * hv0 - hu0 * hv3) * invD
                    z = coef[k, 9] * u + coef[k, 10] * v + zc[k]
                    if z <= near:
                        continue
                    rr = u * u + v * v
                    rs = d2 / SIGMA2
                    r2 = rr if rr <= rs else rs
                    if r2 > R2_CUTOFF:
                        continue
                    g_int = math.exp(-0.5 * rr)
                    g_scr = math.exp(-0.5 * rs)
                    g = g_int if g_int >= g_scr else g_scr
                    a_raw = alpha[k] * g
                    if a_raw < WEIGHT_CUTOFF:
                        continue
                    seen[tid, k] = 1
                    clamped = a_raw > ALPHA_MAX
                    a = ALPHA_MAX if clamped else a_raw
                    w = a * T

                    f_dot_up = (
                        uc0 * color[k, 0]
                        + uc1 * color[k, 1]
                        + uc2 * color[k, 2]
                        + ua
                        + ud * z
                        + un0 * n_cam[k, 0]
                        + un1 * n_cam[k, 1]
                        + un2 * n_cam[k, 2]
                    )
                    pc0 += w * color[k, 0]
                    pc1 += w * color[k, 1]
                    pc2 += w * color[k, 2]
                    pa += w
                    pd += w * z
                    pn0 += w * n_cam[k, 0]
                    pn1 += w * n_cam[k, 1]
                    pn2 += w * n_cam[k, 2]
                    suffix_dot_up = (
                        uc0 * (tc0 - pc0)
                        + uc1 * (tc1 - pc1)
                        + uc2 * (tc2 - pc2)
                        + ua * (ta - pa)
                        + ud * (td - pd)
                        + un0 * (tn0 - pn0)
                        + un1 * (tn1 - pn1)
                        + un2 * (tn2 - pn2)
                    )
                    da = T * f_dot_up - suffix_dot_up / (1.0 - a)

                    d_color[tid, k, 0] += w * uc0
                    d_color[tid, k, 1] += w * uc1
                    d_color[tid, k, 2] += w * uc2
                    d_nc[tid, k, 0] += w * un0
                    d_nc[tid, k, 1] += w * un1
                    d_nc[tid, k, 2] += w * un2

                    dg = 0.0
                    if not clamped:
                        d_alpha[tid, k] += g * da
                        dg = alpha[k] * da

                    du = 0.0
                    dv = 0.0
                    if g_int >= g_scr:
                        du = -u * g_int * dg
                        dv = -v * g_int * dg
                    else:
                        dsf = dg * g_scr / SIGMA2
                        d_mu[tid, k, 0] += dsf * dx
                        d_mu[tid, k, 1] += dsf * dy

                    dz = w * ud
                    du += dz * coef[k, 9]
                    dv += dz * coef[k, 10]
                    d_M[tid, k, 2, 0] += dz * u
                    d_M[tid, k, 2, 1] += dz * v
                    d_M[tid, k, 2, 2] += dz
                    d_M[tid, k, 2, 3] += dz

                    D2 = hu0 * hv1 - hu1 * hv0
                    invD2 = 1.0 / D2
                    da0 = (du * (-u * hv1) + dv * (-hv3 - v * hv1)) * invD2
                    da1 = (du * (hv3 + u * hv0) + dv * (v * hv0)) * invD2
                    da3 = (du * (-hv1) + dv * hv0) * invD2
                    db0 = (du * (u * hu1) + dv * (hu3 + v * hu1)) * invD2
                    db1 = (du * (-hu3 - u * hu0) + dv * (-v * hu0)) * invD2
                    db3 = (du * hu1 - dv * hu0) * invD2
                    d_M[tid, k, 0, 0] -= da0
                    d_M[tid, k, 0, 1] -= da1
                    d_M[tid, k, 0, 3] -= da3
                    d_M[tid, k, 1, 0] -= db0
                    d_M[tid, k, 1, 1] -= db1
                    d_M[tid, k, 1, 3] -= db3
                    d_M[tid, k, 3, 0] += px * da0 + py * db0
                    d_M[tid, k, 3, 1] += px * da1 + py * db1
                    d_M[tid, k, 3, 3] += px * da3 + py * db3

                    T *= 1.0 - a
                    if T < TERMINATE_T:
                        break
