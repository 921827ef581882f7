"""Numba kernels for the rasterizer and the volume ray-marcher.

Layout conventions shared by all blending kernels: primitives arrive gathered
in rank order (front-to-back depth order of the live set); contribution
records live in a CSR layout keyed by pixel (csr_offsets from an upstream
coverage count, csr_n actual records per pixel). No kernel accumulates into
shared slots: forward and the per-pixel backward write per-pixel/per-slot
data, and the per-primitive backward reduces over a transposed index where
each rank is owned by exactly one loop iteration. Output is therefore
independent of the thread count, bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

TILE = 16
# Blending stops once transmittance drops below this; mirrored by the
# reference renderer so both paths compute identical pixels.
T_STOP = 1e-4
# Same squared-Mahalanobis cutoff as core.DENSITY_CUTOFF_Q.
Q_CUTOFF = 24.0


@njit(cache=True)
def count_tile_entries(bbox, n_tiles_x, n_tiles_y, counts):
    for r in range(bbox.shape[0]):
        tx0 = bbox[r, 0] // TILE
        tx1 = bbox[r, 1] // TILE
        ty0 = bbox[r, 2] // TILE
        ty1 = bbox[r, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tiles_x + tx] += 1


@njit(cache=True)
def fill_tile_entries(bbox, n_tiles_x, offsets, cursors, tile_prims):
    # Ranks are visited in ascending order, so each tile list stays depth-sorted.
    for r in range(bbox.shape[0]):
        tx0 = bbox[r, 0] // TILE
        tx1 = bbox[r, 1] // TILE
        ty0 = bbox[r, 2] // TILE
        ty1 = bbox[r, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tiles_x + tx
                tile_prims[offsets[t] + cursors[t]] = r
                cursors[t] += 1


@njit(cache=True, parallel=True, fastmath={"contract", "arcp", "reassoc"})
def forward_kernel(height, width, n_tiles_x, n_tiles_y,
                   tile_offsets, tile_prims,
                   mean2d, inv_cov, alpha, mvis, colors, bbox,
                   background,
                   csr_offsets, csr_prim, csr_g, csr_n,
                   image, t_final, contrib_count):
    for t in prange(n_tiles_x * n_tiles_y):
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        y1 = min((ty + 1) * TILE, height)
        x1 = min((tx + 1) * TILE, width)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(ty * TILE, y1):
            for px in range(tx * TILE, x1):
                pix = py * width + px
                base = csr_offsets[pix]
                nrec = 0
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(lo, hi):
                    r = tile_prims[k]
                    if px < bbox[r, 0] or px > bbox[r, 1] or py < bbox[r, 2] or py > bbox[r, 3]:
                        continue
                    dx = px - mean2d[r, 0]
                    dy = py - mean2d[r, 1]
                    e0 = inv_cov[r, 0] * dx + inv_cov[r, 1] * dy
                    e1 = inv_cov[r, 1] * dx + inv_cov[r, 2] * dy
                    q = dx * e0 + dy * e1
                    if q > Q_CUTOFF:
                        continue
                    g = math.exp(-0.5 * q)
                    csr_prim[base + nrec] = r
                    csr_g[base + nrec] = g
                    nrec += 1
                    a = mvis[r] * alpha[r] * g
                    if a > 0.0:
                        c0 += trans * a * colors[r, 0]
                        c1 += trans * a * colors[r, 1]
                        c2 += trans * a * colors[r, 2]
                        trans *= 1.0 - a
                        contrib_count[py, px] += 1
                        if trans < T_STOP:
                            break
                image[py, px, 0] = c0 + trans * background[0]
                image[py, px, 1] = c1 + trans * background[1]
                image[py, px, 2] = c2 + trans * background[2]
                t_final[py, px] = trans
                csr_n[pix] = nrec


@njit(cache=True, parallel=True, fastmath={"contract", "arcp", "reassoc"})
def reference_kernel(height, width, mean2d, inv_cov, alpha, mvis, colors,
                     background, image):
    # Per-pixel loop over every primitive in depth order; same density cutoff
    # and transmittance stop as the tiled path, no other shortcuts.
    for pix in prange(height * width):
        py = pix // width
        px = pix % width
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for r in range(mean2d.shape[0]):
            dx = px - mean2d[r, 0]
            dy = py - mean2d[r, 1]
            e0 = inv_cov[r, 0] * dx + inv_cov[r, 1] * dy
            e1 = inv_cov[r, 1] * dx + inv_cov[r, 2] * dy
            q = dx * e0 + dy * e1
            if q > Q_CUTOFF:
                continue
            g = math.exp(-0.5 * q)
            a = mvis[r] * alpha[r] * g
            if a > 0.0:
                c0 += trans * a * colors[r, 0]
                c1 += trans * a * colors[r, 1]
                c2 += trans * a * colors[r, 2]
                trans *= 1.0 - a
                if trans < T_STOP:
                    break
        image[py, px, 0] = c0 + trans * background[0]
        image[py, px, 1] = c1 + trans * background[1]
        image[py, px, 2] = c2 + trans * background[2]


@njit(cache=True, parallel=True, fastmath={"contract", "arcp", "reassoc"})
def backward_pixel_kernel(height, width, d_image, background,
                          t_final, csr_offsets, csr_prim, csr_g, csr_n,
                          alpha, mvis, colors,
                          dl_da, wgt):
    """Per-pixel reverse walk of the blend.

    Reconstructs the running transmittance from the stored final value and
    emits, per contribution record, dL/d(sample alpha) and the blend weight
    T*a (which multiplies dL/dpixel for the color gradient).
    """
    for pix in prange(height * width):
        n = csr_n[pix]
        if n == 0:
            continue
        py = pix // width
        px = pix % width
        base = csr_offsets[pix]
        g0 = d_image[py, px, 0]
        g1 = d_image[py, px, 1]
        g2 = d_image[py, px, 2]
        trans = t_final[py, px]
        s0 = trans * background[0]
        s1 = trans * background[1]
        s2 = trans * background[2]
        for j in range(n - 1, -1, -1):
            slot = base + j
            r = csr_prim[slot]
            a = mvis[r] * alpha[r] * csr_g[slot]
            one_m = 1.0 - a
            trans = trans / one_m
            dl_da[slot] = (g0 * (trans * colors[r, 0] - s0 / one_m)
                           + g1 * (trans * colors[r, 1] - s1 / one_m)
                           + g2 * (trans * colors[r, 2] - s2 / one_m))
            w = trans * a
            wgt[slot] = w
            s0 += w * colors[r, 0]
            s1 += w * colors[r, 1]
            s2 += w * colors[r, 2]


@njit(cache=True)
def transpose_records(csr_offsets, csr_n, csr_prim, csr_g, dl_da, wgt,
                      n_ranks, starts, t_pix, t_g, t_dlda, t_wgt):
    """Counting sort of the used records into rank-major payload arrays.

    Gathering (pixel, density, dL/da, weight) here lets the per-primitive
    reduction stream its records sequentially instead of chasing slots.
    """
    n_pix = csr_n.shape[0]
    for pix in range(n_pix):
        base = csr_offsets[pix]
        for j in range(csr_n[pix]):
            starts[csr_prim[base + j] + 1] += 1
    for r in range(n_ranks):
        starts[r + 1] += starts[r]
    cursors = starts[:-1].copy()
    for pix in range(n_pix):
        base = csr_offsets[pix]
        for j in range(csr_n[pix]):
            slot = base + j
            r = csr_prim[slot]
            idx = cursors[r]
            t_pix[idx] = pix
            t_g[idx] = csr_g[slot]
            t_dlda[idx] = dl_da[slot]
            t_wgt[idx] = wgt[slot]
            cursors[r] += 1


@njit(cache=True)
def _trilinear(field, u, v, w):
    nx, ny, nz = field.shape[:3]
    i0 = int(math.floor(u))
    j0 = int(math.floor(v))
    k0 = int(math.floor(w))
    i0 = min(max(i0, 0), nx - 2)
    j0 = min(max(j0, 0), ny - 2)
    k0 = min(max(k0, 0), nz - 2)
    fu = min(max(u - i0, 0.0), 1.0)
    fv = min(max(v - j0, 0.0), 1.0)
    fw = min(max(w - k0, 0.0), 1.0)
    c00 = field[i0, j0, k0] * (1 - fu) + field[i0 + 1, j0, k0] * fu
    c10 = field[i0, j0 + 1, k0] * (1 - fu) + field[i0 + 1, j0 + 1, k0] * fu
    c01 = field[i0, j0, k0 + 1] * (1 - fu) + field[i0 + 1, j0, k0 + 1] * fu
    c11 = field[i0, j0 + 1, k0 + 1] * (1 - fu) + field[i0 + 1, j0 + 1, k0 + 1] * fu
    return (c00 * (1 - fv) + c10 * fv) * (1 - fw) + (c01 * (1 - fv) + c11 * fv) * fw


@njit(cache=True, parallel=True)
def raymarch_kernel(height, width, fx, fy, cx, cy, rot_c2w, cam_pos,
                    density, colors, bmin, bmax, n_steps,
                    plane_n, plane_z, clip_on, background, image, alpha_out):
    """Emission-absorption march with midpoint sampling inside the volume box.

    Sample points on or above the clipping plane (p.n >= z) contribute zero
    density, which removes exactly the material the splat model is meant to
    hide. Deterministic per pixel regardless of scheduling.
    """
    nx, ny, nz = density.shape
    sx = (nx - 1) / (bmax[0] - bmin[0])
    sy = (ny - 1) / (bmax[1] - bmin[1])
    sz = (nz - 1) / (bmax[2] - bmin[2])
    for pix in prange(height * width):
        py = pix // width
        px = pix % width
        dx = (px - cx) / fx
        dy = (py - cy) / fy
        norm = math.sqrt(dx * dx + dy * dy + 1.0)
        d0 = (rot_c2w[0, 0] * dx + rot_c2w[0, 1] * dy + rot_c2w[0, 2]) / norm
        d1 = (rot_c2w[1, 0] * dx + rot_c2w[1, 1] * dy + rot_c2w[1, 2]) / norm
        d2 = (rot_c2w[2, 0] * dx + rot_c2w[2, 1] * dy + rot_c2w[2, 2]) / norm
        # slab intersection with the volume box
        t0 = 0.0
        t1 = 1e30
        ok = True
        for ax in range(3):
            o = cam_pos[ax]
            d = d0 if ax == 0 else (d1 if ax == 1 else d2)
            if abs(d) < 1e-12:
                if o < bmin[ax] or o > bmax[ax]:
                    ok = False
                    break
            else:
                ta = (bmin[ax] - o) / d
                tb = (bmax[ax] - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        if ok and t1 > t0:
            dt = (t1 - t0) / n_steps
            for k in range(n_steps):
                t = t0 + (k + 0.5) * dt
                p0 = cam_pos[0] + t * d0
                p1 = cam_pos[1] + t * d1
                p2 = cam_pos[2] + t * d2
                if clip_on and (p0 * plane_n[0] + p1 * plane_n[1] + p2 * plane_n[2]
                                >= plane_z):
                    continue
                u = (p0 - bmin[0]) * sx
                v = (p1 - bmin[1]) * sy
                w = (p2 - bmin[2]) * sz
                sig = _trilinear(density, u, v, w)
                if sig <= 0.0:
                    continue
                a = 1.0 - math.exp(-sig * dt)
                col_r = _trilinear(colors[:, :, :, 0], u, v, w)
                col_g = _trilinear(colors[:, :, :, 1], u, v, w)
                col_b = _trilinear(colors[:, :, :, 2], u, v, w)
                c0 += trans * a * col_r
                c1 += trans * a * col_g
                c2 += trans * a * col_b
                trans *= 1.0 - a
                if trans < 1e-4:
                    break
        image[py, px, 0] = c0 + trans * background[0]
        image[py, px, 1] = c1 + trans * background[1]
        image[py, px, 2] = c2 + trans * background[2]
        alpha_out[py, px] = 1.0 - trans


@njit(cache=True, parallel=True, fastmath={"contract", "arcp", "reassoc"})
def backward_prim_kernel(width, starts, t_pix, t_g, t_dlda, t_wgt,
                         d_image,
                         mean2d, inv_cov, alpha, mvis,
                         d_mean2d, d_cov2d, d_alpha_raw, d_mask, d_color):
    """Per-rank reduction over that rank's (rank-major) contribution records.

    Produces gradients w.r.t. mean2d, the (xx, xy-combined, yy) entries of the
    floored 2D covariance, the raw opacity factor, the mask value, and the
    activated color. Each rank is written by exactly one iteration.
    """
    d_flat = d_image.reshape(-1, 3)
    for r in prange(starts.shape[0] - 1):
        acc_m0 = 0.0
        acc_m1 = 0.0
        acc_ca = 0.0
        acc_cb = 0.0
        acc_cc = 0.0
        acc_ar = 0.0
        acc_mk = 0.0
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        mv = mvis[r]
        al = alpha[r]
        for k in range(starts[r], starts[r + 1]):
            pix = t_pix[k]
            py = pix // width
            px = pix % width
            dx = px - mean2d[r, 0]
            dy = py - mean2d[r, 1]
            e0 = inv_cov[r, 0] * dx + inv_cov[r, 1] * dy
            e1 = inv_cov[r, 1] * dx + inv_cov[r, 2] * dy
            g = t_g[k]
            da = t_dlda[k]
            dg = da * mv * al * g
            acc_m0 += dg * e0
            acc_m1 += dg * e1
            acc_ca += dg * 0.5 * e0 * e0
            acc_cb += dg * e0 * e1
            acc_cc += dg * 0.5 * e1 * e1
            acc_ar += da * mv * g
            acc_mk += da * al * g
            w = t_wgt[k]
            acc_r += w * d_flat[pix, 0]
            acc_g += w * d_flat[pix, 1]
            acc_b += w * d_flat[pix, 2]
        d_mean2d[r, 0] = acc_m0
        d_mean2d[r, 1] = acc_m1
        d_cov2d[r, 0] = acc_ca
        d_cov2d[r, 1] = acc_cb
        d_cov2d[r, 2] = acc_cc
        d_alpha_raw[r] = acc_ar
        d_mask[r] = acc_mk
        d_color[r, 0] = acc_r
        d_color[r, 1] = acc_g
        d_color[r, 2] = acc_b
