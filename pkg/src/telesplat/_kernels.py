"""Numba kernels for splat projection, tile rasterization, and gradients.

Everything here is serial float64 and compiled with nogil so independent
render lanes can overlap without sharing the interpreter lock. Buffers are
plain numpy arrays owned by the caller; kernels never touch shared state.
"""
from __future__ import annotations

import numpy as np
from numba import njit

TILE = 16
NEAR_PLANE = 0.05
COV2D_REG = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4

_JIT = dict(cache=True, nogil=True, error_model="numpy")


@njit(**_JIT)
def _quat_to_rot(qw, qx, qy, qz, out):
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w = qw / n
    x = qx / n
    y = qy / n
    z = qz / n
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(**_JIT)
def project_gaussians(positions, quats, log_scales, opacity_logits,
                      rwc, twc, fx, fy, cx, cy, width, height):
    """Project gaussians into a camera; returns per-splat screen quantities.

    Culling: view depth <= near plane, or the 3-sigma bounding box of the
    projected ellipse missing the pixel rectangle [0,W-1]x[0,H-1].
    """
    n = positions.shape[0]
    valid = np.zeros(n, dtype=np.bool_)
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))      # (vxx, vxy, vyy)
    conic = np.zeros((n, 3))      # inverse covariance (a, b, c)
    bbox = np.zeros((n, 4))       # (x0, x1, y0, y1) bounding the alpha >= 1/255 region
    depth = np.zeros(n)
    opacity = np.zeros(n)
    rg = np.empty((3, 3))
    for i in range(n):
        px = positions[i, 0]
        py = positions[i, 1]
        pz = positions[i, 2]
        x = rwc[0, 0] * px + rwc[0, 1] * py + rwc[0, 2] * pz + twc[0]
        y = rwc[1, 0] * px + rwc[1, 1] * py + rwc[1, 2] * pz + twc[1]
        z = rwc[2, 0] * px + rwc[2, 1] * py + rwc[2, 2] * pz + twc[2]
        if z <= NEAR_PLANE:
            continue
        invz = 1.0 / z
        u = fx * x * invz + cx
        v = fy * y * invz + cy

        _quat_to_rot(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], rg)
        s0 = np.exp(2.0 * log_scales[i, 0])
        s1 = np.exp(2.0 * log_scales[i, 1])
        s2 = np.exp(2.0 * log_scales[i, 2])
        # world covariance M = Rg diag(s) Rg^T, then camera frame C = R M R^T
        m00 = rg[0, 0] * rg[0, 0] * s0 + rg[0, 1] * rg[0, 1] * s1 + rg[0, 2] * rg[0, 2] * s2
        m01 = rg[0, 0] * rg[1, 0] * s0 + rg[0, 1] * rg[1, 1] * s1 + rg[0, 2] * rg[1, 2] * s2
        m02 = rg[0, 0] * rg[2, 0] * s0 + rg[0, 1] * rg[2, 1] * s1 + rg[0, 2] * rg[2, 2] * s2
        m11 = rg[1, 0] * rg[1, 0] * s0 + rg[1, 1] * rg[1, 1] * s1 + rg[1, 2] * rg[1, 2] * s2
        m12 = rg[1, 0] * rg[2, 0] * s0 + rg[1, 1] * rg[2, 1] * s1 + rg[1, 2] * rg[2, 2] * s2
        m22 = rg[2, 0] * rg[2, 0] * s0 + rg[2, 1] * rg[2, 1] * s1 + rg[2, 2] * rg[2, 2] * s2
        # C = rwc @ M @ rwc^T (only the entries J touches are needed)
        t00 = rwc[0, 0] * m00 + rwc[0, 1] * m01 + rwc[0, 2] * m02
        t01 = rwc[0, 0] * m01 + rwc[0, 1] * m11 + rwc[0, 2] * m12
        t02 = rwc[0, 0] * m02 + rwc[0, 1] * m12 + rwc[0, 2] * m22
        t10 = rwc[1, 0] * m00 + rwc[1, 1] * m01 + rwc[1, 2] * m02
        t11 = rwc[1, 0] * m01 + rwc[1, 1] * m11 + rwc[1, 2] * m12
        t12 = rwc[1, 0] * m02 + rwc[1, 1] * m12 + rwc[1, 2] * m22
        t20 = rwc[2, 0] * m00 + rwc[2, 1] * m01 + rwc[2, 2] * m02
        t21 = rwc[2, 0] * m01 + rwc[2, 1] * m11 + rwc[2, 2] * m12
        t22 = rwc[2, 0] * m02 + rwc[2, 1] * m12 + rwc[2, 2] * m22
        c00 = t00 * rwc[0, 0] + t01 * rwc[0, 1] + t02 * rwc[0, 2]
        c01 = t00 * rwc[1, 0] + t01 * rwc[1, 1] + t02 * rwc[1, 2]
        c02 = t00 * rwc[2, 0] + t01 * rwc[2, 1] + t02 * rwc[2, 2]
        c11 = t10 * rwc[1, 0] + t11 * rwc[1, 1] + t12 * rwc[1, 2]
        c12 = t10 * rwc[2, 0] + t11 * rwc[2, 1] + t12 * rwc[2, 2]
        c22 = t20 * rwc[2, 0] + t21 * rwc[2, 1] + t22 * rwc[2, 2]
        # projection Jacobian at the mean
        j00 = fx * invz
        j02 = -fx * x * invz * invz
        j11 = fy * invz
        j12 = -fy * y * invz * invz
        # V = J C J^T + reg
        va = j00 * (j00 * c00 + j02 * c02) + j02 * (j00 * c02 + j02 * c22) + COV2D_REG
        vb = j00 * (j11 * c01 + j12 * c02) + j02 * (j11 * c12 + j12 * c22)
        vc = j11 * (j11 * c11 + j12 * c12) + j12 * (j11 * c12 + j12 * c22) + COV2D_REG
        det = va * vc - vb * vb
        if det <= 0.0:
            continue
        rx = 3.0 * np.sqrt(va)
        ry = 3.0 * np.sqrt(vc)
        if u + rx < 0.0 or u - rx > width - 1.0 or v + ry < 0.0 or v - ry > height - 1.0:
            continue
        valid[i] = True
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        cov2d[i, 0] = va
        cov2d[i, 1] = vb
        cov2d[i, 2] = vc
        inv_det = 1.0 / det
        conic[i, 0] = vc * inv_det
        conic[i, 1] = -vb * inv_det
        conic[i, 2] = va * inv_det
        lg = opacity_logits[i]
        op = 1.0 / (1.0 + np.exp(-lg))
        opacity[i] = op
        # exact bounding box of {alpha >= 1/255}: outside it the skip rule
        # discards the splat anyway, so the box is a free reject, never a cutoff
        ln_term = np.log(255.0 * op)
        if ln_term < 0.0:
            ln_term = 0.0
        ex = np.sqrt(2.0 * ln_term * va)
        ey = np.sqrt(2.0 * ln_term * vc)
        bbox[i, 0] = u - ex
        bbox[i, 1] = u + ex
        bbox[i, 2] = v - ey
        bbox[i, 3] = v + ey
        depth[i] = z
    return valid, mean2d, cov2d, conic, bbox, depth, opacity


@njit(**_JIT)
def bin_tiles(order, bbox, width, height):
    """Distribute depth-ordered splats into 16x16 pixel tiles.

    `order` lists splat indices sorted by (view depth, insertion id); the
    per-tile lists inherit that order. Returns CSR-style (tile_start, items).
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    m = order.shape[0]
    spans = np.empty((m, 4), dtype=np.int64)
    for k in range(m):
        i = order[k]
        tx0 = int(bbox[i, 0]) // TILE
        tx1 = int(bbox[i, 1]) // TILE
        ty0 = int(bbox[i, 2]) // TILE
        ty1 = int(bbox[i, 3]) // TILE
        if tx0 < 0:
            tx0 = 0
        if ty0 < 0:
            ty0 = 0
        if tx1 >= tiles_x:
            tx1 = tiles_x - 1
        if ty1 >= tiles_y:
            ty1 = tiles_y - 1
        spans[k, 0] = tx0
        spans[k, 1] = tx1
        spans[k, 2] = ty0
        spans[k, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    tile_start = np.cumsum(counts)
    items = np.empty(tile_start[-1], dtype=np.int32)
    cursor = tile_start[:-1].copy()
    for k in range(m):
        i = order[k]
        for ty in range(spans[k, 2], spans[k, 3] + 1):
            for tx in range(spans[k, 0], spans[k, 1] + 1):
                t = ty * tiles_x + tx
                items[cursor[t]] = i
                cursor[t] += 1
    return tile_start, items


@njit(**_JIT)
def composite_forward(tile_start, items, mean2d, conic, bbox, depth, opacity, colors,
                      width, height):
    """Front-to-back alpha compositing over binned splats.

    Per pixel: alpha_i = opacity_i * exp(-0.5 d^T conic d), clamped to 0.99,
    skipped below 1/255 (the bbox test rejects only pixels that skip rule
    would discard anyway); transmittance stops the walk below 1e-4. Also
    records per-pixel replay state (stop index, final transmittance) for
    the backward pass.
    """
    rgb = np.zeros((height, width, 3))
    depth_buf = np.zeros((height, width))
    alpha_buf = np.zeros((height, width))
    ncontrib = np.zeros((height, width), dtype=np.uint16)
    stop_at = np.zeros((height, width), dtype=np.int64)
    final_t = np.ones((height, width))
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        s0 = tile_start[t]
        s1 = tile_start[t + 1]
        if s0 == s1:
            continue
        ty = t // tiles_x
        tx = t % tiles_x
        y1 = min((ty + 1) * TILE, height)
        x1 = min((tx + 1) * TILE, width)
        for py in range(ty * TILE, y1):
            for px in range(tx * TILE, x1):
                tr = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                dsum = 0.0
                cnt = 0
                k = s0
                while k < s1:
                    i = items[k]
                    k += 1
                    if px < bbox[i, 0] or px > bbox[i, 1] or py < bbox[i, 2] or py > bbox[i, 3]:
                        continue
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    sigma = 0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) + conic[i, 1] * dx * dy
                    if sigma < 0.0:
                        continue
                    a = opacity[i] * np.exp(-sigma)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    w = tr * a
                    r += w * colors[i, 0]
                    g += w * colors[i, 1]
                    b += w * colors[i, 2]
                    dsum += w * depth[i]
                    tr *= 1.0 - a
                    cnt += 1
                    if tr < T_STOP:
                        break
                rgb[py, px, 0] = r
                rgb[py, px, 1] = g
                rgb[py, px, 2] = b
                acc = 1.0 - tr
                alpha_buf[py, px] = acc
                if cnt > 0:
                    depth_buf[py, px] = dsum / acc
                ncontrib[py, px] = cnt
                stop_at[py, px] = k
                final_t[py, px] = tr
    return rgb, depth_buf, alpha_buf, ncontrib, stop_at, final_t


@njit(**_JIT)
def composite_backward(tile_start, items, mean2d, conic, bbox, depth, opacity, colors,
                       stop_at, final_t, ncontrib, dl_drgb, width, height,
                       d_mean2d, d_conic, d_opacity, d_color):
    """Reverse-order replay of the forward walk, accumulating per-splat
    gradients of the photometric loss w.r.t. screen-space quantities.

    Transmittance before each contributor is recovered by dividing the
    running value by (1 - alpha); alpha is bounded by 0.99 so the division
    stays well-conditioned.
    """
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        s0 = tile_start[t]
        if s0 == tile_start[t + 1]:
            continue
        ty = t // tiles_x
        tx = t % tiles_x
        y1 = min((ty + 1) * TILE, height)
        x1 = min((tx + 1) * TILE, width)
        for py in range(ty * TILE, y1):
            for px in range(tx * TILE, x1):
                if ncontrib[py, px] == 0:
                    continue
                g0 = dl_drgb[py, px, 0]
                g1 = dl_drgb[py, px, 1]
                g2 = dl_drgb[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                tr_after = final_t[py, px]
                sr = 0.0
                sg = 0.0
                sb = 0.0
                k = stop_at[py, px] - 1
                while k >= s0:
                    i = items[k]
                    k -= 1
                    if px < bbox[i, 0] or px > bbox[i, 1] or py < bbox[i, 2] or py > bbox[i, 3]:
                        continue
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    ca = conic[i, 0]
                    cb = conic[i, 1]
                    cc = conic[i, 2]
                    sigma = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                    if sigma < 0.0:
                        continue
                    wgauss = np.exp(-sigma)
                    a_raw = opacity[i] * wgauss
                    a = a_raw
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    one_m = 1.0 - a
                    tr_before = tr_after / one_m
                    wc = tr_before * a
                    d_color[i, 0] += g0 * wc
                    d_color[i, 1] += g1 * wc
                    d_color[i, 2] += g2 * wc
                    # d(pixel)/d(alpha): own contribution minus re-scaled suffix
                    dl_da = (g0 * (tr_before * colors[i, 0] - sr / one_m)
                             + g1 * (tr_before * colors[i, 1] - sg / one_m)
                             + g2 * (tr_before * colors[i, 2] - sb / one_m))
                    if a_raw < ALPHA_CLAMP:
                        d_opacity[i] += dl_da * wgauss
                        dl_dw = dl_da * opacity[i]
                        dl_dsigma = -wgauss * dl_dw
                        d_mean2d[i, 0] -= dl_dsigma * (ca * dx + cb * dy)
                        d_mean2d[i, 1] -= dl_dsigma * (cb * dx + cc * dy)
                        d_conic[i, 0] += dl_dsigma * 0.5 * dx * dx
                        d_conic[i, 1] += dl_dsigma * dx * dy
                        d_conic[i, 2] += dl_dsigma * 0.5 * dy * dy
                    sr += wc * colors[i, 0]
                    sg += wc * colors[i, 1]
                    sb += wc * colors[i, 2]
                    tr_after = tr_before


@njit(**_JIT)
def chain_gradients(valid, positions, quats, log_scales, opacity_logits,
                    rwc, twc, fx, fy,
                    d_mean2d, d_conic, d_opacity,
                    d_position, d_quat, d_log_scale, d_logit):
    """Chain screen-space gradients back to the 3D gaussian parameters."""
    n = positions.shape[0]
    rg = np.empty((3, 3))
    ga_m = np.empty((2, 2))
    am = np.empty((2, 2))
    gv = np.empty((2, 2))
    jm = np.empty((2, 3))
    gc = np.empty((3, 3))
    gj = np.empty((2, 3))
    gm = np.empty((3, 3))
    gs = np.empty((3, 3))
    grg = np.empty((3, 3))
    cmat = np.empty((3, 3))
    mmat = np.empty((3, 3))
    tmp23 = np.empty((2, 3))
    tmp33 = np.empty((3, 3))
    dr = np.empty((4, 3, 3))
    for i in range(n):
        if not valid[i]:
            continue
        has_2d = (d_mean2d[i, 0] != 0.0 or d_mean2d[i, 1] != 0.0
                  or d_conic[i, 0] != 0.0 or d_conic[i, 1] != 0.0 or d_conic[i, 2] != 0.0
                  or d_opacity[i] != 0.0)
        if not has_2d:
            continue
        px = positions[i, 0]
        py = positions[i, 1]
        pz = positions[i, 2]
        x = rwc[0, 0] * px + rwc[0, 1] * py + rwc[0, 2] * pz + twc[0]
        y = rwc[1, 0] * px + rwc[1, 1] * py + rwc[1, 2] * pz + twc[1]
        z = rwc[2, 0] * px + rwc[2, 1] * py + rwc[2, 2] * pz + twc[2]
        invz = 1.0 / z
        invz2 = invz * invz

        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        _quat_to_rot(qw, qx, qy, qz, rg)
        s0 = np.exp(2.0 * log_scales[i, 0])
        s1 = np.exp(2.0 * log_scales[i, 1])
        s2 = np.exp(2.0 * log_scales[i, 2])

        # rebuild M (world cov) and C (camera cov)
        for r in range(3):
            for c in range(3):
                mmat[r, c] = (rg[r, 0] * rg[c, 0] * s0 + rg[r, 1] * rg[c, 1] * s1
                              + rg[r, 2] * rg[c, 2] * s2)
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a_ in range(3):
                    for b_ in range(3):
                        acc += rwc[r, a_] * mmat[a_, b_] * rwc[c, b_]
                cmat[r, c] = acc

        jm[0, 0] = fx * invz
        jm[0, 1] = 0.0
        jm[0, 2] = -fx * x * invz2
        jm[1, 0] = 0.0
        jm[1, 1] = fy * invz
        jm[1, 2] = -fy * y * invz2

        va = COV2D_REG
        vb = 0.0
        vc = COV2D_REG
        for a_ in range(3):
            for b_ in range(3):
                va += jm[0, a_] * cmat[a_, b_] * jm[0, b_]
                vb += jm[0, a_] * cmat[a_, b_] * jm[1, b_]
                vc += jm[1, a_] * cmat[a_, b_] * jm[1, b_]
        det = va * vc - vb * vb
        inv_det = 1.0 / det
        am[0, 0] = vc * inv_det
        am[0, 1] = -vb * inv_det
        am[1, 0] = -vb * inv_det
        am[1, 1] = va * inv_det

        # full-matrix gradient of the conic parameters (a, b, c)
        ga_m[0, 0] = d_conic[i, 0]
        ga_m[0, 1] = 0.5 * d_conic[i, 1]
        ga_m[1, 0] = 0.5 * d_conic[i, 1]
        ga_m[1, 1] = d_conic[i, 2]
        # dL/dV = -A G_A A
        for r in range(2):
            for c in range(2):
                acc = 0.0
                for a_ in range(2):
                    for b_ in range(2):
                        acc += am[r, a_] * ga_m[a_, b_] * am[b_, c]
                gv[r, c] = -acc

        # dL/dC = J^T G_V J
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a_ in range(2):
                    for b_ in range(2):
                        acc += jm[a_, r] * gv[a_, b_] * jm[b_, c]
                gc[r, c] = acc
        # dL/dJ = 2 G_V J C
        for r in range(2):
            for c in range(3):
                acc = 0.0
                for a_ in range(3):
                    acc += jm[r, a_] * cmat[a_, c]
                tmp23[r, c] = acc
        for r in range(2):
            for c in range(3):
                gj[r, c] = 2.0 * (gv[r, 0] * tmp23[0, c] + gv[r, 1] * tmp23[1, c])

        # dL/dM = rwc^T G_C rwc
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a_ in range(3):
                    for b_ in range(3):
                        acc += rwc[a_, r] * gc[a_, b_] * rwc[b_, c]
                gm[r, c] = acc

        # dL/dS via G_S = Rg^T G_M Rg (diagonal terms only feed log_scale)
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a_ in range(3):
                    for b_ in range(3):
                        acc += rg[a_, r] * gm[a_, b_] * rg[b_, c]
                gs[r, c] = acc
        d_log_scale[i, 0] = gs[0, 0] * 2.0 * s0
        d_log_scale[i, 1] = gs[1, 1] * 2.0 * s1
        d_log_scale[i, 2] = gs[2, 2] * 2.0 * s2

        # dL/dRg = 2 G_M Rg S
        for r in range(3):
            for c in range(3):
                acc = gm[r, 0] * rg[0, c] + gm[r, 1] * rg[1, c] + gm[r, 2] * rg[2, c]
                tmp33[r, c] = acc
        sdiag0 = s0
        sdiag1 = s1
        sdiag2 = s2
        for r in range(3):
            grg[r, 0] = 2.0 * tmp33[r, 0] * sdiag0
            grg[r, 1] = 2.0 * tmp33[r, 1] * sdiag1
            grg[r, 2] = 2.0 * tmp33[r, 2] * sdiag2

        # dR/d(q_hat) for the normalized quaternion
        w = qw / qn
        xq = qx / qn
        yq = qy / qn
        zq = qz / qn
        dr[0, 0, 0] = 0.0
        dr[0, 0, 1] = -zq
        dr[0, 0, 2] = yq
        dr[0, 1, 0] = zq
        dr[0, 1, 1] = 0.0
        dr[0, 1, 2] = -xq
        dr[0, 2, 0] = -yq
        dr[0, 2, 1] = xq
        dr[0, 2, 2] = 0.0
        dr[1, 0, 0] = 0.0
        dr[1, 0, 1] = yq
        dr[1, 0, 2] = zq
        dr[1, 1, 0] = yq
        dr[1, 1, 1] = -2.0 * xq
        dr[1, 1, 2] = -w
        dr[1, 2, 0] = zq
        dr[1, 2, 1] = w
        dr[1, 2, 2] = -2.0 * xq
        dr[2, 0, 0] = -2.0 * yq
        dr[2, 0, 1] = xq
        dr[2, 0, 2] = w
        dr[2, 1, 0] = xq
        dr[2, 1, 1] = 0.0
        dr[2, 1, 2] = zq
        dr[2, 2, 0] = -w
        dr[2, 2, 1] = zq
        dr[2, 2, 2] = -2.0 * yq
        dr[3, 0, 0] = -2.0 * zq
        dr[3, 0, 1] = -w
        dr[3, 0, 2] = xq
        dr[3, 1, 0] = w
        dr[3, 1, 1] = -2.0 * zq
        dr[3, 1, 2] = yq
        dr[3, 2, 0] = xq
        dr[3, 2, 1] = yq
        dr[3, 2, 2] = 0.0
        dq_hat0 = 0.0
        dq_hat1 = 0.0
        dq_hat2 = 0.0
        dq_hat3 = 0.0
        for r in range(3):
            for c in range(3):
                gval = grg[r, c]
                dq_hat0 += gval * 2.0 * dr[0, r, c]
                dq_hat1 += gval * 2.0 * dr[1, r, c]
                dq_hat2 += gval * 2.0 * dr[2, r, c]
                dq_hat3 += gval * 2.0 * dr[3, r, c]
        # through normalization: (I - q q^T)/|q|
        dot = dq_hat0 * w + dq_hat1 * xq + dq_hat2 * yq + dq_hat3 * zq
        d_quat[i, 0] = (dq_hat0 - dot * w) / qn
        d_quat[i, 1] = (dq_hat1 - dot * xq) / qn
        d_quat[i, 2] = (dq_hat2 - dot * yq) / qn
        d_quat[i, 3] = (dq_hat3 - dot * zq) / qn

        # position: through the projected mean and through J's depth terms
        du = d_mean2d[i, 0]
        dv = d_mean2d[i, 1]
        dx_cam = du * jm[0, 0] + gj[0, 2] * (-fx * invz2)
        dy_cam = dv * jm[1, 1] + gj[1, 2] * (-fy * invz2)
        dz_cam = (du * jm[0, 2] + dv * jm[1, 2]
                  + gj[0, 0] * (-fx * invz2)
                  + gj[1, 1] * (-fy * invz2)
                  + gj[0, 2] * (2.0 * fx * x * invz2 * invz)
                  + gj[1, 2] * (2.0 * fy * y * invz2 * invz))
        d_position[i, 0] = rwc[0, 0] * dx_cam + rwc[1, 0] * dy_cam + rwc[2, 0] * dz_cam
        d_position[i, 1] = rwc[0, 1] * dx_cam + rwc[1, 1] * dy_cam + rwc[2, 1] * dz_cam
        d_position[i, 2] = rwc[0, 2] * dx_cam + rwc[1, 2] * dy_cam + rwc[2, 2] * dz_cam

        op = 1.0 / (1.0 + np.exp(-opacity_logits[i]))
        d_logit[i] = d_opacity[i] * op * (1.0 - op)


@njit(**_JIT)
def raytrace(prim_types, prim_params, rcw, origin, fx, fy, cx, cy, width, height,
             t_min, t_max):
    """Per-pixel nearest-hit ray cast against analytic primitives.

    Primitive rows: type 0 = ground plane [z], 1 = sphere [cx,cy,cz,r],
    2 = axis-aligned box [cx,cy,cz,hx,hy,hz]. Ray directions carry unit
    camera-z so the hit parameter t equals pinhole z-depth.
    """
    depth = np.zeros((height, width))
    prim_id = np.full((height, width), -1, dtype=np.int32)
    hit_xyz = np.zeros((height, width, 3))
    normal = np.zeros((height, width, 3))
    n_prims = prim_types.shape[0]
    ox = origin[0]
    oy = origin[1]
    oz = origin[2]
    for py in range(height):
        for px in range(width):
            dcx = (px - cx) / fx
            dcy = (py - cy) / fy
            dx = rcw[0, 0] * dcx + rcw[0, 1] * dcy + rcw[0, 2]
            dy = rcw[1, 0] * dcx + rcw[1, 1] * dcy + rcw[1, 2]
            dz = rcw[2, 0] * dcx + rcw[2, 1] * dcy + rcw[2, 2]
            best_t = t_max
            best_p = -1
            nxb = 0.0
            nyb = 0.0
            nzb = 0.0
            for p in range(n_prims):
                ptype = prim_types[p]
                if ptype == 0:
                    plane_z = prim_params[p, 0]
                    if dz != 0.0:
                        t = (plane_z - oz) / dz
                        if t_min < t < best_t:
                            best_t = t
                            best_p = p
                            nxb = 0.0
                            nyb = 0.0
                            nzb = 1.0 if oz > plane_z else -1.0
                elif ptype == 1:
                    sx = ox - prim_params[p, 0]
                    sy = oy - prim_params[p, 1]
                    sz = oz - prim_params[p, 2]
                    rr = prim_params[p, 3]
                    a_q = dx * dx + dy * dy + dz * dz
                    b_q = 2.0 * (sx * dx + sy * dy + sz * dz)
                    c_q = sx * sx + sy * sy + sz * sz - rr * rr
                    disc = b_q * b_q - 4.0 * a_q * c_q
                    if disc > 0.0:
                        sq = np.sqrt(disc)
                        t = (-b_q - sq) / (2.0 * a_q)
                        if t <= t_min:
                            t = (-b_q + sq) / (2.0 * a_q)
                        if t_min < t < best_t:
                            best_t = t
                            best_p = p
                            hx = ox + t * dx - prim_params[p, 0]
                            hy = oy + t * dy - prim_params[p, 1]
                            hz = oz + t * dz - prim_params[p, 2]
                            inv = 1.0 / np.sqrt(hx * hx + hy * hy + hz * hz)
                            nxb = hx * inv
                            nyb = hy * inv
                            nzb = hz * inv
                else:
                    bx = prim_params[p, 0]
                    by = prim_params[p, 1]
                    bz = prim_params[p, 2]
                    hx_ = prim_params[p, 3]
                    hy_ = prim_params[p, 4]
                    hz_ = prim_params[p, 5]
                    tlo = t_min
                    thi = best_t
                    axis = -1
                    sign = 0.0
                    ok = True
                    for ax in range(3):
                        if ax == 0:
                            o_ = ox - bx
                            d_ = dx
                            h_ = hx_
                        elif ax == 1:
                            o_ = oy - by
                            d_ = dy
                            h_ = hy_
                        else:
                            o_ = oz - bz
                            d_ = dz
                            h_ = hz_
                        if d_ == 0.0:
                            if o_ < -h_ or o_ > h_:
                                ok = False
                                break
                        else:
                            inv_d = 1.0 / d_
                            t0 = (-h_ - o_) * inv_d
                            t1 = (h_ - o_) * inv_d
                            s_ = -1.0
                            if t0 > t1:
                                tswap = t0
                                t0 = t1
                                t1 = tswap
                                s_ = 1.0
                            if t0 > tlo:
                                tlo = t0
                                axis = ax
                                sign = s_
                            if t1 < thi:
                                thi = t1
                            if tlo > thi:
                                ok = False
                                break
                    if ok and axis >= 0 and tlo < best_t and tlo > t_min:
                        best_t = tlo
                        best_p = p
                        nxb = 0.0
                        nyb = 0.0
                        nzb = 0.0
                        if axis == 0:
                            nxb = sign
                        elif axis == 1:
                            nyb = sign
                        else:
                            nzb = sign
            if best_p >= 0:
                depth[py, px] = best_t
                prim_id[py, px] = best_p
                hit_xyz[py, px, 0] = ox + best_t * dx
                hit_xyz[py, px, 1] = oy + best_t * dy
                hit_xyz[py, px, 2] = oz + best_t * dz
                normal[py, px, 0] = nxb
                normal[py, px, 1] = nyb
                normal[py, px, 2] = nzb
    return depth, prim_id, hit_xyz, normal
