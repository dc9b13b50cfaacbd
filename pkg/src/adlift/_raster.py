"""Per-tile compositing kernels.

Each kernel call handles a contiguous range of tiles and writes only to
that range's pixels and partial-gradient slots, so any split of the tile
range across threads gives bitwise-identical results.
"""

from __future__ import annotations

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@njit(cache=True, nogil=True)
def _tile_bounds(t, tile, width, height):
    tiles_x = (width + tile - 1) // tile
    ty, tx = t // tiles_x, t % tiles_x
    x0, y0 = tx * tile, ty * tile
    return x0, y0, min(x0 + tile, width), min(y0 + tile, height)


@njit(cache=True, nogil=True)
def _splat_hits_tile(mx, my, r, x0, y0, x1, y1):
    # distance from splat mean to the pixel-center rectangle [x0, x1-1] x [y0, y1-1]
    dx = 0.0
    if mx < x0:
        dx = x0 - mx
    elif mx > x1 - 1:
        dx = mx - (x1 - 1)
    dy = 0.0
    if my < y0:
        dy = y0 - my
    elif my > y1 - 1:
        dy = my - (y1 - 1)
    return dx * dx + dy * dy <= r * r


@njit(cache=True, nogil=True)
def forward_tiles(t_start, t_end, tile, width, height, means, conics, opac, colors, radii,
                  background, image, t_final, n_contrib):
    n = means.shape[0]
    lst = np.empty(n, dtype=np.int64)
    for t in range(t_start, t_end):
        x0, y0, x1, y1 = _tile_bounds(t, tile, width, height)
        m = 0
        for i in range(n):
            if radii[i] > 0.0 and _splat_hits_tile(means[i, 0], means[i, 1], radii[i], x0, y0, x1, y1):
                lst[m] = i
                m += 1
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for k in range(m):
                    i = lst[k]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    a = opac[i] * np.exp(-0.5 * q)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    test_t = T * (1.0 - a)
                    if test_t < T_MIN:
                        break
                    w = a * T
                    c0 += colors[i, 0] * w
                    c1 += colors[i, 1] * w
                    c2 += colors[i, 2] * w
                    T = test_t
                    last = k + 1
                image[py, px, 0] = c0 + background[0] * T
                image[py, px, 1] = c1 + background[1] * T
                image[py, px, 2] = c2 + background[2] * T
                t_final[py, px] = T
                n_contrib[py, px] = last


@njit(cache=True, nogil=True)
def backward_tiles(t_start, t_end, tile, width, height, means, conics, opac, colors, radii,
                   background, dl_dc, partial):
    """Accumulate per-splat gradients into ``partial[t]`` for each tile ``t``.

    partial[t, i] = d/d(mean_x, mean_y, conic_a, conic_b, conic_c, opacity,
    color_r, color_g, color_b) of splat i, summed over the tile's pixels in
    row-major order.
    """
    n = means.shape[0]
    lst = np.empty(n, dtype=np.int64)
    alphas = np.empty(n, dtype=np.float64)
    trans = np.empty(n, dtype=np.float64)
    gvals = np.empty(n, dtype=np.float64)
    clamped = np.empty(n, dtype=np.bool_)
    used = np.empty(n, dtype=np.int64)
    for t in range(t_start, t_end):
        x0, y0, x1, y1 = _tile_bounds(t, tile, width, height)
        m = 0
        for i in range(n):
            if radii[i] > 0.0 and _splat_hits_tile(means[i, 0], means[i, 1], radii[i], x0, y0, x1, y1):
                lst[m] = i
                m += 1
        acc = partial[t]
        for py in range(y0, y1):
            for px in range(x0, x1):
                g0 = dl_dc[py, px, 0]
                g1 = dl_dc[py, px, 1]
                g2 = dl_dc[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                # replay the forward pass
                T = 1.0
                u = 0
                for k in range(m):
                    i = lst[k]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    gq = np.exp(-0.5 * q)
                    a = opac[i] * gq
                    cl = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        cl = True
                    if a < ALPHA_MIN:
                        continue
                    test_t = T * (1.0 - a)
                    if test_t < T_MIN:
                        break
                    used[u] = i
                    alphas[u] = a
                    trans[u] = T
                    gvals[u] = gq
                    clamped[u] = cl
                    u += 1
                    T = test_t
                # suffix: colour contributed behind splat k, background included
                s0 = background[0] * T
                s1 = background[1] * T
                s2 = background[2] * T
                for k in range(u - 1, -1, -1):
                    i = used[k]
                    a = alphas[k]
                    Tk = trans[k]
                    w = a * Tk
                    acc[i, 6] += g0 * w
                    acc[i, 7] += g1 * w
                    acc[i, 8] += g2 * w
                    da = (g0 * (colors[i, 0] * Tk - s0 / (1.0 - a))
                          + g1 * (colors[i, 1] * Tk - s1 / (1.0 - a))
                          + g2 * (colors[i, 2] * Tk - s2 / (1.0 - a)))
                    s0 += colors[i, 0] * w
                    s1 += colors[i, 1] * w
                    s2 += colors[i, 2] * w
                    if clamped[k]:
                        continue
                    acc[i, 5] += da * gvals[k]
                    dq = -0.5 * a * da
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    ca = conics[i, 0]
                    cb = conics[i, 1]
                    cc = conics[i, 2]
                    acc[i, 0] += dq * (-2.0) * (ca * dx + cb * dy)
                    acc[i, 1] += dq * (-2.0) * (cb * dx + cc * dy)
                    acc[i, 2] += dq * dx * dx
                    acc[i, 3] += dq * 2.0 * dx * dy
                    acc[i, 4] += dq * dy * dy


@njit(cache=True, nogil=True)
def weights_at_pixel(px, py, means, conics, opac, radii):
    """Blend weights (sorted order) and final transmittance for one pixel."""
    n = means.shape[0]
    w = np.zeros(n)
    T = 1.0
    for i in range(n):
        if radii[i] <= 0.0:
            continue
        dx = px - means[i, 0]
        dy = py - means[i, 1]
        q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
        a = opac[i] * np.exp(-0.5 * q)
        if a > ALPHA_MAX:
            a = ALPHA_MAX
        if a < ALPHA_MIN:
            continue
        test_t = T * (1.0 - a)
        if test_t < T_MIN:
            break
        w[i] = a * T
        T = test_t
    return w, T
