"""Numba kernels for per-pixel front-to-back compositing and its adjoint.

Splats arrive already depth-sorted and binned into tiles as a flat list of
(tile, splat) pairs. A pixel only considers splats whose square 3-sigma screen
box contains it, so the output does not depend on how pixels are grouped into
tiles. Each kernel call processes a subset of tiles and writes disjoint pixels,
which lets several threads share the output buffers.
"""
from __future__ import annotations

import numpy as np
from numba import njit

W_MAX = 0.999


@njit(cache=True, nogil=True)
def composite_tiles(tiles, tile_start, tile_end, pair_splat,
                    means, conics, opacities, colors, depths, radii,
                    background, width, height, tile_size, tiles_x,
                    alpha_cutoff, transmittance_stop,
                    out_color, out_depth_acc, out_T, out_last):
    for ti in range(tiles.shape[0]):
        tile = tiles[ti]
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_start[tile]
        end = tile_end[tile]
        y0 = ty * tile_size
        x0 = tx * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dacc = 0.0
                last = start
                for j in range(start, end):
                    k = pair_splat[j]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    r = radii[k]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                                    + conics[k, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    w = opacities[k] * np.exp(power)
                    if w < alpha_cutoff:
                        continue
                    if w > W_MAX:
                        w = W_MAX
                    wt = w * T
                    c0 += wt * colors[k, 0]
                    c1 += wt * colors[k, 1]
                    c2 += wt * colors[k, 2]
                    dacc += wt * depths[k]
                    T = T * (1.0 - w)
                    last = j + 1
                    if T < transmittance_stop:
                        break
                out_color[py, px, 0] = c0 + T * background[0]
                out_color[py, px, 1] = c1 + T * background[1]
                out_color[py, px, 2] = c2 + T * background[2]
                out_depth_acc[py, px] = dacc
                out_T[py, px] = T
                out_last[py, px] = last


@njit(cache=True, nogil=True)
def composite_tiles_backward(tiles, tile_start, pair_splat,
                             means, conics, opacities, colors, depths, radii,
                             background, width, height, tile_size, tiles_x,
                             alpha_cutoff, final_T, last_index,
                             grad_color, grad_depth_acc, grad_T,
                             g_mean, g_conic, g_opacity, g_color, g_depth):
    """Adjoint of :func:`composite_tiles`; gradients accumulate per (tile, splat) pair."""
    for ti in range(tiles.shape[0]):
        tile = tiles[ti]
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_start[tile]
        y0 = ty * tile_size
        x0 = tx * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gd = grad_depth_acc[py, px]
                gt = grad_T[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and gt == 0.0:
                    continue
                T_final = final_T[py, px]
                T = T_final
                rest0 = background[0]
                rest1 = background[1]
                rest2 = background[2]
                rest_d = 0.0
                for j in range(last_index[py, px] - 1, start - 1, -1):
                    k = pair_splat[j]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    r = radii[k]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                                    + conics[k, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    g = np.exp(power)
                    w = opacities[k] * g
                    if w < alpha_cutoff:
                        continue
                    clamped = w > W_MAX
                    if clamped:
                        w = W_MAX
                    one_minus = 1.0 - w
                    T_i = T / one_minus
                    wt = w * T_i
                    ck0 = colors[k, 0]
                    ck1 = colors[k, 1]
                    ck2 = colors[k, 2]
                    zk = depths[k]
                    dL_dw = T_i * (gc0 * (ck0 - rest0) + gc1 * (ck1 - rest1) + gc2 * (ck2 - rest2))
                    dL_dw += gd * T_i * (zk - rest_d)
                    dL_dw -= gt * T_final / one_minus
                    g_color[j, 0] += wt * gc0
                    g_color[j, 1] += wt * gc1
                    g_color[j, 2] += wt * gc2
                    g_depth[j] += wt * gd
                    rest0 = w * ck0 + one_minus * rest0
                    rest1 = w * ck1 + one_minus * rest1
                    rest2 = w * ck2 + one_minus * rest2
                    rest_d = w * zk + one_minus * rest_d
                    T = T_i
                    if clamped:
                        continue
                    g_opacity[j] += dL_dw * g
                    gp = dL_dw * w
                    a = conics[k, 0]
                    b = conics[k, 1]
                    c = conics[k, 2]
                    g_mean[j, 0] += gp * (a * dx + b * dy)
                    g_mean[j, 1] += gp * (b * dx + c * dy)
                    g_conic[j, 0] += gp * (-0.5 * dx * dx)
                    g_conic[j, 1] += gp * (-dx * dy)
                    g_conic[j, 2] += gp * (-0.5 * dy * dy)
