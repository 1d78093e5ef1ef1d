"""numba compositing kernels (one parallel loop over 16x16 tiles)."""

import math

import numpy as np
from numba import njit, prange

from .projection import ALPHA_MAX, ALPHA_MIN

TILE = 16
T_MIN = 1e-4


# packed record layout: mx, my, A, B, C, opacity, log_cut, r, g, b, depth
NREC = 11


@njit(parallel=True, cache=True, nogil=True)
def _forward(rec, offsets, entries, width, height, tiles_x, out_color, out_depth, out_occ, out_T, out_last):
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        n = offsets[tile + 1] - start
        # contiguous copy of this tile's records keeps the inner loop sequential in memory
        loc = np.empty((n, NREC))
        for k in range(n):
            loc[k, :] = rec[entries[start + k], :]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dd = 0.0
                oo = 0.0
                last = start
                for k in range(n):
                    dx = px - loc[k, 0]
                    dy = py - loc[k, 1]
                    power = -0.5 * (loc[k, 2] * dx * dx + loc[k, 4] * dy * dy) - loc[k, 3] * dx * dy
                    if power > 0.0 or power < loc[k, 6]:
                        continue
                    a = loc[k, 5] * math.exp(power)
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    cr += loc[k, 7] * w
                    cg += loc[k, 8] * w
                    cb += loc[k, 9] * w
                    dd += loc[k, 10] * w
                    oo += w
                    T *= 1.0 - a
                    last = start + k + 1
                    if T < T_MIN:
                        break
                out_color[py, px, 0] = cr
                out_color[py, px, 1] = cg
                out_color[py, px, 2] = cb
                out_depth[py, px] = dd
                out_occ[py, px] = oo
                out_T[py, px] = T
                out_last[py, px] = last


@njit(parallel=True, cache=True, nogil=True)
def _backward(rec, offsets, entries, width, height, tiles_x, final_T, last_idx, g_color, g_depth, g_occ, out):
    # out[e] = (d mx, d my, d A, d B, d C, d opacity, d r, d g, d b, d depth) per tile entry
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        n = offsets[tile + 1] - start
        loc = np.empty((n, NREC))
        for k in range(n):
            loc[k, :] = rec[entries[start + k], :]
        acc = np.zeros((n, 10))
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                gr = g_color[py, px, 0]
                gg = g_color[py, px, 1]
                gb = g_color[py, px, 2]
                gd = g_depth[py, px]
                go = g_occ[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and go == 0.0:
                    continue
                T = final_T[py, px]
                S = 0.0
                for k in range(last_idx[py, px] - 1 - start, -1, -1):
                    dx = px - loc[k, 0]
                    dy = py - loc[k, 1]
                    A = loc[k, 2]
                    B = loc[k, 3]
                    C = loc[k, 4]
                    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                    if power > 0.0 or power < loc[k, 6]:
                        continue
                    G = math.exp(power)
                    a = loc[k, 5] * G
                    if a < ALPHA_MIN:
                        continue
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    T = T / (1.0 - a)
                    w = a * T
                    val = loc[k, 7] * gr + loc[k, 8] * gg + loc[k, 9] * gb + loc[k, 10] * gd + go
                    acc[k, 6] += gr * w
                    acc[k, 7] += gg * w
                    acc[k, 8] += gb * w
                    acc[k, 9] += gd * w
                    dL_da = T * val - S / (1.0 - a)
                    S += val * w
                    if not clamped:
                        dL_dp = dL_da * a
                        acc[k, 5] += dL_da * G
                        acc[k, 0] += dL_dp * (A * dx + B * dy)
                        acc[k, 1] += dL_dp * (B * dx + C * dy)
                        acc[k, 2] += dL_dp * (-0.5 * dx * dx)
                        acc[k, 3] += dL_dp * (-dx * dy)
                        acc[k, 4] += dL_dp * (-0.5 * dy * dy)
        for k in range(n):
            out[start + k, :] = acc[k, :]


def _log_cut(opac):
    # below this exponent alpha is under the cutoff; margin keeps the exact test authoritative
    return np.log(ALPHA_MIN / opac) - 1e-6


def _records(means2d, conics, opac, colors, depths):
    return np.ascontiguousarray(np.column_stack([means2d, conics, opac, _log_cut(opac), colors, depths]))


def forward(means2d, conics, opac, colors, depths, offsets, entries, width, height, tiles_x):
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    occ = np.zeros((height, width))
    final_T = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    _forward(_records(means2d, conics, opac, colors, depths), offsets, entries, width, height, tiles_x,
             color, depth, occ, final_T, last)
    return color, depth, occ, final_T, last


def backward(means2d, conics, opac, colors, depths, offsets, entries, width, height, tiles_x,
             final_T, last, g_color, g_depth, g_occ):
    out = np.zeros((len(entries), 10))
    _backward(_records(means2d, conics, opac, colors, depths), offsets, entries, width, height, tiles_x,
              final_T, last, np.ascontiguousarray(g_color, dtype=np.float64),
              np.ascontiguousarray(g_depth, dtype=np.float64),
              np.ascontiguousarray(g_occ, dtype=np.float64), out)
    return out
