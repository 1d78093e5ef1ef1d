"""Pure-numpy compositing kernels, vectorized over (Gaussians in tile) x (pixels in tile).

Same contract as :mod:`splatloc.render.kernels_numba`; selected with
``SPLATLOC_BACKEND=numpy``.
"""

import numpy as np

from .projection import ALPHA_MAX, ALPHA_MIN

TILE = 16
T_MIN = 1e-4


def _tile_pixels(tile, tiles_x, width, height):
    ty, tx = divmod(tile, tiles_x)
    ys = np.arange(ty * TILE, min(ty * TILE + TILE, height))
    xs = np.arange(tx * TILE, min(tx * TILE + TILE, width))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _tile_alpha(g, px, py, means2d, conics, opac):
    """Per (entry, pixel) alpha, masks and transmittance, mirroring the sequential loop."""
    dx = px[None, :] - means2d[g, 0][:, None]
    dy = py[None, :] - means2d[g, 1][:, None]
    A, B, C = conics[g, 0][:, None], conics[g, 1][:, None], conics[g, 2][:, None]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    G = np.exp(np.minimum(power, 0.0))
    raw = opac[g][:, None] * G
    valid = (power <= 0.0) & (raw >= ALPHA_MIN)
    clamped = valid & (raw > ALPHA_MAX)
    a = np.where(valid, np.minimum(raw, ALPHA_MAX), 0.0)
    one_minus = 1.0 - a
    T_after = np.cumprod(one_minus, axis=0)
    T_before = np.vstack([np.ones((1, len(px))), T_after[:-1]])
    used = valid & (T_before >= T_MIN)
    return dx, dy, G, a, valid, clamped, used, T_before, T_after


def forward(means2d, conics, opac, colors, depths, offsets, entries, width, height, tiles_x):
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    occ = np.zeros((height, width))
    final_T = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    for tile in range(len(offsets) - 1):
        py, px = _tile_pixels(tile, tiles_x, width, height)
        start, end = offsets[tile], offsets[tile + 1]
        last[py, px] = start
        if end == start:
            continue
        g = entries[start:end]
        _, _, _, a, _, _, used, T_before, T_after = _tile_alpha(g, px, py, means2d, conics, opac)
        w = np.where(used, a * T_before, 0.0)
        color[py, px] = w.T @ colors[g]
        depth[py, px] = w.T @ depths[g]
        occ[py, px] = w.sum(axis=0)
        any_used = used.any(axis=0)
        last_pos = len(g) - 1 - np.argmax(used[::-1], axis=0)
        final_T[py, px] = np.where(any_used, T_after[last_pos, np.arange(len(px))], 1.0)
        last[py, px] = np.where(any_used, start + last_pos + 1, start)
    return color, depth, occ, final_T, last


def backward(means2d, conics, opac, colors, depths, offsets, entries, width, height, tiles_x,
             final_T, last, g_color, g_depth, g_occ):
    out = np.zeros((len(entries), 10))
    for tile in range(len(offsets) - 1):
        start, end = offsets[tile], offsets[tile + 1]
        if end == start:
            continue
        py, px = _tile_pixels(tile, tiles_x, width, height)
        g = entries[start:end]
        dx, dy, G, a, valid, clamped, used, T_before, _ = _tile_alpha(g, px, py, means2d, conics, opac)
        gc = g_color[py, px]                # (m, 3)
        gd = g_depth[py, px]
        go = g_occ[py, px]
        w = np.where(used, a * T_before, 0.0)
        val = colors[g] @ gc.T + depths[g][:, None] * gd[None, :] + go[None, :]
        contrib = val * w
        suffix = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
        dL_da = np.where(used, T_before * val - suffix / (1.0 - a), 0.0)
        free = used & ~clamped
        dL_dp = np.where(free, dL_da * a, 0.0)
        A, B, C = conics[g, 0][:, None], conics[g, 1][:, None], conics[g, 2][:, None]
        blk = out[start:end]
        blk[:, 0] = (dL_dp * (A * dx + B * dy)).sum(axis=1)
        blk[:, 1] = (dL_dp * (B * dx + C * dy)).sum(axis=1)
        blk[:, 2] = (dL_dp * (-0.5 * dx * dx)).sum(axis=1)
        blk[:, 3] = (dL_dp * (-dx * dy)).sum(axis=1)
        blk[:, 4] = (dL_dp * (-0.5 * dy * dy)).sum(axis=1)
        blk[:, 5] = np.where(free, dL_da * G, 0.0).sum(axis=1)
        blk[:, 6:9] = w @ gc
        blk[:, 9] = w @ gd
    return out
