"""Tile-based rasterization of a Gaussian map and its analytic backward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import _accel
from .projection import (ALPHA_MAX, ALPHA_MIN, Projection, project_backward,
                         project_gaussians)

if _accel.BACKEND == "numba":
    from . import kernels_numba as _kernels
else:
    from . import kernels_numpy as _kernels

TILE = 16


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W)
    occupancy: np.ndarray  # (H, W)
    # forward state reused by the backward pass
    projection: Projection | None = field(default=None, repr=False)
    bins: tuple | None = field(default=None, repr=False)
    final_T: np.ndarray | None = field(default=None, repr=False)
    last: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ResidualGrad:
    """What an objective hands back to the rasterizer: value and image-space derivatives."""

    value: float
    d_color: np.ndarray
    d_depth: np.ndarray | None = None
    d_occupancy: np.ndarray | None = None
    d_a: float = 0.0
    d_b: float = 0.0


@dataclass
class PoseGradients:
    d_twist: np.ndarray    # (6,) = (d_omega, d_v), left update
    d_a: float = 0.0
    d_b: float = 0.0


@dataclass
class MapGradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    means2d_norm: np.ndarray  # screen-space positional gradient magnitude (NDC units)
    visible: np.ndarray


def bin_projection(proj, width, height):
    """Assign depth-sorted projections to the tiles that their cutoff radius touches.

    Returns ``(offsets, entries, tiles_x)`` where ``entries[offsets[t]:offsets[t+1]]``
    are projection ranks for tile ``t`` in front-to-back order.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    if len(proj) == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x
    u, v, r = proj.means2d[:, 0], proj.means2d[:, 1], proj.radii
    x0 = np.clip(np.ceil(u - r), 0, width - 1).astype(np.int64) // TILE
    x1 = np.clip(np.floor(u + r), 0, width - 1).astype(np.int64) // TILE
    y0 = np.clip(np.ceil(v - r), 0, height - 1).astype(np.int64) // TILE
    y1 = np.clip(np.floor(v + r), 0, height - 1).astype(np.int64) // TILE
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    rank = np.repeat(np.arange(len(proj)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[rank] + local % nx[rank]
    ty = y0[rank] + local // nx[rank]
    tile = ty * tiles_x + tx
    order = np.argsort(tile, kind="stable")
    entries = rank[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(tile, minlength=n_tiles))
    return offsets, entries.astype(np.int64), tiles_x


def rasterize(gmap, pose, K, near=None):
    """Render color, depth and occupancy images of ``gmap`` seen from ``pose``."""
    if len(gmap) == 0:
        raise ValueError("cannot rasterize an empty map")
    proj = project_gaussians(gmap, pose, K, near)
    bins = bin_projection(proj, K.width, K.height)
    offsets, entries, tiles_x = bins
    color, depth, occ, final_T, last = _kernels.forward(
        proj.means2d, proj.conics, proj.opacities, proj.colors, proj.depths,
        offsets, entries, K.width, K.height, tiles_x)
    return RenderOutput(color, depth, occ, proj, bins, final_T, last)


def backward(render, gmap, pose, K, d_color, d_depth=None, d_occupancy=None, want_map=True):
    """Reverse pass from image-space derivatives to pose twist and map parameters."""
    H, W = K.height, K.width
    d_depth = np.zeros((H, W)) if d_depth is None else d_depth
    d_occupancy = np.zeros((H, W)) if d_occupancy is None else d_occupancy
    proj = render.projection
    offsets, entries, tiles_x = render.bins
    per_entry = _kernels.backward(
        proj.means2d, proj.conics, proj.opacities, proj.colors, proj.depths,
        offsets, entries, W, H, tiles_x, render.final_T, render.last,
        d_color, d_depth, d_occupancy)
    P = len(proj)
    # fixed-order reduction of per-tile buffers keeps the sum independent of threading
    g = np.stack([np.bincount(entries, weights=per_entry[:, k], minlength=P) for k in range(10)], axis=1)
    (d_omega, d_v), params = project_backward(
        proj, gmap, pose, K, g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9], g[:, 9], want_map=want_map)
    return np.concatenate([d_omega, d_v]), params


def rasterize_with_gradients(gmap, pose, K, objective, want_map=True, near=None):
    """Render, evaluate ``objective`` on the result and backpropagate.

    ``objective`` is any object with ``evaluate(render) -> ResidualGrad``. Sort order
    and culling are treated as locally constant. Returns
    ``(render, loss, PoseGradients, MapGradients | None)``.
    """
    render = rasterize(gmap, pose, K, near)
    res = objective.evaluate(render)
    d_twist, params = backward(render, gmap, pose, K, res.d_color, res.d_depth, res.d_occupancy,
                               want_map=want_map)
    map_grads = MapGradients(**params) if params is not None else None
    return render, res.value, PoseGradients(d_twist, res.d_a, res.d_b), map_grads


@dataclass(frozen=True)
class Projected2DGaussian:
    mean: np.ndarray
    cov: np.ndarray        # (2, 2) after dilation
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int = 0


def project_gaussian(p, pose, K, near_plane=0.01, source_index=0):
    """Project one primitive; returns ``None`` when it is culled."""
    from ..splat import GaussianMap

    gm = GaussianMap.from_primitives([p], scene_scale=1.0)
    proj = project_gaussians(gm, pose, K, near=near_plane)
    if len(proj) == 0:
        return None
    a, b, c = proj.cov2d[0]
    return Projected2DGaussian(proj.means2d[0].copy(), np.array([[a, b], [b, c]]),
                               float(proj.depths[0]), float(proj.opacities[0]),
                               proj.colors[0].copy(), source_index)


def alpha_at(g, pixel):
    """Effective opacity of a projected Gaussian at a pixel (clamped, with the 1/255 cutoff)."""
    d = np.asarray(pixel, dtype=np.float64) - g.mean
    try:
        inv = np.linalg.inv(g.cov)
    except np.linalg.LinAlgError:
        return 0.0
    a = g.opacity * math.exp(-0.5 * float(d @ inv @ d))
    if a < ALPHA_MIN:
        return 0.0
    return min(a, ALPHA_MAX)


