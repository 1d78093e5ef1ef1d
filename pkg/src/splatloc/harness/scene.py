"""Seeded synthetic scenes: random Gaussians in a box seen by a ring of cameras."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geom import CameraIntrinsics, Pose, matrix_to_quat
from ..mapping import TrainView
from ..render import rasterize
from ..splat import ColoredPointCloud, GaussianMap, logit

COLOR_SCHEMES = ("random", "textured-grid")


@dataclass
class SceneSpec:
    primitive_count: int = 500
    extent: float = 1.0            # half-width of the box holding the Gaussian centers
    color_scheme: str = "textured-grid"
    ring_radius: float = 3.0
    ring_height: float = 0.8
    camera_count: int = 8
    width: int = 128
    height: int = 128
    fov_deg: float = 53.0
    sigma_range: tuple = (0.06, 0.18)   # per-axis standard deviation, fraction of extent
    opacity_range: tuple = (0.6, 0.95)
    checker_cell: float = 0.5           # fraction of extent
    # share of the primitives spent on a textured shell around the whole rig, so that
    # every view is covered the way a real room or landscape covers the frame
    backdrop_fraction: float = 0.5
    backdrop_radius: float = 6.0
    min_occupancy: float = 0.5          # oracle depth is invalid below this coverage
    seed: int = 0

    def __post_init__(self):
        if self.primitive_count < 1:
            raise ValueError("primitive_count must be >= 1")
        if self.camera_count < 1:
            raise ValueError("camera_count must be >= 1")
        if self.color_scheme not in COLOR_SCHEMES:
            raise ValueError(f"color_scheme must be one of {COLOR_SCHEMES}")
        if self.extent <= 0 or self.ring_radius <= 0:
            raise ValueError("extent and ring_radius must be positive")
        if not 0.0 <= self.backdrop_fraction < 1.0:
            raise ValueError("backdrop_fraction must lie in [0, 1)")
        if self.backdrop_fraction > 0 and self.backdrop_radius <= self.ring_radius:
            raise ValueError("backdrop_radius must exceed ring_radius")
        self.sigma_range = tuple(self.sigma_range)
        self.opacity_range = tuple(self.opacity_range)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown scene option(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        d["opacity_range"] = list(self.opacity_range)
        return d

    def intrinsics(self):
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg)


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _checker_colors(means, spec, rng):
    cell = spec.checker_cell * spec.extent
    idx = np.floor(means / cell).astype(np.int64)
    parity = (idx.sum(axis=1) % 2).astype(bool)
    # low-frequency tint keeps neighbouring cells of equal parity distinguishable
    tint = 0.5 + 0.5 * np.sin(means @ np.array([[1.3, 0.4, -0.7], [-0.5, 1.1, 0.6], [0.8, -0.9, 1.2]])
                              / spec.extent)
    bright = 0.25 + 0.7 * tint
    dark = 0.05 + 0.25 * tint[:, ::-1]
    c = np.where(parity[:, None], bright, dark) + rng.uniform(-0.03, 0.03, means.shape)
    return np.clip(c, 0.0, 1.0)


def ring_pose(spec, angle, height=None):
    h = spec.ring_height if height is None else height
    eye = np.array([spec.ring_radius * math.cos(angle), spec.ring_radius * math.sin(angle), h])
    return Pose.look_at(eye, np.zeros(3))


def ring_poses(spec, count=None, offset=0.0, heights=None):
    count = spec.camera_count if count is None else count
    out = []
    for i in range(count):
        h = None if heights is None else heights[i]
        out.append(ring_pose(spec, 2.0 * math.pi * (i + offset) / count, h))
    return out


def _backdrop(spec, rng, n):
    """Flat discs on a Fibonacci sphere, their normals pointing at the center."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    normal = np.column_stack([np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z])
    means = spec.backdrop_radius * normal * rng.uniform(0.97, 1.03, (n, 1))
    spacing = spec.backdrop_radius * math.sqrt(4.0 * math.pi / n)
    # rotation whose third column is the normal
    t1 = np.cross(normal, [0.0, 0.0, 1.0])
    flat = np.linalg.norm(t1, axis=1) < 1e-6
    t1[flat] = [1.0, 0.0, 0.0]
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normal, t1)
    R = np.stack([t1, t2, normal], axis=2)
    quats = np.array([matrix_to_quat(r) for r in R])
    log_scales = np.log(np.column_stack([np.full(n, 1.1 * spacing), np.full(n, 1.1 * spacing),
                                         np.full(n, 0.05 * spacing)]))
    opac = rng.uniform(0.9, 0.97, n)
    if spec.color_scheme == "textured-grid":
        cell = math.radians(30.0)
        lon = np.arctan2(normal[:, 1], normal[:, 0])
        lat = np.arcsin(np.clip(normal[:, 2], -1, 1))
        parity = ((np.floor(lon / cell) + np.floor(lat / cell)) % 2).astype(bool)
        tint = 0.5 + 0.5 * np.column_stack([np.sin(lon), np.cos(2 * lon + lat), np.sin(lat + 0.5)])
        colors = np.where(parity[:, None], 0.35 + 0.5 * tint, 0.1 + 0.3 * tint[:, ::-1])
    else:
        colors = rng.uniform(0.0, 1.0, (n, 3))
    return means, quats, log_scales, opac, np.clip(colors, 0.0, 1.0)


def _ground_truth_map(spec):
    rng = np.random.default_rng(spec.seed)
    n_back = int(round(spec.backdrop_fraction * spec.primitive_count))
    n, e = spec.primitive_count - n_back, spec.extent
    means = rng.uniform(-e, e, (n, 3))
    lo, hi = spec.sigma_range
    log_scales = np.log(rng.uniform(lo * e, hi * e, (n, 3)))
    quats = _random_quats(rng, n)
    opac = rng.uniform(*spec.opacity_range, n)
    if spec.color_scheme == "textured-grid":
        colors = _checker_colors(means, spec, rng)
    else:
        colors = rng.uniform(0.0, 1.0, (n, 3))
    if n_back:
        parts = _backdrop(spec, rng, n_back)
        means, quats, log_scales, opac, colors = (
            np.concatenate([a, b]) for a, b in zip((means, quats, log_scales, opac, colors), parts))
    scene_scale = math.hypot(spec.ring_radius, spec.ring_height)
    return GaussianMap(means, quats, log_scales, logit(opac), colors, scene_scale,
                       {"source": "synthetic", "seed": spec.seed})


def render_view(gmap, pose, K, name="", min_occupancy=0.5):
    """Render a training view with oracle depth; pixels under ``min_occupancy`` get depth 0."""
    r = rasterize(gmap, pose, K)
    depth = np.where(r.occupancy > min_occupancy, r.depth, 0.0)
    return TrainView(np.clip(r.color, 0.0, 1.0), pose, K, gt_depth=depth, name=name)


def synth_scene(spec):
    """Ground-truth map plus one rendered view (with oracle depth) per ring camera."""
    gmap = _ground_truth_map(spec)
    K = spec.intrinsics()
    views = [render_view(gmap, p, K, f"view_{i:03d}", spec.min_occupancy)
             for i, p in enumerate(ring_poses(spec))]
    return gmap, views


def held_out_poses(spec, count, seed=None):
    """Ring poses between the training cameras, with seeded height jitter."""
    rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
    heights = spec.ring_height + rng.uniform(-0.25, 0.25, count) * spec.extent
    poses = []
    for i in range(count):
        a = 2.0 * math.pi * (i + 0.5) / count + 0.1
        poses.append(ring_pose(spec, a, heights[i]))
    return poses


def export_point_cloud(gmap, noise=0.01, keep=1.0, seed=0):
    """Sparse colored cloud from map centers, standing in for a structure-from-motion result."""
    rng = np.random.default_rng(seed)
    n = len(gmap)
    idx = np.sort(rng.permutation(n)[:max(1, int(round(keep * n)))])
    pts = gmap.means[idx] + rng.normal(0.0, noise * gmap.scene_scale, (len(idx), 3))
    return ColoredPointCloud(pts, np.clip(gmap.colors[idx], 0.0, 1.0))
