"""Gaussian map data model, initialization from point clouds, and PLY storage."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import Rotation, quat_to_matrix

MAP_FORMAT_VERSION = 1
PLY_PROPERTIES = ("x", "y", "z", "qw", "qx", "qy", "qz", "ls0", "ls1", "ls2",
                  "opacity_logit", "r", "g", "b")
INIT_OPACITY = 0.1


class MapFormatError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    orientation: Rotation
    log_scales: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def scales(self):
        return np.exp(self.log_scales)


def covariance(p):
    """``R diag(s^2) R^T`` for one primitive."""
    R = p.orientation.as_matrix()
    return (R * np.exp(2.0 * np.asarray(p.log_scales))) @ R.T


def covariances(quats, log_scales):
    """Batched covariance for ``(N, 4)`` quaternions and ``(N, 3)`` log-scales."""
    R = quat_to_matrix(quats)
    S2 = np.exp(2.0 * np.asarray(log_scales))
    return np.einsum("nij,nj,nkj->nik", R, S2, R)


@dataclass
class GaussianMap:
    """Struct-of-arrays Gaussian map. Iterating yields :class:`GaussianPrimitive` values.

    Quaternions are stored raw (not necessarily unit); every consumer normalizes.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    scene_scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.scene_scale = float(self.scene_scale)

    @classmethod
    def from_primitives(cls, prims, scene_scale=1.0, metadata=None):
        prims = list(prims)
        return cls(
            means=np.array([p.position for p in prims]),
            quats=np.array([p.orientation.q for p in prims]),
            log_scales=np.array([p.log_scales for p in prims]),
            opacity_logits=np.array([p.opacity_logit for p in prims]),
            colors=np.array([p.color for p in prims]),
            scene_scale=scene_scale,
            metadata=dict(metadata or {}),
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return GaussianPrimitive(self.means[i].copy(), Rotation(self.quats[i]),
                                 self.log_scales[i].copy(), float(self.opacity_logits[i]),
                                 self.colors[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def primitives(self):
        return list(self)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def copy(self):
        return GaussianMap(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                           self.opacity_logits.copy(), self.colors.copy(), self.scene_scale,
                           json.loads(json.dumps(self.metadata)))

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return GaussianMap(self.means[idx], self.quats[idx], self.log_scales[idx],
                           self.opacity_logits[idx], self.colors[idx], self.scene_scale,
                           dict(self.metadata))

    def covariances(self):
        return covariances(self.quats, self.log_scales)

    def is_finite(self):
        return all(np.isfinite(a).all() for a in
                   (self.means, self.quats, self.log_scales, self.opacity_logits, self.colors))

    def array_equal(self, other):
        return (len(self) == len(other)
                and self.scene_scale == other.scene_scale
                and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return (self.means, self.quats, self.log_scales, self.opacity_logits, self.colors)


@dataclass
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.colors.size and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("point colors must lie in [0, 1]")

    def __len__(self):
        return len(self.points)


def scene_scale_from_cameras(centroid, cameras):
    if not cameras:
        return 1.0
    centers = np.array([c.center for c in cameras])
    return float(np.median(np.linalg.norm(centers - centroid, axis=1)))


def init_from_points(cloud, cameras=()):
    """One isotropic primitive per point, sized by the mean distance to its 3 nearest neighbours."""
    n = len(cloud)
    if n == 0:
        raise ValueError("empty initialization cloud")
    pts = cloud.points
    scene_scale = scene_scale_from_cameras(pts.mean(axis=0), list(cameras))
    lo, hi = 1e-4 * scene_scale, 0.1 * scene_scale
    if n > 1:
        k = min(3, n - 1)
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        mean_d = d[:, 1:].mean(axis=1)
    else:
        mean_d = np.full(1, lo)
    scale = np.clip(mean_d, lo, hi)
    log_s = np.log(scale)
    return GaussianMap(
        means=pts.copy(),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(log_s[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(INIT_OPACITY))),
        colors=cloud.colors.copy(),
        scene_scale=scene_scale,
    )


def save_map(gmap, path):
    """Binary little-endian PLY, one float32 vertex record per primitive."""
    if len(gmap) == 0:
        raise ValueError("empty map")
    data = np.concatenate([gmap.means, gmap.quats, gmap.log_scales,
                           gmap.opacity_logits[:, None], gmap.colors], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0",
              f"comment splatloc_map_version {MAP_FORMAT_VERSION}",
              f"comment scene_scale {gmap.scene_scale!r}",
              f"comment metadata {json.dumps(gmap.metadata, sort_keys=True)}",
              f"element vertex {len(gmap)}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + data.tobytes())


def _split_header(raw):
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise MapFormatError("not a PLY file (missing 'ply' magic or 'end_header')")
    text = raw[:end].decode("ascii", errors="replace")
    return text.splitlines(), raw[end + len(b"end_header\n"):]


def load_map(path):
    raw = Path(path).read_bytes()
    lines, body = _split_header(raw)
    version = None
    scene_scale = 1.0
    metadata = {}
    count = None
    props = []
    fmt = None
    for line in lines[1:]:
        if line.startswith("format "):
            fmt = line.split()[1]
        elif line.startswith("comment splatloc_map_version "):
            version = int(line.split()[2])
        elif line.startswith("comment scene_scale "):
            scene_scale = float(line.split()[2])
        elif line.startswith("comment metadata "):
            metadata = json.loads(line[len("comment metadata "):])
        elif line.startswith("element "):
            parts = line.split()
            if parts[1] != "vertex" or count is not None:
                raise MapFormatError(f"unexpected element {parts[1]!r}")
            count = int(parts[2])
        elif line.startswith("property "):
            parts = line.split()
            if parts[1] != "float":
                raise MapFormatError(f"property {parts[-1]!r} must be float, got {parts[1]!r}")
            props.append(parts[2])
    if fmt != "binary_little_endian":
        raise MapFormatError(f"unsupported PLY format {fmt!r}")
    if version != MAP_FORMAT_VERSION:
        raise MapFormatError(f"map format version mismatch: file has {version}, "
                             f"reader expects {MAP_FORMAT_VERSION}")
    if tuple(props) != PLY_PROPERTIES:
        raise MapFormatError(f"unexpected vertex properties {props}")
    if not count:
        raise MapFormatError("empty map")
    rec = 4 * len(PLY_PROPERTIES)
    if len(body) < count * rec:
        raise MapFormatError(f"truncated file: vertex {len(body) // rec} of {count} is incomplete")
    data = np.frombuffer(body[:count * rec], dtype="<f4").reshape(count, len(PLY_PROPERTIES))
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise MapFormatError(f"vertex {int(np.argmax(bad))} has non-finite values")
    data = data.astype(np.float64)
    return GaussianMap(data[:, 0:3], data[:, 3:7], data[:, 7:10], data[:, 10], data[:, 11:14],
                       scene_scale, metadata)


def save_point_cloud(cloud, path):
    """ASCII PLY with float coordinates and uchar colors."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(int)
    for p, c in zip(cloud.points, rgb):
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_point_cloud(path):
    """Read an ASCII PLY (x y z red green blue) or a 6-column text file.

    Colors are taken as 8-bit when any value exceeds 1 (or when the PLY declares
    them ``uchar``), otherwise as floats in ``[0, 1]``.
    """
    text = Path(path).read_text()
    byte_colors = None
    if text.startswith("ply"):
        head, _, body = text.partition("end_header")
        if "format ascii" not in head:
            raise ValueError("only ASCII PLY point clouds are supported")
        names = re.findall(r"property\s+(\w+)\s+(\w+)", head)
        order = [n for _, n in names]
        try:
            cols = [order.index(k) for k in ("x", "y", "z", "red", "green", "blue")]
        except ValueError as e:
            raise ValueError(f"point cloud PLY lacks a required property: {e}") from None
        byte_colors = dict((n, t) for t, n in names)["red"] in ("uchar", "uint8")
        rows = [line.split() for line in body.strip().splitlines() if line.strip()]
        arr = np.array(rows, dtype=np.float64)[:, cols] if rows else np.zeros((0, 6))
    else:
        rows = [line.split() for line in text.splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
        arr = np.array(rows, dtype=np.float64) if rows else np.zeros((0, 6))
        if arr.shape[1] != 6:
            raise ValueError(f"expected 6 columns, got {arr.shape[1]}")
    colors = arr[:, 3:6]
    if byte_colors or (byte_colors is None and colors.size and colors.max() > 1):
        colors = colors / 255.0
    return ColoredPointCloud(arr[:, :3], colors)
