"""Hierarchical localization: retrieval, covisibility clusters, patch matching, PnP, refinement."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..render import rasterize
from .masks import detect_keypoints, to_gray255
from .pnp import Correspondences, PnPError, pnp_ransac
from .refine import RefineConfig, refine_pose
from .retrieval import ObservationGraph, covisibility_cluster, global_descriptor, retrieve_knn


@dataclass(frozen=True)
class LocalizeConfig:
    k_retrieve: int = 5
    max_keypoints: int = 500
    patch_size: int = 11
    ratio: float = 0.9
    min_ncc: float = 0.7
    inlier_px: float = 3.0
    ransac_iters: int = 1000
    voxel: float = 0.02           # point-id quantization, fraction of scene_scale
    min_occupancy: float = 0.9    # database keypoints need this much rendered coverage
    refine: bool = True

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown localization option(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class LocalizationError(RuntimeError):
    def __init__(self, message, reasons=None):
        super().__init__(message)
        self.reasons = list(reasons or [])


def extract_patches(gray, keypoints, size):
    """Zero-mean, unit-norm square patches; returns (patches, index of keypoints kept)."""
    h = size // 2
    H, W = gray.shape
    pts = np.rint(np.asarray(keypoints).reshape(-1, 2)).astype(np.int64)
    inside = (pts[:, 0] >= h) & (pts[:, 0] < W - h) & (pts[:, 1] >= h) & (pts[:, 1] < H - h)
    keep = np.nonzero(inside)[0]
    out = np.empty((len(keep), size * size))
    for row, i in enumerate(keep):
        x, y = pts[i]
        out[row] = gray[y - h:y + h + 1, x - h:x + h + 1].ravel()
    out -= out.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(out, axis=1)
    ok = norm > 1e-6
    out = out[ok] / norm[ok, None]
    return out, keep[ok]


@dataclass
class DatabaseFrame:
    id: str
    pose: object
    descriptor: np.ndarray
    keypoints: np.ndarray    # (M, 2) pixels that carry patches and 3D points
    patches: np.ndarray      # (M, size*size)
    point_ids: np.ndarray    # (M,)
    points: np.ndarray       # (M, 3) world coordinates


@dataclass
class Database:
    frames: list
    intrinsics: object
    patch_size: int = 11
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {f.id: f for f in self.frames}

    def __getitem__(self, fid):
        return self._by_id[fid]

    @property
    def graph(self):
        return ObservationGraph([f.id for f in self.frames],
                                {f.id: set(int(p) for p in f.point_ids) for f in self.frames})

    def descriptors(self):
        return [(f.id, f.descriptor) for f in self.frames]


def build_database(gmap, views, config=None):
    """Keypoints of each view lifted to 3D with the map's rendered depth.

    Point ids come from quantizing the lifted points on a voxel grid, so the
    same surface point seen from two frames links them in the covisibility graph.
    """
    config = config or LocalizeConfig()
    voxel = config.voxel * gmap.scene_scale
    ids = {}
    frames = []
    for i, v in enumerate(views):
        K = v.intrinsics
        fid = v.name or f"view_{i:03d}"
        gray = to_gray255(v.image)
        kps = detect_keypoints(v.image, config.max_keypoints)
        patches, keep = extract_patches(gray, kps, config.patch_size)
        kps = kps[keep]
        r = rasterize(gmap, v.pose, K)
        px = np.rint(kps).astype(np.int64)
        occ = r.occupancy[px[:, 1], px[:, 0]] if len(px) else np.zeros(0)
        good = occ > config.min_occupancy
        kps, patches, px, occ = kps[good], patches[good], px[good], occ[good]
        z = r.depth[px[:, 1], px[:, 0]] / occ if len(px) else np.zeros(0)
        rays = np.column_stack([(kps[:, 0] - K.cx) / K.fx, (kps[:, 1] - K.cy) / K.fy, np.ones(len(kps))])
        Xc = rays * z[:, None]
        Xw = (Xc - v.pose.translation) @ v.pose.R
        pid = np.empty(len(Xw), dtype=np.int64)
        for j, key in enumerate(map(tuple, np.floor(Xw / voxel).astype(np.int64))):
            pid[j] = ids.setdefault(key, len(ids))
        frames.append(DatabaseFrame(fid, v.pose, global_descriptor(v.image), kps, patches, pid, Xw))
    return Database(frames, views[0].intrinsics if views else None, config.patch_size)


def match_patches(q_patches, d_patches, d_ids, ratio=0.9, min_ncc=0.7):
    """Mutual-best NCC matches that pass the distance-ratio test; returns (query idx, db idx)."""
    if len(q_patches) == 0 or len(d_patches) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    S = q_patches @ d_patches.T
    best_d = np.argmax(S, axis=1)
    best_q = np.argmax(S, axis=0)
    qi, di = [], []
    for q in range(len(S)):
        d = best_d[q]
        if best_q[d] != q or S[q, d] < min_ncc:
            continue
        other = S[q, d_ids != d_ids[d]]
        if len(other):
            d1 = np.sqrt(max(2.0 - 2.0 * S[q, d], 0.0))
            d2 = np.sqrt(max(2.0 - 2.0 * other.max(), 0.0))
            if not d1 < ratio * d2:
                continue
        qi.append(q)
        di.append(d)
    return np.array(qi, dtype=np.int64), np.array(di, dtype=np.int64)


@dataclass
class LocalizeResult:
    coarse_pose: object
    fine_pose: object
    cluster: list
    inliers: int
    matches: int
    iterations: int
    final_objective: float | None
    masked_pixel_count: int | None
    reasons: list
    timing_ms: float | None = None

    def to_record(self, timing=False):
        return {
            "coarse_pose": self.coarse_pose.to_dict(),
            "fine_pose": self.fine_pose.to_dict(),
            "iterations": self.iterations,
            "final_objective": self.final_objective,
            "masked_pixel_count": self.masked_pixel_count,
            "timing_ms": self.timing_ms if timing else None,
        }


def localize(query, gmap, database, K, config=None, refine_config=None, query_depth=None, seed=0):
    """Coarse pose from the first covisibility cluster that yields a PnP solution, then refinement."""
    t0 = time.perf_counter()
    config = config or LocalizeConfig()
    refine_config = refine_config or RefineConfig()
    query = np.asarray(query, dtype=np.float64)
    q_kps = detect_keypoints(query, config.max_keypoints)
    q_patches, keep = extract_patches(to_gray255(query), q_kps, config.patch_size)
    q_kps = q_kps[keep]
    knn = retrieve_knn(database.descriptors(), global_descriptor(query), config.k_retrieve)
    clusters = covisibility_cluster(database.graph, knn)
    reasons = []
    for ci, cluster in enumerate(clusters):
        frames = [database[f] for f in cluster]
        d_patches = np.concatenate([f.patches for f in frames])
        d_ids = np.concatenate([f.point_ids for f in frames])
        d_pts = np.concatenate([f.points for f in frames])
        qi, di = match_patches(q_patches, d_patches, d_ids, config.ratio, config.min_ncc)
        if len(qi) < 4:
            reasons.append(f"cluster {ci} {cluster}: {len(qi)} matches")
            continue
        try:
            coarse, inl = pnp_ransac(Correspondences(q_kps[qi], d_pts[di]), K, config.inlier_px,
                                     config.ransac_iters, seed)
        except PnPError as e:
            reasons.append(f"cluster {ci} {cluster}: {e}")
            continue
        fine, iters, obj, n_masked = coarse, 0, None, None
        if config.refine:
            fine, diag = refine_pose(query, gmap, coarse, K, refine_config, query_depth)
            iters, obj, n_masked = diag.iterations, diag.final_objective, diag.masked_pixel_count
        ms = (time.perf_counter() - t0) * 1e3
        return fine, LocalizeResult(coarse, fine, cluster, len(inl), len(qi), iters, obj, n_masked,
                                    reasons, ms)
    raise LocalizationError("no cluster produced a pose: " + "; ".join(reasons) if reasons
                            else "no cluster produced a pose", reasons)
