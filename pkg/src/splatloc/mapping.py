"""Gaussian map optimization: losses, pseudo views, density control and the training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geom import CameraIntrinsics, Pose, interpolate_pose_pair, order_poses, quat_to_matrix
from .images import load_float_image, load_png, save_float_image, save_png
from .optim import Adam
from .render import ResidualGrad, backward, rasterize, rasterize_with_gradients
from .splat import GaussianMap

PEARSON_MIN_PIXELS = 16
PEARSON_MIN_VAR = 1e-12


@dataclass
class TrainView:
    image: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    gt_depth: np.ndarray | None = None
    est_depth: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        K = self.intrinsics
        if self.image.shape != (K.height, K.width, 3):
            raise ValueError(f"view {self.name!r}: image shape {self.image.shape} does not match "
                             f"intrinsics {K.height}x{K.width}x3")
        for label in ("gt_depth", "est_depth"):
            d = getattr(self, label)
            if d is None:
                continue
            d = np.asarray(d, dtype=np.float64)
            if d.shape != (K.height, K.width):
                raise ValueError(f"view {self.name!r}: {label} shape {d.shape} does not match image")
            setattr(self, label, np.where(np.isfinite(d) & (d > 0), d, 0.0))


@dataclass
class TrainConfig:
    iterations: int = 30000
    pseudo_interval: int = 20
    lambda_d: float = 0.05
    lambda_reg: float = 0.01
    pseudo_per_pair: int = 5
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    prune_opacity: float = 0.005
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    max_primitives: int = 500_000
    # position rates are multiplied by scene_scale; they decay log-linearly to the final value
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 0.05
    lr_colors: float = 2.5e-3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lambda_d", "lambda_reg", "prune_opacity", "densify_grad_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pseudo_interval < 1 or self.densify_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.pseudo_per_pair < 0:
            raise ValueError("pseudo_per_pair must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown training option(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- losses

def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def loss_rgb_grad(C, C_ref):
    C, C_ref = np.asarray(C, dtype=np.float64), np.asarray(C_ref, dtype=np.float64)
    _check_same(C, C_ref)
    diff = C - C_ref
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_rgb(C, C_ref):
    """Mean absolute color difference over pixels and channels."""
    return loss_rgb_grad(C, C_ref)[0]


def loss_depth_grad(D, D_ref):
    D, D_ref = np.asarray(D, dtype=np.float64), np.asarray(D_ref, dtype=np.float64)
    _check_same(D, D_ref)
    valid = D_ref > 0
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(D)
    diff = np.where(valid, D - D_ref, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def loss_depth(D, D_ref):
    """Mean absolute depth difference over pixels with valid (positive) reference depth."""
    return loss_depth_grad(D, D_ref)[0]


def loss_pearson_grad(D, D_est):
    """``1 - r`` between rendered and estimated depth, with its gradient w.r.t. ``D``."""
    D, D_est = np.asarray(D, dtype=np.float64), np.asarray(D_est, dtype=np.float64)
    _check_same(D, D_est)
    grad = np.zeros_like(D)
    valid = (D > 0) & (D_est > 0)
    if valid.sum() < PEARSON_MIN_PIXELS:
        return 0.0, grad
    x = D[valid]
    y = D_est[valid]
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    n = len(x)
    if sxx / n < PEARSON_MIN_VAR or syy / n < PEARSON_MIN_VAR:
        return 0.0, grad
    denom = math.sqrt(sxx * syy)
    r = float(xc @ yc) / denom
    # the mean terms drop out because centered vectors sum to zero
    grad[valid] = -(yc / denom - r * xc / sxx)
    return 1.0 - r, grad


def loss_pearson(D, D_est):
    return loss_pearson_grad(D, D_est)[0]


def total_loss(view, render, config):
    return _view_terms(view, render, config)[0]


def _view_terms(view, render, config, with_grad=False):
    value, g_color = loss_rgb_grad(render.color, view.image)
    terms = {"rgb": value, "depth": 0.0, "reg": 0.0}
    g_depth = np.zeros(render.depth.shape)
    if view.gt_depth is not None:
        v, g = loss_depth_grad(render.depth, view.gt_depth)
        terms["depth"] = v
        value += config.lambda_d * v
        g_depth += config.lambda_d * g
    if view.est_depth is not None:
        v, g = loss_pearson_grad(render.depth, view.est_depth)
        terms["reg"] = v
        value += config.lambda_reg * v
        g_depth += config.lambda_reg * g
    if with_grad:
        return value, terms, g_color, g_depth
    return value, terms


class ViewObjective:
    """Training objective of one real view, usable with ``rasterize_with_gradients``."""

    def __init__(self, view, config):
        self.view = view
        self.config = config
        self.terms = None

    def evaluate(self, render):
        value, self.terms, g_color, g_depth = _view_terms(self.view, render, self.config, True)
        return ResidualGrad(value, g_color, g_depth)


# ---------------------------------------------------------------- pseudo views

def generate_pseudo_views(views, K):
    """Order the training poses along a short open path and interpolate K poses per hop."""
    if len(views) < 2:
        return []
    poses = [v.pose if isinstance(v, TrainView) else v for v in views]
    perm = order_poses(poses)
    out = []
    for i, j in zip(perm[:-1], perm[1:]):
        out.extend(interpolate_pose_pair(poses[i], poses[j], K))
    return out


# ---------------------------------------------------------------- density control

@dataclass
class DensityStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, map_grads):
        vis = map_grads.visible
        self.grad_accum[vis] += map_grads.means2d_norm[vis]
        self.count[vis] += 1

    def mean(self):
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)


SPLIT_SCALE_DIVISOR = 1.6


def densify_and_prune(gmap, stats, config, rng=None, return_index=False):
    """Clone or split primitives with large screen-space gradients, then drop faint ones.

    With ``return_index`` the result is ``(map, source, fresh)`` where ``source[i]``
    is the parent row of new row ``i`` and ``fresh`` marks newly created rows.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n = len(gmap)
    grad = stats.mean()
    hot = np.nonzero(grad > config.densify_grad_threshold)[0]
    big = np.exp(gmap.log_scales.max(axis=1)) > config.percent_dense * gmap.scene_scale
    room = max(config.max_primitives - n, 0)
    if len(hot):
        # a split adds one row and a clone adds one row; keep the strongest when capped
        order = hot[np.lexsort((hot, -grad[hot]))]
        hot = np.sort(order[:room])
    clone = hot[~big[hot]]
    split = hot[big[hot]]

    keep_parent = np.ones(n, dtype=bool)
    keep_parent[split] = False
    base = np.nonzero(keep_parent)[0]

    means = [gmap.means[base], gmap.means[clone]]
    src = [base, clone]
    if len(split):
        R = quat_to_matrix(gmap.quats[split])
        s = np.exp(gmap.log_scales[split])
        z = rng.standard_normal((2, len(split), 3))
        for k in range(2):
            means.append(gmap.means[split] + np.einsum("nij,nj->ni", R, s * z[k]))
            src.append(split)
    source = np.concatenate(src)
    fresh = np.zeros(len(source), dtype=bool)
    fresh[len(base):] = True
    out = GaussianMap(
        means=np.concatenate(means),
        quats=gmap.quats[source],
        log_scales=gmap.log_scales[source].copy(),
        opacity_logits=gmap.opacity_logits[source],
        colors=gmap.colors[source],
        scene_scale=gmap.scene_scale,
        metadata=dict(gmap.metadata),
    )
    n_split_rows = 2 * len(split)
    if n_split_rows:
        out.log_scales[-n_split_rows:] -= math.log(SPLIT_SCALE_DIVISOR)

    alive = out.opacities >= config.prune_opacity
    if not alive.all():
        out = out.subset(np.nonzero(alive)[0])
        source, fresh = source[alive], fresh[alive]
    if return_index:
        return out, source, fresh
    return out


# ---------------------------------------------------------------- depth estimators

class OracleDepthEstimator:
    """Stand-in for a monocular depth network: renders a reference map at the requested pose."""

    def __init__(self, gt_map, min_occupancy=0.5):
        self.gt_map = gt_map
        self.min_occupancy = min_occupancy

    def __call__(self, image, pose, intrinsics):
        r = rasterize(self.gt_map, pose, intrinsics)
        ok = r.occupancy > self.min_occupancy
        return np.where(ok, r.depth / np.where(ok, r.occupancy, 1.0), 0.0)


class FileDepthEstimator:
    """Precomputed depth maps keyed by the pose they were captured at.

    Returns ``None`` for poses it has no file for (pseudo views).
    """

    def __init__(self, entries):
        # entries: list of (Pose, path)
        self.entries = list(entries)

    def __call__(self, image, pose, intrinsics):
        for p, path in self.entries:
            if (np.allclose(p.rotation.q, pose.rotation.q, atol=1e-9)
                    and np.allclose(p.translation, pose.translation, atol=1e-9)):
                return load_float_image(path)
        return None


# ---------------------------------------------------------------- training loop

PARAM_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def _lr_table(config, scene_scale):
    return {
        "means": config.lr_means * scene_scale,
        "quats": config.lr_quats,
        "log_scales": config.lr_log_scales,
        "opacity_logits": config.lr_opacity,
        "colors": config.lr_colors,
    }


def _means_lr_scale(config, it):
    if config.iterations <= 1 or config.lr_means <= 0:
        return 1.0
    ratio = config.lr_means_final / config.lr_means
    frac = min(max((it - 1) / (config.iterations - 1), 0.0), 1.0)
    return ratio ** frac


def train_map(views, initial_map, estimator=None, config=None, history=None):
    """Fit ``initial_map`` to ``views``; returns a new map. ``history`` (a list) receives log rows."""
    if not views:
        raise ValueError("train_map needs at least one view")
    config = config or TrainConfig()
    gmap = initial_map.copy()
    if config.iterations == 0:
        return gmap
    rng = np.random.default_rng(config.seed)
    pseudo = generate_pseudo_views(views, config.pseudo_per_pair)
    use_pseudo = bool(pseudo) and estimator is not None and config.lambda_reg > 0
    K_pseudo = views[0].intrinsics

    def params():
        return {k: getattr(gmap, k) for k in PARAM_GROUPS}

    opt = Adam({k: v.shape for k, v in params().items()}, _lr_table(config, gmap.scene_scale))
    stats = DensityStats.zeros(len(gmap))
    queue = []
    for it in range(1, config.iterations + 1):
        if not queue:
            queue = list(rng.permutation(len(views)))
        view = views[queue.pop(0)]
        obj = ViewObjective(view, config)
        _, loss, _, mg = rasterize_with_gradients(gmap, view.pose, view.intrinsics, obj)
        grads = {k: getattr(mg, k).copy() for k in PARAM_GROUPS}
        stats.add(mg)

        reg_value = None
        if use_pseudo and it % config.pseudo_interval == 0:
            pose = pseudo[int(rng.integers(len(pseudo)))]
            r = rasterize(gmap, pose, K_pseudo)
            est = estimator(r.color, pose, K_pseudo)
            if est is not None:
                reg_value, g_depth = loss_pearson_grad(r.depth, est)
                if reg_value != 0.0:
                    _, pg = backward(r, gmap, pose, K_pseudo, np.zeros(r.color.shape),
                                     config.lambda_reg * g_depth)
                    for k in PARAM_GROUPS:
                        grads[k] += pg[k]

        opt.step(params(), grads, lr_scale={"means": _means_lr_scale(config, it)})
        np.clip(gmap.colors, 0.0, 1.0, out=gmap.colors)
        gmap.quats /= np.linalg.norm(gmap.quats, axis=1, keepdims=True)

        if (config.densify_from <= it <= config.densify_until and it % config.densify_interval == 0
                and it < config.iterations):
            new, source, fresh = densify_and_prune(gmap, stats, config, rng, return_index=True)
            if len(new) == 0:
                raise RuntimeError(f"density control removed every primitive at iteration {it}")
            gmap = new
            opt.remap(source, fresh)
            stats = DensityStats.zeros(len(gmap))

        if history is not None:
            t = obj.terms
            history.append({"iteration": it, "loss": loss, "loss_rgb": t["rgb"],
                            "loss_depth": t["depth"], "loss_reg": t["reg"] if reg_value is None
                            else t["reg"] + reg_value, "primitives": len(gmap)})
    return gmap


LOG_FIELDS = ("iteration", "loss", "loss_rgb", "loss_depth", "loss_reg", "primitives")


def write_train_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})


# ---------------------------------------------------------------- dataset directory

def save_dataset(root, views, float_depth=True):
    """Write ``images/*.png``, ``poses.json``, ``intrinsics.json`` and optional depth folders.

    Images go through 8-bit PNG, so a reloaded dataset carries quantized colors.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    poses = {}
    for i, v in enumerate(views):
        name = v.name or f"view_{i:03d}"
        save_png(root / "images" / f"{name}.png", v.image)
        poses[name] = v.pose.to_dict()
        for label, folder in (("gt_depth", "depth"), ("est_depth", "est_depth")):
            d = getattr(v, label)
            if d is not None and float_depth:
                (root / folder).mkdir(exist_ok=True)
                save_float_image(root / folder / f"{name}.f32", d)
    (root / "poses.json").write_text(json.dumps(poses, indent=2, sort_keys=True) + "\n")
    (root / "intrinsics.json").write_text(json.dumps(views[0].intrinsics.to_dict(), indent=2) + "\n")


def load_dataset(root):
    """Read a dataset directory into a list of :class:`TrainView` sorted by image name."""
    root = Path(root)
    if not (root / "poses.json").exists():
        raise FileNotFoundError(f"{root}: missing poses.json")
    if not (root / "intrinsics.json").exists():
        raise FileNotFoundError(f"{root}: missing intrinsics.json")
    poses = json.loads((root / "poses.json").read_text())
    K = CameraIntrinsics.from_dict(json.loads((root / "intrinsics.json").read_text()))
    views = []
    for name in sorted(poses):
        img_path = root / "images" / f"{name}.png"
        if not img_path.exists():
            raise FileNotFoundError(f"{root}: pose {name!r} has no image {img_path.name}")
        extra = {}
        for label, folder in (("gt_depth", "depth"), ("est_depth", "est_depth")):
            p = root / folder / f"{name}.f32"
            if p.exists():
                extra[label] = load_float_image(p)
        views.append(TrainView(load_png(img_path), Pose.from_dict(poses[name]), K, name=name, **extra))
    return views
