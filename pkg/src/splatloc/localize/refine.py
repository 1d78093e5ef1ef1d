"""Pose refinement by masked photometric (and optional depth) alignment against a Gaussian map."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from ..geom import Pose, Twist, apply_twist
from ..render import ResidualGrad, rasterize_with_gradients
from .masks import (MaskConfig, combine_masks, detect_keypoints, feature_mask, occupancy_mask,
                    scharr_gradient_mask)

EMPTY_MASK_MESSAGE = "empty mask: refinement unconstrained"


class EmptyMaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    lr_rotation: float = 0.01
    lr_translation: float = 0.01       # multiplied by the map's scene_scale
    lr_brightness: float = 0.01
    lambda_geo: float = 0.01
    max_iterations: int = 1000
    step_tolerance: float = 1e-6
    # stop once the best objective has not improved for this many iterations (None: never)
    patience: int | None = 100
    use_mask: bool = True
    optimize_brightness: bool = True
    mask: MaskConfig = field(default_factory=MaskConfig)
    # coarse-to-fine: blur sigmas in pixels run before the sharp stage, each for at most
    # stage_iterations with stage_patience; () disables the schedule
    blur_schedule: tuple = ()
    stage_iterations: int = 150
    stage_patience: int = 30

    def __post_init__(self):
        for name in ("lr_rotation", "lr_translation", "lr_brightness"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if isinstance(self.mask, dict):
            object.__setattr__(self, "mask", MaskConfig(**self.mask))
        sched = tuple(float(x) for x in self.blur_schedule)
        if any(not x > 0 for x in sched):
            raise ValueError("blur_schedule sigmas must be > 0")
        object.__setattr__(self, "blur_schedule", sched)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown refinement option(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class RefineState:
    pose: Pose
    a: float = 0.0
    b: float = 0.0
    iteration: int = 0
    last_objective: float = float("inf")


@dataclass
class RefineDiagnostics:
    objectives: list
    masked_pixels: list
    iterations: int
    best_iteration: int
    final_objective: float
    a: float
    b: float
    stop_reason: str

    @property
    def masked_pixel_count(self):
        return self.masked_pixels[self.best_iteration]


class MaskedObjective:
    """Sum over masked pixels of the brightness-corrected L1 color residual plus weighted depth residual."""

    def __init__(self, query, static_masks, a, b, config, query_depth=None, blur=0.0, blurred_query=None):
        self.blur = blur
        self.query = query if blurred_query is None else blurred_query
        self.static_masks = static_masks
        self.a = a
        self.b = b
        self.config = config
        self.query_depth = query_depth
        self.mask = None

    def evaluate(self, render):
        cfg = self.config
        if cfg.use_mask:
            grad, fea = self.static_masks
            M = combine_masks(grad, fea, occupancy_mask(render.occupancy, cfg.mask.tau_occ))
        else:
            M = np.ones(render.occupancy.shape, dtype=bool)
        self.mask = M
        w = M.astype(np.float64)
        gain = np.exp(self.a)
        C = blur_image(render.color, self.blur)
        r = gain * C + self.b - self.query
        s = np.sign(r) * w[..., None]
        value = float((np.abs(r) * w[..., None]).sum())
        # zero-padded Gaussian blur is a symmetric operator, so its adjoint is itself
        d_color = gain * blur_image(s, self.blur)
        d_a = float((s * gain * C).sum())
        d_b = float(s.sum())
        d_depth = None
        if self.query_depth is not None and cfg.lambda_geo > 0:
            valid = self.query_depth > 0
            e = np.where(valid, render.depth - self.query_depth, 0.0)
            value += cfg.lambda_geo * float((np.abs(e) * w).sum())
            d_depth = cfg.lambda_geo * np.sign(e) * w
        return ResidualGrad(value, d_color, d_depth, None, d_a, d_b)


def blur_image(img, sigma):
    """Per-channel Gaussian blur with zero padding; identity for sigma 0."""
    if sigma <= 0:
        return img
    sig = (sigma, sigma, 0) if img.ndim == 3 else sigma
    return gaussian_filter(img, sig, mode="constant", cval=0.0, truncate=3.0)


def static_masks(query, mask_cfg):
    """Query-only parts of the mask: Scharr edges and keypoint boxes (fixed for the whole run)."""
    H, W = query.shape[:2]
    kps = detect_keypoints(query, mask_cfg.max_keypoints)
    return scharr_gradient_mask(query, mask_cfg.tau_grad), feature_mask(kps, mask_cfg.tau_fea, H, W)


def refine_pose(query, gmap, T0, K, config=None, query_depth=None):
    """Adam on a left twist plus brightness (a, b); returns ``(best pose, diagnostics)``."""
    config = config or RefineConfig()
    if len(gmap) == 0:
        raise ValueError("cannot refine against an empty map")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (K.height, K.width, 3):
        raise ValueError(f"query shape {query.shape} does not match intrinsics {K.height}x{K.width}")
    if query_depth is not None:
        query_depth = np.where(np.isfinite(query_depth) & (query_depth > 0), query_depth, 0.0)
    if not (np.isfinite(T0.rotation.q).all() and np.isfinite(T0.translation).all()):
        raise ValueError("initial pose must be finite")
    smask = static_masks(query, config.mask) if config.use_mask else None

    scale = gmap.scene_scale
    lr = np.array([config.lr_rotation] * 3 + [config.lr_translation * scale] * 3
                  + [config.lr_brightness] * 2)
    stages = [(sig, config.stage_iterations, config.stage_patience) for sig in config.blur_schedule]
    stages.append((0.0, config.max_iterations, config.patience))
    pose, a, b = T0, 0.0, 0.0
    objectives, counts = [], []
    for sig, budget, patience in stages:
        bq = blur_image(query, sig) if sig > 0 else None
        pose, a, b, value, best_it, reason = _adam_stage(
            query, bq, sig, gmap, K, config, query_depth, smask, lr, pose, a, b, budget, patience,
            objectives, counts)
    diag = RefineDiagnostics(objectives, counts, len(objectives), best_it, value, a, b, reason)
    return pose, diag


def _adam_stage(query, blurred_query, sigma, gmap, K, config, query_depth, smask, lr, T0, a0, b0,
                budget, patience, objectives, counts):
    """One Adam run from (T0, a0, b0); appends to ``objectives``/``counts`` and returns its best state."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    scale = gmap.scene_scale
    m = np.zeros(8)
    v = np.zeros(8)
    state = RefineState(T0, a0, b0)
    offset = len(objectives)
    # best = (mean residual per masked pixel, summed objective, pose, a, b, iteration); the
    # occupancy mask changes size between iterations, and ranking by the raw sum would
    # favour poses that simply see fewer masked pixels
    best = (float("inf"), float("inf"), T0, a0, b0, offset)
    reason = "max_iterations"
    for it in range(budget):
        obj = MaskedObjective(query, smask, state.a, state.b, config, query_depth, sigma, blurred_query)
        _, value, pg, _ = rasterize_with_gradients(gmap, state.pose, K, obj, want_map=False)
        n_masked = int(obj.mask.sum())
        if n_masked == 0:
            raise EmptyMaskError(EMPTY_MASK_MESSAGE)
        objectives.append(value)
        counts.append(n_masked)
        state.iteration, state.last_objective = it, value
        if value / n_masked < best[0]:
            best = (value / n_masked, value, state.pose, state.a, state.b, offset + it)

        g = np.concatenate([pg.d_twist, [pg.d_a, pg.d_b]])
        if not config.optimize_brightness:
            g[6:] = 0.0
        t = it + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = -lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        state.pose = apply_twist(state.pose, Twist(step[:3], step[3:6]))
        state.a += float(step[6])
        state.b += float(step[7])
        if np.linalg.norm(step[:3]) + np.linalg.norm(step[3:6]) / scale < config.step_tolerance:
            reason = "step_tolerance"
            break
        if patience is not None and offset + it - best[5] >= patience:
            reason = "patience"
            break
    _, value, pose, a, b, best_it = best
    return pose, a, b, value, best_it, reason
