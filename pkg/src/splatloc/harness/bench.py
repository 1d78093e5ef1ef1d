"""Pose perturbations, benchmark runs and their reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geom import Pose, Rotation, pose_error
from ..localize.pipeline import LocalizeConfig, localize
from ..localize.refine import RefineConfig, refine_pose

MODES = ("refine", "full")


@dataclass(frozen=True)
class PerturbationSpec:
    translation: tuple = (0.0, 0.1)    # magnitude range, scene units
    rotation_deg: tuple = (0.0, 20.0)  # angle range, degrees
    seed: int = 0

    def __post_init__(self):
        for name in ("translation", "rotation_deg"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    def scaled(self, scale):
        """Same spec with the translation range multiplied by ``scale``."""
        lo, hi = self.translation
        return PerturbationSpec((lo * scale, hi * scale), self.rotation_deg, self.seed)

    def with_seed(self, seed):
        return PerturbationSpec(self.translation, self.rotation_deg, seed)


DELTA_S = PerturbationSpec((0.0, 0.1), (0.0, 20.0))
DELTA_M = PerturbationSpec((0.1, 0.2), (20.0, 40.0))
PERTURBATIONS = {"delta_s": DELTA_S, "delta_m": DELTA_M}

# (translation, rotation in degrees); "scene" thresholds scale with the map's scene_scale
THRESHOLDS = {"scene": (0.05, 5.0), "unit": (0.05, 5.0), "cm": (0.05, 5.0)}


def _unit_vector(rng):
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def sample_perturbation(rng, spec):
    """``(v, omega)``: translation offset and rotation vector."""
    v = _unit_vector(rng) * rng.uniform(*spec.translation)
    omega = _unit_vector(rng) * math.radians(rng.uniform(*spec.rotation_deg))
    return v, omega


def perturb_pose(T, spec, rng=None):
    """Offset ``T`` on the left by a random rotation and translation drawn from ``spec``.

    The camera center moves by exactly the drawn translation magnitude and the
    orientation by exactly the drawn angle.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    v, omega = sample_perturbation(rng, spec)
    return Pose(Rotation.from_rotvec(omega), v) @ T


def median(values):
    """Median with even counts averaged; ``None`` for an empty list."""
    xs = sorted(values)
    n = len(xs)
    if n == 0:
        return None
    mid = n // 2
    return xs[mid] if n % 2 else 0.5 * (xs[mid - 1] + xs[mid])


@dataclass
class Query:
    id: str
    image: np.ndarray
    pose: Pose
    depth: np.ndarray | None = None


@dataclass
class QueryResult:
    query_id: str
    t_err: float | None = None
    r_err: float | None = None
    success: bool = False
    coarse_t_err: float | None = None
    coarse_r_err: float | None = None
    iters: int | None = None
    ms: float | None = None
    final_objective: float | None = None
    pose: Pose | None = None
    error: str | None = None


CSV_FIELDS = ("query_id", "t_err", "r_err", "success", "coarse_t_err", "coarse_r_err", "iters", "ms")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class BenchmarkReport:
    mode: str
    thresholds: tuple
    results: list = field(default_factory=list)

    @property
    def success_rate(self):
        if not self.results:
            return 0.0
        return sum(r.success for r in self.results) / len(self.results)

    @property
    def median_translation_err(self):
        return median([r.t_err for r in self.results if r.t_err is not None])

    @property
    def median_rotation_err(self):
        return median([r.r_err for r in self.results if r.r_err is not None])

    def summary(self, timing=False):
        out = {
            "mode": self.mode,
            "queries": len(self.results),
            "returned": sum(r.t_err is not None for r in self.results),
            "success_rate": self.success_rate,
            "thresholds": {"translation": self.thresholds[0], "rotation_deg": self.thresholds[1]},
            "median_translation_err": self.median_translation_err,
            "median_rotation_err": self.median_rotation_err,
            "failures": [{"query_id": r.query_id, "error": r.error} for r in self.results if r.error],
        }
        if timing:
            ms = [r.ms for r in self.results if r.ms is not None]
            out["timing_ms"] = {"median": median(ms), "total": float(sum(ms)),
                                "max": max(ms) if ms else None}
        return out

    def to_json(self, timing=False):
        return json.dumps(self.summary(timing), indent=2, sort_keys=True) + "\n"

    def to_csv(self, timing=False):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.results:
            row = [getattr(r, k) for k in CSV_FIELDS]
            if not timing:
                row[-1] = None
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def write(self, out_dir, timing=False):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(timing))
        (out / "per_query.csv").write_text(self.to_csv(timing))
        return out / "report.json", out / "per_query.csv"


def _run_one(i, q, gmap, K, mode, thr, refine_cfg, perturbation, database, loc_cfg, seed, use_depth):
    qseed = seed ^ i
    res = QueryResult(q.id)
    t0 = time.perf_counter()
    depth = q.depth if use_depth else None
    try:
        if mode == "refine":
            init = perturb_pose(q.pose, perturbation.with_seed(qseed))
            pose, diag = refine_pose(q.image, gmap, init, K, refine_cfg, depth)
            coarse, res.iters, res.final_objective = init, diag.iterations, diag.final_objective
        else:
            pose, info = localize(q.image, gmap, database, K, loc_cfg, refine_cfg, depth, seed=qseed)
            coarse, res.iters, res.final_objective = info.coarse_pose, info.iterations, info.final_objective
    except Exception as e:  # a failed query is recorded, never fatal for the run
        res.error = f"{type(e).__name__}: {e}"
        res.ms = (time.perf_counter() - t0) * 1e3
        return res
    res.ms = (time.perf_counter() - t0) * 1e3
    e, ec = pose_error(pose, q.pose), pose_error(coarse, q.pose)
    res.pose = pose
    res.t_err, res.r_err = e.translation_err, e.rotation_err
    res.coarse_t_err, res.coarse_r_err = ec.translation_err, ec.rotation_err
    res.success = bool(e.translation_err < thr[0] and e.rotation_err < thr[1])
    return res


def run_benchmark(gmap, queries, K, mode="refine", thresholds=None, refine_config=None,
                  perturbation=DELTA_S, database=None, localize_config=None, seed=0, workers=1,
                  use_depth=False, scale_perturbation=True):
    """Evaluate every query; thresholds default to (0.05 * scene_scale, 5 degrees).

    With ``scale_perturbation`` the perturbation's translation range is read in
    units of the map's scene_scale. Query ``i`` draws its randomness from
    ``seed ^ i`` so results do not depend on scheduling.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not queries:
        raise ValueError("benchmark needs at least one query")
    if mode == "full" and database is None:
        raise ValueError("full-pipeline mode needs a database")
    if thresholds is None:
        thresholds = (0.05 * gmap.scene_scale, 5.0)
    refine_config = refine_config or RefineConfig()
    localize_config = localize_config or LocalizeConfig()
    pert = perturbation.scaled(gmap.scene_scale) if scale_perturbation else perturbation
    args = (gmap, K, mode, thresholds, refine_config, pert, database, localize_config, seed, use_depth)
    if workers <= 1:
        results = [_run_one(i, q, *args) for i, q in enumerate(queries)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda iq: _run_one(iq[0], iq[1], *args), enumerate(queries)))
    return BenchmarkReport(mode, tuple(float(t) for t in thresholds), results)
