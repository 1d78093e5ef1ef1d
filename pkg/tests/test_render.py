import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.geom import CameraIntrinsics, Pose, Rotation
from splatloc.render import (ALPHA_MAX, ResidualGrad, alpha_at, project_gaussian, rasterize,
                             rasterize_with_gradients)
from splatloc.render.raster import Projected2DGaussian
from splatloc.splat import GaussianMap, GaussianPrimitive, logit

import oracles
from helpers import smooth_central_difference, smooth_scene

K64 = CameraIntrinsics(100.0, 100.0, 31.5, 31.5, 64, 64)


def one_sigma_map(positions, sigma, opacities, colors, scene_scale=1.0):
    n = len(positions)
    return GaussianMap(np.asarray(positions, float), np.tile([1.0, 0, 0, 0], (n, 1)),
                       np.full((n, 3), math.log(sigma)), logit(np.asarray(opacities, float)),
                       np.asarray(colors, float), scene_scale=scene_scale)


class L2Against:
    """Smooth loss for finite-difference checks: 0.5|C - C*|^2 + 0.5 w_d |D - D*|^2 + w_o sum O."""

    def __init__(self, target, depth_target, w_depth=0.3, w_occ=0.1):
        self.target, self.depth_target, self.w_depth, self.w_occ = target, depth_target, w_depth, w_occ

    def evaluate(self, r):
        e = r.color - self.target
        ed = r.depth - self.depth_target
        val = 0.5 * float((e * e).sum()) + 0.5 * self.w_depth * float((ed * ed).sum()) + self.w_occ * float(r.occupancy.sum())
        return ResidualGrad(val, e, self.w_depth * ed, np.full(r.occupancy.shape, self.w_occ))


class L1Against:
    def __init__(self, target, depth_target=None, w_depth=0.0, w_occ=0.0):
        self.target, self.depth_target, self.w_depth, self.w_occ = target, depth_target, w_depth, w_occ

    def evaluate(self, r):
        e = r.color - self.target
        val = float(np.abs(e).sum())
        dd = do = None
        if self.depth_target is not None:
            ed = r.depth - self.depth_target
            val += self.w_depth * float(np.abs(ed).sum()) + self.w_occ * float(r.occupancy.sum())
            dd = self.w_depth * np.sign(ed)
            do = np.full(r.occupancy.shape, self.w_occ)
        return ResidualGrad(val, np.sign(e), dd, do)


# ---------------------------------------------------------------- projection

def test_projection_on_axis_isotropic():
    f, sigma, z = 100.0, 0.05, 2.0
    p = GaussianPrimitive(np.array([0, 0, z]), Rotation.identity(), np.full(3, math.log(sigma)), 0.0, np.ones(3))
    g = project_gaussian(p, Pose.identity(), K64)
    assert np.allclose(g.cov, ((f * sigma / z) ** 2 + 0.3) * np.eye(2), atol=1e-6)
    assert np.allclose(g.mean, [K64.cx, K64.cy]) and g.depth == z
    p2 = GaussianPrimitive(np.array([0, 0, 2 * z]), p.orientation, p.log_scales, 0.0, np.ones(3))
    g2 = project_gaussian(p2, Pose.identity(), K64)
    assert np.allclose(g2.cov - 0.3 * np.eye(2), (g.cov - 0.3 * np.eye(2)) / 4, atol=1e-12)


def test_projection_behind_camera_culled():
    p = GaussianPrimitive(np.array([0, 0, -1.0]), Rotation.identity(), np.zeros(3), 0.0, np.ones(3))
    assert project_gaussian(p, Pose.identity(), K64) is None


def test_projection_matches_oracle(rng):
    gmap, pose, K = smooth_scene(3, n=30)
    for p in gmap:
        g = project_gaussian(p, pose, K)
        mu, cov, z = oracles.project_one(p.position, p.orientation.q, p.log_scales, pose.R,
                                         pose.translation, K, 0.01)
        assert np.allclose(g.mean, mu) and np.allclose(g.cov, cov, rtol=1e-9) and abs(g.depth - z) < 1e-12


def test_alpha_at_examples():
    g = Projected2DGaussian(np.array([5.0, 5.0]), np.eye(2), 1.0, 0.8, np.ones(3))
    assert alpha_at(g, [5, 5]) == 0.8
    assert abs(alpha_at(g, [6, 5]) - 0.8 * math.exp(-0.5)) < 1e-12
    assert abs(alpha_at(g, [6, 5]) - 0.4852) < 1e-4
    assert alpha_at(g, [15, 5]) == 0.0
    g1 = Projected2DGaussian(np.zeros(2), np.eye(2), 1.0, 0.99999, np.ones(3))
    assert alpha_at(g1, [0, 0]) == ALPHA_MAX


# ---------------------------------------------------------------- compositing

def test_single_opaque_gaussian_center_pixel():
    m = one_sigma_map([[0, 0, 2.0]], 0.3, [0.999999], [[0.2, 0.4, 0.8]])
    r = rasterize(m, Pose.identity(), CameraIntrinsics(100, 100, 16, 16, 33, 33))
    assert np.allclose(r.color[16, 16], np.array([0.2, 0.4, 0.8]) * 0.999)
    assert abs(r.depth[16, 16] - 2 * 0.999) < 1e-12
    assert abs(r.occupancy[16, 16] - 0.999) < 1e-12


def test_two_gaussians_hand_evaluation():
    K = CameraIntrinsics(100, 100, 16, 16, 33, 33)
    m = one_sigma_map([[0, 0, 1.0], [0, 0, 2.0]], 0.5, [0.5, 0.999999], [[1, 0, 0], [0, 1, 0]])
    r = rasterize(m, Pose.identity(), K)
    assert np.allclose(r.color[16, 16], [0.5, 0.4995, 0.0], atol=1e-9)
    assert abs(r.depth[16, 16] - 1.499) < 1e-9
    assert abs(r.occupancy[16, 16] - 0.9995) < 1e-9


def test_empty_pixels_and_empty_map():
    m = one_sigma_map([[0, 0, 2.0]], 0.01, [0.5], [[1, 1, 1]])
    r = rasterize(m, Pose.identity(), K64)
    assert np.all(r.color[0, 0] == 0) and r.depth[0, 0] == 0 and r.occupancy[0, 0] == 0
    with pytest.raises(ValueError):
        rasterize(m.subset([]), Pose.identity(), K64)


def test_ties_broken_by_source_index():
    K = CameraIntrinsics(100, 100, 8, 8, 17, 17)
    m = one_sigma_map([[0, 0, 2.0], [0, 0, 2.0]], 0.2, [0.6, 0.6], [[1, 0, 0], [0, 0, 1]])
    c = rasterize(m, Pose.identity(), K).color[8, 8]
    assert c[0] > c[2]  # index 0 is composited first


def test_render_matches_pixel_oracle():
    gmap, pose, K = smooth_scene(11, n=40, size=20)
    r = rasterize(gmap, pose, K)
    C, D, O = oracles.render_image(gmap, pose, K)
    assert np.abs(r.color - C).max() < 1e-9
    assert np.abs(r.depth - D).max() < 1e-9
    assert np.abs(r.occupancy - O).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_occupancy_monotone_in_opacity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    K = CameraIntrinsics(50, 50, 0, 0, 1, 1)
    pos = np.column_stack([rng.normal(0, 0.05, (n, 2)), rng.uniform(1, 3, n)])
    op = rng.uniform(0.05, 0.95, n)
    m = one_sigma_map(pos, 0.1, op, rng.uniform(0, 1, (n, 3)))
    o0 = rasterize(m, Pose.identity(), K).occupancy[0, 0]
    k = int(rng.integers(n))
    op2 = op.copy()
    op2[k] = min(0.99, op[k] + rng.uniform(0.01, 0.3))
    o1 = rasterize(one_sigma_map(pos, 0.1, op2, m.colors), Pose.identity(), K).occupancy[0, 0]
    assert 0 <= o0 <= 1 and o1 >= o0 - 1e-12


# ---------------------------------------------------------------- gradients

def test_zero_residual_gives_zero_gradients():
    gmap, pose, K = smooth_scene(1)
    target = rasterize(gmap, pose, K)
    _, val, pg, mg = rasterize_with_gradients(gmap, pose, K, L1Against(target.color))
    assert val == 0
    assert not pg.d_twist.any() and pg.d_a == 0 and pg.d_b == 0
    assert not mg.means.any() and not mg.colors.any()


def _fd(fun, x, h):
    return (fun(x + h) - fun(x - h)) / (2 * h)


def test_single_gaussian_translation_gradient_sign():
    m = one_sigma_map([[0, 0, 3.0]], 0.15, [0.8], [[0.9, 0.5, 0.1]])
    shifted = Pose(translation=[0.1, 0, 0])
    target = rasterize(m, shifted, K64).color
    obj = L1Against(target)
    _, _, pg, _ = rasterize_with_gradients(m, Pose.identity(), K64, obj, want_map=False)
    from splatloc.geom import Twist, apply_twist

    def f(h):
        return obj.evaluate(rasterize(m, apply_twist(Pose.identity(), Twist(np.zeros(3), [h, 0, 0])), K64)).value
    fd = (f(1e-4) - f(-1e-4)) / 2e-4
    assert np.sign(pg.d_twist[3]) == np.sign(fd) != 0


def test_gradients_match_central_differences_all_groups():
    from splatloc.geom import Twist, apply_twist

    gmap, pose, K = smooth_scene(5, n=25, size=32)
    rng = np.random.default_rng(0)
    tgt, _, _ = oracles.render_image(*smooth_scene(6, n=25, size=32))
    obj = L2Against(tgt, rasterize(gmap, pose, K).depth + 0.05)
    _, _, pg, mg = rasterize_with_gradients(gmap, pose, K, obj)
    for k in range(6):
        def f(s):
            xi = np.zeros(6)
            xi[k] = s
            return obj.evaluate(rasterize(gmap, apply_twist(pose, Twist.from_vector(xi)), K)).value
        fd = smooth_central_difference(f)
        assert abs(fd - pg.d_twist[k]) <= 1e-3 * max(abs(fd), 1e-8), (k, fd, pg.d_twist[k])
    for name in ("means", "log_scales", "opacity_logits", "colors", "quats"):
        arr = getattr(gmap, name)
        grad = getattr(mg, name)
        for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(3)]:
            def f(s):
                g2 = gmap.copy()
                getattr(g2, name)[idx] += s
                return obj.evaluate(rasterize(g2, pose, K)).value
            fd = smooth_central_difference(f)
            assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), 1e-8) + 1e-8, (name, idx, fd, grad[idx])


def test_brightness_bias_gradient_is_sign_sum():
    from splatloc.localize.refine import MaskedObjective, RefineConfig

    gmap, pose, K = smooth_scene(2)
    q = np.random.default_rng(0).uniform(0, 1, (K.height, K.width, 3))
    cfg = RefineConfig(use_mask=False)
    obj = MaskedObjective(q, None, 0.1, 0.02, cfg)
    r, _, pg, _ = rasterize_with_gradients(gmap, pose, K, obj, want_map=False)
    assert pg.d_b == pytest.approx(float(np.sign(np.exp(0.1) * r.color + 0.02 - q).sum()), abs=1e-9)


# ---------------------------------------------------------------- determinism

def test_backends_agree_and_thread_count_invariant(tmp_path):
    script = tmp_path / "r.py"
    script.write_text(
        "import sys, hashlib, numpy as np\n"
        "sys.path.insert(0, %r)\n"
        "from helpers import smooth_central_difference, smooth_scene\n"
        "from splatloc.render import rasterize_with_gradients, rasterize, ResidualGrad\n"
        "g, p, K = smooth_scene(9, n=80)\n"
        "t = rasterize(*smooth_scene(10, n=80)).color\n"
        "class O:\n"
        "    def evaluate(self, r):\n"
        "        return ResidualGrad(0.0, np.sign(r.color - t), r.depth * 0 + 1.0, r.occupancy * 0 + 0.5)\n"
        "r, _, pg, mg = rasterize_with_gradients(g, p, K, O())\n"
        "h = hashlib.sha256()\n"
        "for a in (r.color, r.depth, r.occupancy, pg.d_twist, mg.means, mg.quats, mg.colors):\n"
        "    h.update(np.ascontiguousarray(a).tobytes())\n"
        "print(h.hexdigest()); np.save(sys.argv[1], r.color)\n" % os.path.dirname(__file__))
    outs = {}
    for backend, threads in (("numba", "1"), ("numba", "3"), ("numba", "4"), ("numpy", "1")):
        env = dict(os.environ, SPLATLOC_BACKEND=backend, NUMBA_NUM_THREADS=threads)
        npy = tmp_path / f"{backend}{threads}.npy"
        res = subprocess.run([sys.executable, str(script), str(npy)], env=env, capture_output=True,
                             text=True, check=True)
        outs[(backend, threads)] = (res.stdout.strip(), np.load(npy))
    numba_hashes = {v[0] for k, v in outs.items() if k[0] == "numba"}
    assert len(numba_hashes) == 1
    assert np.abs(outs[("numba", "1")][1] - outs[("numpy", "1")][1]).max() < 1e-12
