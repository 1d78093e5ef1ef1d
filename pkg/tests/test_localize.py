import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.geom import Pose, Rotation, pose_error
from splatloc.localize.masks import (MaskConfig, combine_masks, detect_keypoints, feature_mask,
                                     geometric_residual, harris_response, occupancy_mask,
                                     photometric_residual, scharr_gradient_mask)
from splatloc.localize.pnp import (DEGENERATE_MESSAGE, Correspondences, PnPError, bearings, p3p,
                                   pnp_ransac, reprojection_errors)
from splatloc.localize.refine import (EMPTY_MASK_MESSAGE, EmptyMaskError, RefineConfig, blur_image,
                                      refine_pose)
from splatloc.localize.retrieval import (DESCRIPTOR_DIM, ObservationGraph, covisibility_cluster,
                                         global_descriptor, retrieve_knn)
from splatloc.render import rasterize

from helpers import PNP_K, pnp_problem, smooth_scene

# ---------------------------------------------------------------- masks


def test_scharr_constant_and_step():
    assert not scharr_gradient_mask(np.full((10, 12, 3), 0.4)).any()
    img = np.zeros((10, 12, 3))
    img[:, 6:] = 1.0
    m = scharr_gradient_mask(img, 1.0)
    cols = np.nonzero(m.any(axis=0))[0]
    assert list(cols) == [5, 6] and m[:, 5:7].all()


@given(st.integers(0, 1000), st.floats(0, 50), st.floats(0, 50))
def test_scharr_monotone_in_threshold(seed, t1, t2):
    img = np.random.default_rng(seed).uniform(0, 1, (9, 9, 3))
    lo, hi = sorted((t1, t2))
    assert not (scharr_gradient_mask(img, hi) & ~scharr_gradient_mask(img, lo)).any()


def test_keypoints_square_corners():
    assert len(detect_keypoints(np.zeros((40, 40, 3)))) == 0
    img = np.zeros((64, 64, 3))
    img[20:44, 16:40] = 1.0
    kps = detect_keypoints(img, 50)
    corners = np.array([[16, 20], [39, 20], [16, 43], [39, 43]], float)
    for c in corners:
        assert np.min(np.abs(kps - c).max(axis=1)) <= 1.0
    R = harris_response(img)
    resp = R[kps[:, 1].astype(int), kps[:, 0].astype(int)]
    assert (np.diff(resp) <= 0).all()


def test_keypoints_deterministic_and_capped(rng):
    img = rng.uniform(0, 1, (48, 48, 3))
    a = detect_keypoints(img, 20)
    assert len(a) == 20 and np.array_equal(a, detect_keypoints(img, 20))


def test_feature_mask_boxes():
    assert not feature_mask(np.zeros((0, 2)), 10, 50, 50).any()
    assert feature_mask([[25, 25]], 10, 50, 50).sum() == 21 * 21
    m = feature_mask([[0, 0]], 10, 50, 50)
    assert m.sum() == 121 and m[:11, :11].all()


@given(st.integers(0, 1000), st.integers(0, 6))
def test_feature_mask_cardinality_bound(seed, tau):
    kps = np.random.default_rng(seed).uniform(0, 30, (5, 2))
    assert feature_mask(kps, tau, 30, 30).sum() <= 5 * (2 * tau + 1) ** 2


def test_occupancy_and_combine(rng):
    assert not occupancy_mask(np.zeros((4, 4))).any()
    assert occupancy_mask(np.full((4, 4), 0.995), 0.99).all()
    assert MaskConfig().tau_occ == 0.99 and MaskConfig().tau_grad == 1 and MaskConfig().tau_fea == 10
    g, f, o = (rng.uniform(size=(3, 7, 6)) > 0.5)
    c = combine_masks(g, f, o)
    for i, j in itertools.product(range(7), range(6)):
        assert c[i, j] == ((g[i, j] or f[i, j]) and o[i, j])
    assert not (c & ~o).any()
    assert not combine_masks(g, f, np.zeros_like(o)).any()
    assert combine_masks(np.ones_like(g), f, np.ones_like(o)).all()
    with pytest.raises(ValueError):
        combine_masks(g, f, o[:3])
    with pytest.raises(ValueError):
        MaskConfig(tau_occ=1.0)


def test_residual_examples():
    C = np.random.default_rng(0).uniform(0, 1, (5, 5, 3))
    assert not photometric_residual(C, C, 0, 0).any()
    assert np.allclose(photometric_residual(C, C, 0, 0.1), 0.3)
    assert np.allclose(photometric_residual(np.full((2, 2, 3), 0.25), np.full((2, 2, 3), 0.5), math.log(2), 0), 0)
    D = np.ones((3, 3))
    assert not geometric_residual(D, D).any()
    assert not geometric_residual(D, np.zeros((3, 3))).any()
    E = D.copy()
    E[1, 2] += 0.5
    r = geometric_residual(D, E)
    assert r[1, 2] == 0.5 and r.sum() == 0.5


# ---------------------------------------------------------------- PnP

def test_p3p_exact_candidates_contain_truth(rng):
    pix, pts, pose, _ = pnp_problem(3, n=3, outlier_frac=0, noise_px=0)
    cands = p3p(bearings(pix, PNP_K), pts)
    assert 1 <= len(cands) <= 4
    err = min(np.abs(R - pose.R).max() + np.abs(t - pose.translation).max() for R, t in cands)
    assert err < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_pnp_noise_free(seed):
    pix, pts, pose, _ = pnp_problem(seed, n=20, outlier_frac=0, noise_px=0)
    est, inl = pnp_ransac(Correspondences(pix, pts), PNP_K, seed=seed)
    e = pose_error(est, pose)
    assert e.translation_err < 1e-6 and e.rotation_err < 1e-5 and len(inl) == 20


def test_pnp_outliers_and_noise_recovers_inliers():
    pix, pts, pose, out = pnp_problem(11)
    est, inl = pnp_ransac(Correspondences(pix, pts), PNP_K, seed=0)
    e = pose_error(est, pose)
    assert e.translation_err < 0.01 and e.rotation_err < 0.5
    true_inl = np.nonzero(~out & (reprojection_errors(pose.R, pose.translation, pts, pix, PNP_K) < 3))[0]
    assert set(true_inl) <= set(inl)


def test_pnp_deterministic():
    pix, pts, _, _ = pnp_problem(5)
    a = pnp_ransac(Correspondences(pix, pts), PNP_K, seed=3)
    b = pnp_ransac(Correspondences(pix, pts), PNP_K, seed=3)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_pnp_errors():
    pix, pts, _, _ = pnp_problem(0, n=3, outlier_frac=0)
    with pytest.raises(PnPError):
        pnp_ransac(Correspondences(pix, pts), PNP_K)
    line = np.column_stack([np.linspace(-1, 1, 20), np.zeros(20), np.full(20, 3.0)])
    pix = PNP_K.project(line)
    with pytest.raises(PnPError, match=DEGENERATE_MESSAGE):
        pnp_ransac(Correspondences(pix, line), PNP_K)
    rng = np.random.default_rng(0)
    noise_pix = rng.uniform(0, 600, (40, 2))
    noise_pts = rng.uniform(-1, 1, (40, 3)) + [0, 0, 4]
    with pytest.raises(PnPError, match=DEGENERATE_MESSAGE):
        pnp_ransac(Correspondences(noise_pix, noise_pts), PNP_K, max_iters=200)
    with pytest.raises(ValueError):
        Correspondences(np.zeros((3, 2)), np.zeros((4, 3)))


# ---------------------------------------------------------------- retrieval

def test_descriptor_examples(rng):
    img = rng.uniform(0, 1, (32, 40, 3))
    d = global_descriptor(img)
    assert d.shape == (DESCRIPTOR_DIM,) == (288,)
    assert abs(np.linalg.norm(d) - 1) < 1e-9
    assert np.array_equal(d, global_descriptor(img.copy()))
    assert float(d @ global_descriptor(0.5 * img)) < 1


def test_retrieve_knn_examples_and_oracle(rng):
    db = [(f"f{i:02d}", global_descriptor(rng.uniform(0, 1, (16, 16, 3)))) for i in range(12)]
    assert retrieve_knn(db, db[4][1], 3)[0] == "f04"
    assert sorted(retrieve_knn(db, db[0][1], 50)) == [i for i, _ in db]
    q = rng.standard_normal(288)
    sims = [(-(d @ q) / np.linalg.norm(d) / np.linalg.norm(q), i) for i, d in db]
    assert retrieve_knn(db, q, 5) == [i for _, i in sorted(sims)[:5]]
    tie = [("b", np.ones(4)), ("a", np.ones(4))]
    assert retrieve_knn(tie, np.ones(4), 2) == ["a", "b"]
    with pytest.raises(ValueError):
        retrieve_knn([], q, 1)


def test_covisibility_examples():
    g = ObservationGraph(["A", "B", "C"], {"A": {1, 2}, "B": {2, 3}, "C": {7}})
    assert covisibility_cluster(g, ["C", "B", "A"]) == [["A", "B"], ["C"]]
    assert covisibility_cluster(g, ["C"]) == [["C"]]
    g2 = ObservationGraph(["x", "y", "z"], {"x": {5}, "y": {5, 6}, "z": {5}})
    assert covisibility_cluster(g2, ["x", "y", "z"]) == [["x", "y", "z"]]
    with pytest.raises(KeyError):
        covisibility_cluster(g, ["Q"])


def _closure_oracle(obs, ids):
    adj = {a: {b for b in ids if obs[a] & obs[b]} for a in ids}
    seen, comps = set(), []
    for a in ids:
        if a in seen:
            continue
        comp, stack = set(), [a]
        while stack:
            x = stack.pop()
            if x not in comp:
                comp.add(x)
                stack.extend(adj[x] - comp)
        seen |= comp
        comps.append(sorted(comp))
    return sorted(comps, key=lambda c: (-len(c), c[0]))


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_covisibility_matches_transitive_closure(seed, n):
    rng = np.random.default_rng(seed)
    ids = [f"f{i}" for i in range(n)]
    obs = {f: set(rng.integers(0, 3 * n, rng.integers(0, 4)).tolist()) for f in ids}
    sub = [f for f in ids if rng.uniform() < 0.8] or ids[:1]
    assert covisibility_cluster(ObservationGraph(ids, obs), sub) == _closure_oracle(obs, sub)


# ---------------------------------------------------------------- refinement

def test_blur_is_self_adjoint(rng):
    x = rng.standard_normal((20, 17, 3))
    y = rng.standard_normal((20, 17, 3))
    assert abs(np.sum(blur_image(x, 2.5) * y) - np.sum(x * blur_image(y, 2.5))) < 1e-9
    assert blur_image(x, 0) is x


def _textured_query(seed=4):
    gmap, pose, K = smooth_scene(seed, n=120, size=64)
    gmap.opacity_logits[:] = 4.0
    return gmap, pose, K, rasterize(gmap, pose, K)


def test_refine_from_truth_stays_put():
    gmap, pose, K, r = _textured_query()
    cfg = RefineConfig(use_mask=False, max_iterations=5)
    out, diag = refine_pose(r.color, gmap, pose, K, cfg)
    assert out == pose and diag.final_objective == 0 and diag.best_iteration == 0


def test_refine_recovers_small_offset_and_best_is_monotone():
    gmap, pose, K, r = _textured_query()
    T0 = Pose(Rotation.from_rotvec([0.02, -0.03, 0.01]), [0.05, -0.03, 0.04])
    cfg = RefineConfig(use_mask=False, max_iterations=300)
    out, diag = refine_pose(r.color, gmap, T0, K, cfg)
    e0, e = pose_error(T0, pose), pose_error(out, pose)
    assert e.translation_err < 0.3 * e0.translation_err and e.rotation_err < 0.3 * e0.rotation_err
    assert len(diag.objectives) == diag.iterations == len(diag.masked_pixels)
    norm = np.array(diag.objectives) / np.array(diag.masked_pixels)
    best = np.minimum.accumulate(norm)
    assert np.all(np.diff(best) <= 0)
    assert diag.final_objective == diag.objectives[diag.best_iteration]


def test_refine_brightness_ab_helps():
    gmap, pose, K, r = _textured_query()
    q = np.clip(1.2 * r.color, 0, 1)
    T0 = Pose(Rotation.from_rotvec([0.01, 0.0, -0.01]), [0.03, 0.0, 0.0])
    base = RefineConfig(use_mask=False, max_iterations=150)
    _, with_ab = refine_pose(q, gmap, T0, K, base)
    _, frozen = refine_pose(q, gmap, T0, K, base.with_(optimize_brightness=False))
    assert frozen.final_objective >= with_ab.final_objective
    assert with_ab.a > 0


def test_refine_empty_mask_raises():
    gmap, pose, K, r = _textured_query()
    away = Pose(Rotation.from_rotvec([0, math.pi, 0]))  # looking away: nothing rendered
    with pytest.raises(EmptyMaskError, match=EMPTY_MASK_MESSAGE):
        refine_pose(r.color, gmap, away, K, RefineConfig())


def test_refine_input_validation():
    gmap, pose, K, r = _textured_query()
    with pytest.raises(ValueError):
        refine_pose(r.color[:10], gmap, pose, K)
    with pytest.raises(ValueError):
        refine_pose(r.color, gmap.subset([]), pose, K)
    with pytest.raises(ValueError):
        RefineConfig(lr_rotation=0)
    with pytest.raises(ValueError, match="bogus"):
        RefineConfig.from_dict({"bogus": 1})
    cfg = RefineConfig.from_dict({"mask": {"tau_fea": 4}, "blur_schedule": [4, 2]})
    assert cfg.mask.tau_fea == 4 and cfg.blur_schedule == (4.0, 2.0)


def test_refine_with_depth_term():
    gmap, pose, K, r = _textured_query()
    depth = np.where(r.occupancy > 0.5, r.depth / np.maximum(r.occupancy, 1e-9), 0.0)
    T0 = Pose(Rotation.from_rotvec([0.01, 0.01, 0.0]), [0.02, 0.02, 0.05])
    out, diag = refine_pose(r.color, gmap, T0, K, RefineConfig(use_mask=False, max_iterations=200), depth)
    assert pose_error(out, pose).translation_err < pose_error(T0, pose).translation_err
