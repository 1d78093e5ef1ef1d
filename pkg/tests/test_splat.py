import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.geom import Pose, Rotation
from splatloc.splat import (INIT_OPACITY, ColoredPointCloud, GaussianMap, GaussianPrimitive,
                            MapFormatError, covariance, covariances, init_from_points, load_map,
                            load_point_cloud, logit, save_map, save_point_cloud, sigmoid)


def prim(q=(1, 0, 0, 0), ls=(0, 0, 0)):
    return GaussianPrimitive(np.zeros(3), Rotation(q), np.array(ls, float), 0.0, np.full(3, 0.5))


def random_map(rng, n=100):
    q = rng.standard_normal((n, 4))
    return GaussianMap(rng.uniform(-1, 1, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                       rng.uniform(-4, 0, (n, 3)), rng.normal(0, 2, n), rng.uniform(0, 1, (n, 3)),
                       scene_scale=2.5, metadata={"name": "test", "n": n})


def test_covariance_examples():
    assert np.allclose(covariance(prim()), np.eye(3))
    assert np.allclose(covariance(prim(ls=(math.log(2), 0, 0))), np.diag([4, 1, 1]))
    rz = Rotation.from_axis_angle([0, 0, 1], math.pi / 2).q
    assert np.allclose(covariance(prim(q=rz, ls=(math.log(2), 0, 0))), np.diag([1, 4, 1]), atol=1e-9)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_covariance_symmetric_with_scale_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    ls = rng.uniform(-3, 1, 3)
    S = covariance(prim(q, ls))
    assert np.abs(S - S.T).max() < 1e-12
    assert np.allclose(np.sort(np.linalg.eigvalsh(S)), np.sort(np.exp(2 * ls)), atol=1e-9)


def test_covariance_cholesky_10000(rng):
    q = rng.standard_normal((10000, 4))
    S = covariances(q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(-6, 1, (10000, 3)))
    np.linalg.cholesky(S)  # raises if any matrix is not SPD


def test_opacity_sigmoid_logit_inverse():
    p = np.array([1e-4, 0.1, 0.5, 0.9, 0.9999])
    assert np.allclose(sigmoid(logit(p)), p)
    assert 0 < prim().opacity < 1


def test_init_single_point_clamp_floor():
    cloud = ColoredPointCloud([[1.0, 2.0, 3.0]], [[0.2, 0.4, 0.6]])
    m = init_from_points(cloud)
    assert len(m) == 1 and m.scene_scale == 1.0
    assert np.array_equal(m.means[0], [1, 2, 3])
    assert np.allclose(m.log_scales, math.log(1e-4))
    assert np.allclose(sigmoid(m.opacity_logits), INIT_OPACITY)


def test_init_unit_grid_scale_and_colors(rng):
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    colors = rng.uniform(0, 1, (len(g), 3))
    cams = [Pose.look_at([20, 0, 2], [2, 2, 2]), Pose.look_at([-18, 2, 2], [2, 2, 2])]
    m = init_from_points(ColoredPointCloud(g, colors), cams)
    assert len(m) == len(g)
    assert np.allclose(m.log_scales, 0.0)  # three neighbours at distance 1
    assert np.array_equal(m.colors, colors)
    assert np.array_equal(m.quats, np.tile([1.0, 0, 0, 0], (len(g), 1)))
    assert m.scene_scale == pytest.approx(np.median([np.linalg.norm(c.center - g.mean(0)) for c in cams]))


def test_init_empty_cloud():
    with pytest.raises(ValueError, match="empty initialization cloud"):
        init_from_points(ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3))))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        ColoredPointCloud([[0, 0, np.nan]], [[0, 0, 0]])
    with pytest.raises(ValueError):
        ColoredPointCloud([[0, 0, 0]], [[0, 0, 2]])


def test_map_roundtrip_bit_exact(tmp_path, rng):
    m = random_map(rng)
    f32 = GaussianMap(*(a.astype(np.float32) for a in m._arrays()), scene_scale=m.scene_scale,
                      metadata=m.metadata)
    save_map(m, tmp_path / "m.ply")
    back = load_map(tmp_path / "m.ply")
    assert back.array_equal(f32)
    assert back.metadata == m.metadata
    save_map(back, tmp_path / "m2.ply")
    assert (tmp_path / "m.ply").read_bytes() == (tmp_path / "m2.ply").read_bytes()


def test_map_truncated_and_empty(tmp_path, rng):
    save_map(random_map(rng, 10), tmp_path / "m.ply")
    raw = (tmp_path / "m.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-7])
    with pytest.raises(MapFormatError, match="vertex 9"):
        load_map(tmp_path / "t.ply")
    empty = raw[:raw.index(b"end_header")].replace(b"element vertex 10", b"element vertex 0")
    (tmp_path / "e.ply").write_bytes(empty + b"end_header\n")
    with pytest.raises(MapFormatError, match="empty map"):
        load_map(tmp_path / "e.ply")
    with pytest.raises(ValueError, match="empty map"):
        save_map(random_map(rng, 10).subset([]), tmp_path / "x.ply")


def test_map_version_mismatch_and_bad_magic(tmp_path, rng):
    save_map(random_map(rng, 3), tmp_path / "m.ply")
    raw = (tmp_path / "m.ply").read_bytes()
    (tmp_path / "v.ply").write_bytes(raw.replace(b"splatloc_map_version 1", b"splatloc_map_version 9"))
    with pytest.raises(MapFormatError, match="version"):
        load_map(tmp_path / "v.ply")
    (tmp_path / "b.ply").write_bytes(b"xyz" + raw)
    with pytest.raises(MapFormatError):
        load_map(tmp_path / "b.ply")


def test_map_nonfinite_vertex_reported(tmp_path, rng):
    m = random_map(rng, 5)
    m.means[3, 1] = np.inf
    save_map(m, tmp_path / "m.ply")
    with pytest.raises(MapFormatError, match="vertex 3"):
        load_map(tmp_path / "m.ply")


def test_point_cloud_io(tmp_path, rng):
    pts = rng.uniform(-1, 1, (20, 3))
    cols = np.round(rng.uniform(0, 1, (20, 3)) * 255) / 255
    save_point_cloud(ColoredPointCloud(pts, cols), tmp_path / "p.ply")
    back = load_point_cloud(tmp_path / "p.ply")
    assert np.allclose(back.points, pts) and np.allclose(back.colors, cols)
    np.savetxt(tmp_path / "p.txt", np.hstack([pts, cols * 255]))
    back = load_point_cloud(tmp_path / "p.txt")
    assert np.allclose(back.colors, cols)


def test_map_iteration_and_subset(rng):
    m = random_map(rng, 7)
    prims = m.primitives
    assert len(prims) == 7
    again = GaussianMap.from_primitives(prims, m.scene_scale)
    assert np.allclose(again.means, m.means)
    assert len(m.subset([1, 3])) == 2
    assert m.is_finite()
