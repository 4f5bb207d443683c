import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srdf.fusion import TriangleMesh
from srdf.geometry import MultiViewRig
from srdf.metrics import (
    PointCloud,
    chamfer,
    depth_error,
    nearest_distances,
    nearest_distances_brute,
    sample_mesh,
)
from srdf.scene import make_camera

SQUARE = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float), [[0, 1, 2], [0, 2, 3]])


def scalar_nn(q, ref):
    return min(math.dist(q, r) for r in ref)


def tiny_rig(depths, masks=None):
    cams = []
    for k, d in enumerate(depths):
        d = np.asarray(d, dtype=float)
        m = np.isfinite(d) if masks is None else masks[k]
        cam = make_camera([0, 0, 5 + k], [0, 0, 0], d.shape[1], d.shape[0], 30)
        cams.append(cam.copy(depth=d, mask=m))
    return MultiViewRig(cams, [-1] * 3, [1] * 3)


class TestSampleMesh:
    def test_density_follows_area(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0], [3, 1, 0]], dtype=float), [[0, 1, 2], [1, 3, 2]])
        skew = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [4, 0, 0], [4, 3, 0]], dtype=float), [[0, 1, 2], [1, 3, 4]])
        for m in (mesh, skew):
            cloud = sample_mesh(m, 100_000, seed=1)
            counts = np.bincount(cloud.face_ids, minlength=len(m.faces)) / 100_000
            share = m.face_areas() / m.face_areas().sum()
            np.testing.assert_allclose(counts, share, rtol=0.02)

    def test_points_inside_triangle(self):
        tri = TriangleMesh(np.array([[0.2, 0.1, 1.0], [1.5, 0.3, 0.2], [0.4, 2.0, -0.5]]), [[0, 1, 2]])
        pts = sample_mesh(tri, 5000, seed=3).points
        a, b, c = tri.vertices
        # barycentric coordinates by least squares in the triangle plane
        M = np.stack([b - a, c - a], axis=1)
        uv, *_ = np.linalg.lstsq(M, (pts - a).T, rcond=None)
        assert np.abs(M @ uv - (pts - a).T).max() < 1e-12
        assert uv.min() >= -1e-12 and (uv.sum(axis=0)).max() <= 1 + 1e-12

    def test_deterministic(self):
        a, b = sample_mesh(SQUARE, 100, seed=9), sample_mesh(SQUARE, 100, seed=9)
        assert np.array_equal(a.points, b.points)
        assert not np.array_equal(a.points, sample_mesh(SQUARE, 100, seed=10).points)

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_mesh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), 10)
        with pytest.raises(ValueError):
            sample_mesh(SQUARE, 0)

    def test_non_finite_cloud_rejected(self):
        with pytest.raises(ValueError):
            PointCloud([[0, np.inf, 0]])


class TestChamfer:
    def test_identical(self):
        pts = np.random.default_rng(0).normal(size=(300, 3))
        r = chamfer(PointCloud(pts), PointCloud(pts))
        assert (r.accuracy, r.completeness, r.chamfer) == (0.0, 0.0, 0.0)

    def test_translated_single_point(self):
        t = np.array([0.3, -1.2, 0.4])
        r = chamfer(PointCloud([[1, 2, 3]]), PointCloud([np.array([1, 2, 3]) + t]))
        assert r.accuracy == pytest.approx(np.linalg.norm(t), rel=1e-15)
        assert r.completeness == r.accuracy

    def test_chamfer_is_mean(self, rng):
        a, b = PointCloud(rng.normal(size=(50, 3))), PointCloud(rng.normal(size=(80, 3)))
        r = chamfer(a, b)
        assert r.chamfer == (r.accuracy + r.completeness) / 2
        assert (r.n_recon, r.n_gt) == (50, 80)

    def test_scalar_oracle(self, rng):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
        r = chamfer(PointCloud(a), PointCloud(b))
        assert r.accuracy == pytest.approx(np.mean([scalar_nn(p, b) for p in a]), rel=1e-13)
        assert r.completeness == pytest.approx(np.mean([scalar_nn(p, a) for p in b]), rel=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 400), st.integers(1, 400), st.integers(0, 2**32 - 1))
    def test_kdtree_equals_brute(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, (n, 3)), rng.uniform(-1, 1, (m, 3))
        assert np.array_equal(nearest_distances(a, b), nearest_distances_brute(a, b))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (12, 3), elements=st.floats(-4, 4)), arrays(np.float64, (7, 3), elements=st.floats(-4, 4)))
    def test_symmetry(self, a, b):
        ab, ba = chamfer(PointCloud(a), PointCloud(b)), chamfer(PointCloud(b), PointCloud(a))
        assert (ab.accuracy, ab.completeness) == (ba.completeness, ba.accuracy)

    def test_outlier_increases_accuracy(self, rng):
        gt = rng.normal(size=(200, 3))
        recon = gt + rng.normal(scale=0.01, size=gt.shape)
        before = chamfer(PointCloud(recon), PointCloud(gt)).accuracy
        after = chamfer(PointCloud(np.vstack([recon, [[50.0, 0, 0]]])), PointCloud(gt)).accuracy
        assert after > before

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(PointCloud(np.zeros((0, 3))), PointCloud([[0, 0, 0]]))

    def test_report_formats(self, rng):
        r = chamfer(PointCloud(rng.normal(size=(5, 3))), PointCloud(rng.normal(size=(6, 3))))
        lines = r.to_csv().strip().split("\n")
        assert len(lines) == 2 and lines[0].startswith("accuracy,")
        assert float(lines[1].split(",")[2]) == r.chamfer
        assert "depth" not in r.to_dict()


class TestDepthError:
    def test_identical(self):
        rig = tiny_rig([np.full((3, 3), 2.0), np.full((3, 3), 3.0)])
        e = depth_error(rig, rig)
        assert e.mae == [0.0, 0.0] and e.rmse_all == 0.0

    def test_constant_bias(self):
        gt = tiny_rig([np.full((4, 4), 2.0)] * 2)
        est = tiny_rig([np.full((4, 4), 2.25)] * 2)
        e = depth_error(est, gt)
        assert e.mae == [0.25, 0.25] and e.rmse == [0.25, 0.25]

    def test_two_pixel_example(self):
        gt = tiny_rig([[[1.0, 1.0]], [[1.0, 1.0]]])
        est = tiny_rig([[[1.0, 4.0]], [[1.0, 4.0]]])
        e = depth_error(est, gt)
        diffs = [0.0, 3.0]
        assert e.mae[0] == 1.5 == sum(abs(x) for x in diffs) / 2
        assert e.rmse[0] == pytest.approx(math.sqrt(4.5), rel=1e-15)
        assert e.rmse[0] == pytest.approx(math.sqrt(sum(x * x for x in diffs) / 2), rel=1e-15)
        assert e.pixels == [2, 2]

    def test_mask_mismatch_names_camera(self):
        gt = tiny_rig([np.full((2, 2), 1.0)] * 2)
        d = np.full((2, 2), 1.0)
        d[0, 0] = np.nan
        est = tiny_rig([np.full((2, 2), 1.0), d])
        with pytest.raises(ValueError, match="camera 1"):
            depth_error(est, gt)
