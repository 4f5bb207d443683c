import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_camera
from srdf.geometry import (
    NO_DEPTH,
    BehindCamera,
    CameraView,
    InvalidLookup,
    MultiViewRig,
    OutOfView,
    interpolate_depth,
    look_at,
    planar_to_ray,
    project,
    ray_to_planar,
    srdf,
    unproject,
)


def pinhole_oracle(K, R, t, X):
    """Textbook homogeneous projection, written independently of CameraView."""
    Xc = R @ X + t
    h = K @ Xc
    return h[:2] / h[2], math.sqrt(float(Xc @ Xc))


def camera_with_depth(depth, mask=None, fx=10.0):
    h, w = depth.shape
    mask = np.ones((h, w), dtype=bool) if mask is None else mask
    return CameraView(fx, fx, (w - 1) / 2, (h - 1) / 2, np.eye(3), np.zeros(3), w, h, mask=mask, depth=np.where(mask, depth, NO_DEPTH))


def random_camera(seed, width=64, height=48):
    rng = np.random.default_rng(seed)
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    R, t = look_at(eye, rng.normal(scale=0.2, size=3))
    return CameraView(70.0, 65.0, width / 2 - 0.3, height / 2 + 0.7, R, t, width, height)


class TestProject:
    def test_canonical_on_axis(self):
        (u, v), Z = project(identity_camera(), [0, 0, 1])
        assert (u, v, Z) == (0.0, 0.0, 1.0)

    def test_hand_computed_pinhole(self):
        cam = identity_camera(100, 100, 50, 50, width=101, height=101)
        (u, v), Z = project(cam, [0.1, 0, 1])
        (uo, vo), Zo = pinhole_oracle(cam.intrinsics, cam.rotation, cam.translation, np.array([0.1, 0.0, 1.0]))
        assert u == pytest.approx(60.0, abs=1e-12) and v == pytest.approx(50.0, abs=1e-12)
        assert Z == pytest.approx(math.sqrt(1.01), abs=1e-15)
        assert (u, v, Z) == pytest.approx((uo, vo, Zo), abs=1e-12)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project(identity_camera(), [0, 0, -1])

    def test_at_center_is_behind(self):
        with pytest.raises(BehindCamera):
            project(identity_camera(), [0, 0, 0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            project(identity_camera(), [0, np.nan, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_matches_oracle_on_random_poses(self, seed, x, y, z):
        cam = random_camera(seed)
        X = np.array([x, y, z])
        uv_o, Z_o = pinhole_oracle(cam.intrinsics, cam.rotation, cam.translation, X)
        (u, v), Z = project(cam, X)
        np.testing.assert_allclose([u, v], uv_o, rtol=1e-12, atol=1e-9)
        assert Z == pytest.approx(Z_o, rel=1e-12)
        assert Z == pytest.approx(np.linalg.norm(X - cam.center), rel=1e-12)


class TestInterpolateDepth:
    def test_at_node(self):
        d = np.arange(12.0).reshape(3, 4) + 1.0
        d[1, 2] = 2.0
        D, w = interpolate_depth(camera_with_depth(d), (2.0, 1.0))
        assert D == 2.0
        assert w == [(1 * 4 + 2, 1.0)]

    def test_symmetric_midpoint(self):
        d = np.array([[1.0, 2.0], [3.0, 4.0]])
        D, w = interpolate_depth(camera_with_depth(d), (0.5, 0.5))
        assert D == 2.5
        assert sorted(w) == [(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]

    def test_masked_neighbour_invalid(self):
        d = np.ones((3, 3))
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        with pytest.raises(InvalidLookup):
            interpolate_depth(camera_with_depth(d, mask), (0.5, 0.5))

    def test_masked_pixel_with_zero_weight_is_fine(self):
        d = np.ones((3, 3))
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        D, _ = interpolate_depth(camera_with_depth(d, mask), (0.0, 0.5))
        assert D == 1.0

    def test_out_of_view(self):
        cam = camera_with_depth(np.ones((4, 4)))
        for uv in [(-0.01, 1), (1, 3.01), (np.nan, 1)]:
            with pytest.raises(OutOfView):
                interpolate_depth(cam, uv)

    def test_last_row_and_column_reachable(self):
        d = np.arange(16.0).reshape(4, 4) + 1
        D, w = interpolate_depth(camera_with_depth(d), (3.0, 3.0))
        assert D == 16.0 and w == [(15, 1.0)]

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-3, 3), st.floats(-3, 3), st.floats(1, 5),
        st.floats(0, 6), st.floats(0, 4),
    )
    def test_exact_on_affine_maps(self, a, b, c, u, v):
        rows, cols = np.mgrid[0:5, 0:7]
        d = a * 0.1 * cols + b * 0.1 * rows + c + 1.0
        D, w = interpolate_depth(camera_with_depth(d), (u, v))
        assert D == pytest.approx(a * 0.1 * u + b * 0.1 * v + c + 1.0, abs=1e-12)
        assert sum(x for _, x in w) == pytest.approx(1.0, abs=1e-12)


class TestSrdf:
    def setup_method(self):
        self.cam = camera_with_depth(np.full((9, 9), 2.0))

    def test_zero_on_predicted_surface(self):
        X = unproject(self.cam, (3, 5), 2.0)
        assert abs(srdf(self.cam, X)) < 1e-9

    def test_free_space_positive(self):
        # independent scalar evaluation: constant map, so D = 2 wherever X lands
        X = unproject(self.cam, (2, 6), 1.5)
        Z = math.dist(X, self.cam.center)
        assert srdf(self.cam, X) == pytest.approx(2.0 - Z, abs=1e-12)
        assert srdf(self.cam, X) == pytest.approx(0.5, abs=1e-12)

    def test_beyond_surface_negative(self):
        X = unproject(self.cam, (2, 6), 2.5)
        assert srdf(self.cam, X) == pytest.approx(-0.5, abs=1e-12)

    def test_propagates_signals(self):
        with pytest.raises(BehindCamera):
            srdf(self.cam, [0, 0, -1])
        with pytest.raises(OutOfView):
            srdf(self.cam, [10, 0, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 80), st.floats(0.2, 4.0), st.floats(0.01, 1.0))
    def test_slope_minus_one_along_own_ray(self, pix, t, dt):
        rng = np.random.default_rng(pix)
        cam = camera_with_depth(rng.uniform(1.0, 3.0, (9, 9)))
        s1 = srdf(cam, unproject(cam, pix, t))
        s2 = srdf(cam, unproject(cam, pix, t + dt))
        assert (s2 - s1) / dt == pytest.approx(-1.0, abs=1e-9)

    def test_zero_set_on_every_foreground_pixel(self, sphere_rig):
        cam = sphere_rig.cameras[0]
        for i in np.flatnonzero(cam.mask)[::7]:
            X = unproject(cam, int(i), float(cam.depth.reshape(-1)[i]))
            assert abs(srdf(cam, X)) < 1e-9


class TestUnproject:
    def test_center_pixel_on_axis(self):
        cam = identity_camera(50, 50, 2, 2, width=5, height=5)
        np.testing.assert_allclose(unproject(cam, (2, 2), 1.0), [0, 0, 1], atol=1e-15)

    def test_corner_pixel_norm(self):
        cam = random_camera(7)
        X = unproject(cam, (cam.height - 1, cam.width - 1), 2.0)
        assert np.linalg.norm(X - cam.center) == pytest.approx(2.0, abs=1e-12)

    def test_rejects_bad_input(self):
        cam = identity_camera(50, 50, 2, 2, width=5, height=5)
        with pytest.raises(ValueError):
            unproject(cam, (2, 2), 0.0)
        with pytest.raises(ValueError):
            unproject(cam, (5, 0), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 48 * 64 - 1), st.floats(0.05, 50.0))
    def test_round_trip(self, seed, pix, d):
        cam = random_camera(seed)
        (u, v), Z = project(cam, unproject(cam, pix, d))
        r, c = divmod(pix, cam.width)
        assert abs(u - c) < 1e-9 and abs(v - r) < 1e-9
        assert abs(Z - d) < 1e-9

    def test_named_example_round_trip(self):
        cam = random_camera(11)
        (u, v), Z = project(cam, unproject(cam, (17, 23), 3.7))
        assert (u, v) == pytest.approx((23, 17), abs=1e-9) and Z == pytest.approx(3.7, abs=1e-9)


class TestInvariants:
    def test_rotation_must_be_proper(self):
        with pytest.raises(ValueError):
            CameraView(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 2, 2)
        with pytest.raises(ValueError):
            CameraView(1, 1, 0, 0, np.eye(3) * 1.001, np.zeros(3), 2, 2)

    def test_intrinsics_checked(self):
        with pytest.raises(ValueError):
            CameraView(0, 1, 0, 0, np.eye(3), np.zeros(3), 2, 2)
        with pytest.raises(ValueError):
            CameraView(1, 1, 2, 0, np.eye(3), np.zeros(3), 2, 2)

    def test_depth_sentinel_and_positivity(self):
        cam = camera_with_depth(np.ones((3, 3)))
        cam.check_depth()
        cam.depth[0, 0] = 0.0
        with pytest.raises(ValueError):
            cam.check_depth()
        cam = camera_with_depth(np.ones((3, 3)))
        cam.mask[1, 1] = False
        with pytest.raises(ValueError, match="NO_DEPTH"):
            cam.check_depth()

    def test_rig_needs_two_cameras_outside_box(self):
        far = identity_camera().copy(translation=np.array([0.0, 0.0, 5.0]))
        with pytest.raises(ValueError):
            MultiViewRig([far], [-1] * 3, [1] * 3)
        with pytest.raises(ValueError, match="inside"):
            MultiViewRig([far, identity_camera()], [-1] * 3, [1] * 3)
        assert len(MultiViewRig([far, far], [-1] * 3, [1] * 3)) == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_look_at_is_proper_rotation(self, seed):
        cam = random_camera(seed)
        R = cam.rotation
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_planar_ray_conversion(self):
        cam = random_camera(3, 16, 12)
        z = np.random.default_rng(0).uniform(1, 2, cam.shape)
        ray = planar_to_ray(cam, z)
        r, c = 4, 13
        cos = 1.0 / np.linalg.norm([(c - cam.cx) / cam.fx, (r - cam.cy) / cam.fy, 1.0])
        assert ray[r, c] == pytest.approx(z[r, c] / cos, rel=1e-12)
        np.testing.assert_allclose(ray_to_planar(cam, ray), z, rtol=1e-12)
