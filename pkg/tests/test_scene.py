import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srdf import io
from srdf.geometry import MultiViewRig, ray_to_planar, unproject
from srdf.scene import (
    Box,
    SceneDescription,
    SceneError,
    Sphere,
    Texture,
    carve,
    import_depth_maps,
    make_camera,
    orbit_rig,
    render,
    scene_from_dict,
    visual_hull_init,
)


def unit_sphere(**tex):
    return SceneDescription([Sphere([0, 0, 0], 1.0, Texture(**tex))])


def sphere_depth_oracle(cam, center, radius):
    """Closed-form first hit of every pixel ray with a sphere (NaN on miss)."""
    d = cam.all_ray_directions().reshape(-1, 3)
    oc = cam.center - np.asarray(center, dtype=float)
    b = d @ oc
    disc = b * b - (oc @ oc - radius**2)
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where(disc >= 0, t, np.nan).reshape(cam.shape)


@pytest.fixture(scope="module")
def hull16():
    scene = SceneDescription([Sphere([0, 0, 0], 0.6, Texture(frequency=20, seed=1))])
    gt = render(scene, orbit_rig(16, 3.2, 128, 128, 32, [-1] * 3, [1] * 3))
    init, misses = visual_hull_init(gt, 128)
    return gt, init, misses


class TestRender:
    def test_center_pixel_on_axis(self):
        cam = make_camera([0, 0, 3], [0, 0, 0], 33, 33, 30, up=(0, 1, 0))
        out = render(unit_sphere(), MultiViewRig([cam, cam.copy()], [-1] * 3, [1] * 3))
        assert out.cameras[0].depth[16, 16] == pytest.approx(2.0, abs=1e-12)

    def test_deterministic(self):
        rig = orbit_rig(3, 3, 24, 24, 40, [-1] * 3, [1] * 3)
        a, b = render(unit_sphere(), rig), render(unit_sphere(), rig)
        for x, y in zip(a.cameras, b.cameras):
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.depth, y.depth, equal_nan=True)

    def test_noise_seeded(self):
        scene = SceneDescription([Sphere([0, 0, 0], 1.0)], noise=0.05)
        rig = orbit_rig(2, 3, 16, 16, 40, [-1] * 3, [1] * 3)
        a, b, c = render(scene, rig, seed=4), render(scene, rig, seed=4), render(scene, rig, seed=5)
        assert np.array_equal(a.cameras[0].image, b.cameras[0].image)
        assert not np.array_equal(a.cameras[0].image, c.cameras[0].image)

    def test_matches_analytic_depth(self):
        rig = orbit_rig(4, 3.0, 40, 40, 40, [-1] * 3, [1] * 3)
        out = render(SceneDescription([Sphere([0.1, -0.2, 0.05], 0.7)]), rig)
        for cam in out.cameras:
            oracle = sphere_depth_oracle(cam, [0.1, -0.2, 0.05], 0.7)
            assert np.array_equal(np.isnan(oracle), ~cam.mask)
            np.testing.assert_allclose(cam.depth[cam.mask], oracle[cam.mask], rtol=1e-12)

    def test_color_is_view_independent(self):
        tex = Texture(frequency=10, seed=2)
        eyes = [[0.5, 0, 3], [-0.5, 0.3, 3]]
        cams = [make_camera(e, [0, 0, 0], 64, 64, 40, up=(0, 1, 0)) for e in eyes]
        out = render(SceneDescription([Sphere([0, 0, 0], 1.0, tex)]), MultiViewRig(cams, [-1] * 3, [1] * 3))
        a, b = out.cameras
        checked = 0
        for i in np.flatnonzero(a.mask)[::37]:
            X = unproject(a, int(i), float(a.depth.reshape(-1)[i]))
            u, v = b.project_points(X[None])[0][0]
            r, c = int(round(v)), int(round(u))
            if not (0 <= r < b.height and 0 <= c < b.width) or not b.mask[r, c]:
                continue
            Y = unproject(b, (r, c), float(b.depth[r, c]))
            # both images equal the albedo at their own hit point
            np.testing.assert_allclose(a.image.reshape(-1, 3)[i], tex(X[None])[0], atol=1e-12)
            np.testing.assert_allclose(b.image[r, c], tex(Y[None])[0], atol=1e-12)
            checked += 1
        assert checked > 20

    def test_same_surface_point_same_color(self):
        # a point that is a pixel center in both views
        tex = Texture(frequency=10, seed=2)
        X = np.array([0.0, 0.0, 1.0])
        cams = [make_camera(X + 2.0 * np.array(d), X, 9, 9, 20, up=(0, 1, 0)) for d in ([0.3, 0, 1], [-0.2, 0.2, 1])]
        out = render(SceneDescription([Sphere([0, 0, 0], 1.0, tex)]), MultiViewRig(cams, [-2.6] * 3, [2.6] * 3))
        colors = [c.image[4, 4] for c in out.cameras]
        depths = [c.depth[4, 4] for c in out.cameras]
        assert all(np.linalg.norm(unproject(c, (4, 4), d) - X) < 1e-9 for c, d in zip(out.cameras, depths))
        # the two hit points agree to rounding, so the albedos do too
        np.testing.assert_allclose(colors[0], colors[1], atol=1e-9)

    def test_surface_consistency(self):
        scene = SceneDescription([Sphere([-0.3, 0, 0], 0.4), Box([0.4, 0.1, 0], [0.4, 0.5, 0.6])])
        out = render(scene, orbit_rig(3, 3, 32, 32, 40, [-1] * 3, [1] * 3))
        for cam in out.cameras:
            fg = np.flatnonzero(cam.mask)
            rows, cols = np.divmod(fg, cam.width)
            pts = cam.center + cam.depth.reshape(-1)[fg, None] * cam.ray_directions(rows, cols)
            assert np.abs(scene.sdf(pts)).max() <= 1e-6

    def test_mask_consistency(self, sphere_rig):
        for cam in sphere_rig.cameras:
            assert np.array_equal(np.isfinite(cam.depth), cam.mask)

    def test_degenerate_viewpoint(self):
        # the rig refuses cameras inside its box, so swap one in afterwards
        rig = orbit_rig(2, 3, 8, 8, 40, [-1.5] * 3, [1.5] * 3)
        rig.cameras[0] = make_camera([0, 0, 0.2], [0, 0, 1], 8, 8, 40)
        with pytest.raises(SceneError, match="degenerate viewpoint"):
            render(unit_sphere(), rig)

    def test_shape_outside_box(self):
        with pytest.raises(SceneError):
            render(SceneDescription([Sphere([0, 0, 0], 2.0)]), orbit_rig(2, 5, 8, 8, 40, [-1] * 3, [1] * 3))

    def test_scene_from_dict(self):
        scene = scene_from_dict({"shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.5, "texture": {"type": "checker"}}], "noise": 0.01})
        assert scene.noise == 0.01 and scene.leaves()[0].texture.kind == "checker"
        with pytest.raises(SceneError):
            scene_from_dict({"shapes": [{"type": "cone"}]})


class TestVisualHull:
    def test_containment_and_quality(self, hull16):
        gt, init, misses = hull16
        assert misses == 0
        diff = np.concatenate([(g.depth - i.depth)[g.mask] for g, i in zip(gt.cameras, init.cameras)])
        assert diff.min() >= 0
        assert diff.mean() < 0.1 * 0.6

    def test_every_foreground_pixel_finite(self, hull16):
        _, init, _ = hull16
        for cam in init.cameras:
            assert np.all(np.isfinite(cam.depth[cam.mask]))
            assert np.all(np.isnan(cam.depth[~cam.mask]))

    def test_one_camera_is_silhouette_cone(self):
        cam = make_camera([0, 0, 3], [0, 0, 0], 24, 24, 40, up=(0, 1, 0))
        rig = render(unit_sphere(), MultiViewRig([cam, cam.copy()], [-1] * 3, [1] * 3))
        grid = carve(rig.cameras[:1], rig.bbox_min, rig.bbox_max, 32)
        # analytic cone: angle off the axis towards the sphere center vs its half-angle
        rel = grid.centers() - cam.center
        ang = np.degrees(np.arccos(np.clip(rel @ -cam.center / (np.linalg.norm(rel, axis=1) * 3.0), -1, 1)))
        half = np.degrees(np.arcsin(1.0 / 3.0))
        occ = grid.occupancy.reshape(-1)
        assert np.all(occ[ang < half])
        # outside the cone by more than a voxel footprint plus a pixel, but still in view
        uv, _, front = cam.project_points(grid.centers())
        in_view = front & cam.in_image(uv)
        assert not np.any(occ[in_view & (ang > half + 5.0)])
        assert np.all(occ[~in_view])

    def test_rejects_low_resolution(self, sphere_rig):
        with pytest.raises(ValueError):
            visual_hull_init(sphere_rig, 8)

    def test_miss_falls_back_to_box_entry(self):
        cams = [make_camera([0, 0, 3], [0, 0, 0], 16, 16, 40, up=(0, 1, 0)), make_camera([3, 0, 0], [0, 0, 0], 16, 16, 40)]
        rig = render(unit_sphere(), MultiViewRig(cams, [-1] * 3, [1] * 3))
        # corrupt one silhouette so the other camera's rays find nothing
        rig.cameras[1].mask[:] = False
        rig.cameras[1].mask[0, 0] = True
        rig.cameras[1].depth = np.where(rig.cameras[1].mask, 1.0, np.nan)
        out, misses = visual_hull_init(rig, 16)
        assert misses > 0 and out.meta["hull_misses"] == misses
        assert np.all(np.isfinite(out.cameras[0].depth[out.cameras[0].mask]))


class TestImport:
    def test_round_trip(self, sphere_rig, tmp_path):
        files = []
        for j, cam in enumerate(sphere_rig.cameras):
            files.append(tmp_path / f"{j}.raw")
            io.write_raw_depth(files[-1], cam.depth)
        out = import_depth_maps(sphere_rig, files)
        for a, b in zip(out.cameras, sphere_rig.cameras):
            # stored as float32 on disk
            assert np.array_equal(a.depth, b.depth.astype(np.float32).astype(np.float64), equal_nan=True)
        again = []
        for j, cam in enumerate(out.cameras):
            again.append(tmp_path / f"{j}.pfm")
            io.write_pfm(again[-1], cam.depth)
        back = import_depth_maps(sphere_rig, again)
        for a, b in zip(out.cameras, back.cameras):
            assert np.array_equal(a.depth, b.depth, equal_nan=True)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 48 * 48 - 1))
    def test_planar_conversion(self, sphere_rig, j, pix):
        cam = sphere_rig.cameras[j]
        planar = [ray_to_planar(c, np.where(c.mask, c.depth, 1.0)) for c in sphere_rig.cameras]
        out = import_depth_maps(sphere_rig, planar, planar=True)
        r, c = divmod(pix, cam.width)
        if not cam.mask[r, c]:
            assert np.isnan(out.cameras[j].depth[r, c])
            return
        x, y = (c - cam.cx) / cam.fx, (r - cam.cy) / cam.fy
        cos = 1.0 / np.sqrt(x * x + y * y + 1.0)
        assert out.cameras[j].depth[r, c] == pytest.approx(planar[j][r, c] / cos, rel=1e-12)

    def test_negative_depth_rejected(self, sphere_rig):
        grids = [np.where(c.mask, c.depth, 0.0) for c in sphere_rig.cameras]
        r, c = np.argwhere(sphere_rig.cameras[2].mask)[0]
        grids[2][r, c] = -1.0
        with pytest.raises(ValueError, match="camera 2"):
            import_depth_maps(sphere_rig, grids)

    def test_dimension_mismatch_names_camera(self, sphere_rig):
        grids = [c.depth for c in sphere_rig.cameras]
        grids[5] = np.ones((10, 10))
        with pytest.raises(ValueError, match="camera 5"):
            import_depth_maps(sphere_rig, grids)

    def test_wrong_count(self, sphere_rig):
        with pytest.raises(ValueError):
            import_depth_maps(sphere_rig, [sphere_rig.cameras[0].depth])
