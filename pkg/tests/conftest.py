import numpy as np
import pytest

from srdf.geometry import CameraView, MultiViewRig
from srdf.scene import SceneDescription, Sphere, Texture, make_camera, orbit_rig, render

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def identity_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1, **kw) -> CameraView:
    return CameraView(fx, fy, cx, cy, np.eye(3), np.zeros(3), width, height, **kw)


def toy_scene(width=8, separation_deg=25.0, seed=0) -> MultiViewRig:
    """Two cameras whose 8x8 images are filled by a textured unit sphere."""
    a = np.radians(separation_deg / 2)
    eyes = [3.0 * np.array([np.sin(s * a), 0.0, np.cos(s * a)]) for s in (-1, 1)]
    cams = [make_camera(e, (0, 0, 0), width, width, 20.0, up=(0, 1, 0)) for e in eyes]
    rig = MultiViewRig(cams, [-1.2] * 3, [1.2] * 3)
    scene = SceneDescription([Sphere([0, 0, 0], 1.0, Texture(frequency=6.0, seed=seed))])
    return render(scene, rig)


@pytest.fixture(scope="session")
def sphere_rig():
    """Eight cameras around a textured sphere, 48x48 pixels."""
    scene = SceneDescription([Sphere([0.0, 0.0, 0.0], 0.5, Texture(frequency=20.0, seed=3))])
    rig = orbit_rig(8, 2.6, 48, 48, 30.0, [-0.7] * 3, [0.7] * 3)
    return render(scene, rig)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
