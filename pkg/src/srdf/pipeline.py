"""End-to-end stages shared by the CLI and the experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .fusion import TriangleMesh, bilateral_filter, clean_mesh, fuse, marching_cubes
from .geometry import MultiViewRig
from .optimizer import OptimizerConfig, make_groups, optimize
from .scene import visual_hull_init

logger = logging.getLogger(__name__)


@dataclass
class Reconstruction:
    initial: MultiViewRig
    optimized: MultiViewRig
    log: list
    mesh: TriangleMesh | None = None
    info: dict = field(default_factory=dict)


def initialize(rig: MultiViewRig, cfg: RunConfig) -> MultiViewRig:
    out, misses = visual_hull_init(rig, cfg.hull_resolution)
    out.meta["hull_misses"] = misses
    return out


def optimize_depths(rig: MultiViewRig, cfg: RunConfig, progress=None):
    o = cfg.optimize
    groups = make_groups(rig, min(o.group_size, len(rig)))
    params = cfg.consistency.params()
    oc = OptimizerConfig(step_size=o.step_size, prior=cfg.consistency.prior, threads=cfg.threads, seed=cfg.seed)
    return optimize(rig, groups, o.schedule(), params, oc, progress)


def fuse_mesh(rig: MultiViewRig, cfg: RunConfig) -> TriangleMesh:
    f = cfg.fusion
    cams = []
    sigma_range = f.sigma_range if f.sigma_range is not None else 0.01 * rig.diameter
    for cam in rig.cameras:
        depth = bilateral_filter(cam.depth, cam.mask, f.sigma_spatial, sigma_range) if f.bilateral else cam.depth
        cams.append(cam.copy(depth=depth))
    volume = fuse(cams, rig.bbox_min, rig.bbox_max, f.resolution, f.trunc_voxels, f.pad, f.carve_background)
    mesh = marching_cubes(volume)
    if len(mesh.faces):
        mesh = clean_mesh(mesh, rig.cameras, f.min_component_fraction)
    return mesh


def reconstruct(rig: MultiViewRig, cfg: RunConfig, initial: MultiViewRig | None = None, with_mesh: bool = True, progress=None) -> Reconstruction:
    """Initialize (unless ``initial`` is given), optimize and fuse."""
    init = initial if initial is not None else initialize(rig, cfg)
    optimized, log = optimize_depths(init, cfg, progress)
    mesh = fuse_mesh(optimized, cfg) if with_mesh else None
    info = {"hull_misses": int(init.meta.get("hull_misses", 0))}
    if mesh is not None:
        info.update(faces=len(mesh.faces), vertices=len(mesh.vertices), watertight=mesh.is_watertight())
    return Reconstruction(init, optimized, log, mesh, info)


def gt_point_cloud(rig: MultiViewRig) -> np.ndarray:
    """Surface points seen by the cameras: every foreground pixel unprojected at its depth."""
    pts = []
    for cam in rig.cameras:
        fg = np.flatnonzero(cam.mask)
        pts.append(cam.unproject_pixels(fg, cam.depth.reshape(-1)[fg]))
    return np.concatenate(pts)
