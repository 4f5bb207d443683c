"""Multi-view depth-map optimization with signed ray distance consistency."""

from .consistency import ConsistencyParams, c_phi_baseline, c_srdf, median_color, register_prior
from .fusion import TriangleMesh, TsdfVolume, bilateral_filter, clean_mesh, marching_cubes, tsdf_integrate
from .geometry import CameraView, MultiViewRig, RaySample, interpolate_depth, project, srdf, unproject
from .metrics import MetricsReport, PointCloud, chamfer, depth_error, sample_mesh
from .optimizer import CameraGroup, OptimizerConfig, SamplingSchedule, energy, make_groups, optimize, sample_rays
from .scene import SceneDescription, render, visual_hull_init

__version__ = "0.1.0"

__all__ = [
    "CameraGroup",
    "CameraView",
    "ConsistencyParams",
    "MetricsReport",
    "MultiViewRig",
    "OptimizerConfig",
    "PointCloud",
    "RaySample",
    "SamplingSchedule",
    "SceneDescription",
    "TriangleMesh",
    "TsdfVolume",
    "bilateral_filter",
    "c_phi_baseline",
    "c_srdf",
    "chamfer",
    "clean_mesh",
    "depth_error",
    "energy",
    "interpolate_depth",
    "make_groups",
    "marching_cubes",
    "median_color",
    "optimize",
    "project",
    "register_prior",
    "render",
    "sample_mesh",
    "sample_rays",
    "srdf",
    "tsdf_integrate",
    "unproject",
    "visual_hull_init",
]
