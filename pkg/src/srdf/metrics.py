"""Chamfer accuracy / completeness and depth-map error statistics."""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fusion import TriangleMesh
from .geometry import MultiViewRig

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "MetricsReport",
    "type": "object",
    "required": ["accuracy", "completeness", "chamfer", "n_recon", "n_gt"],
    "properties": {
        "accuracy": {"type": "number", "minimum": 0},
        "completeness": {"type": "number", "minimum": 0},
        "chamfer": {"type": "number", "minimum": 0},
        "n_recon": {"type": "integer", "minimum": 1},
        "n_gt": {"type": "integer", "minimum": 1},
        "depth": {
            "type": "object",
            "properties": {
                "mae": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "rmse": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "mae_all": {"type": "number", "minimum": 0},
                "rmse_all": {"type": "number", "minimum": 0},
                "pixels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "units": {"type": "string"},
        "chamfer_definition": {"type": "string"},
    },
}

CSV_FIELDS = ["accuracy", "completeness", "chamfer", "n_recon", "n_gt", "depth_mae", "depth_rmse"]


@dataclass
class PointCloud:
    points: np.ndarray
    face_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class DepthErrors:
    mae: list
    rmse: list
    pixels: list
    mae_all: float
    rmse_all: float


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    chamfer: float
    n_recon: int
    n_gt: int
    depth: DepthErrors | None = None
    units: str = "world"
    chamfer_definition: str = "mean of accuracy and completeness (unfiltered)"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.depth is None:
            d.pop("depth")
        if not self.extra:
            d.pop("extra")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        dm = "" if self.depth is None else repr(self.depth.mae_all)
        dr = "" if self.depth is None else repr(self.depth.rmse_all)
        writer.writerow([repr(self.accuracy), repr(self.completeness), repr(self.chamfer), self.n_recon, self.n_gt, dm, dr])
        return buf.getvalue()


def sample_mesh(mesh: TriangleMesh, count: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(mesh.faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u = rng.random((count, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    tri = mesh.vertices[mesh.faces[faces]]
    pts = tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])
    return PointCloud(pts, faces)


def _pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest reference point (k-d tree)."""
    _, nn = cKDTree(ref).query(query, k=1)
    # recompute with the same arithmetic as the brute-force path
    return _pair_distances(query, ref[nn])


def nearest_distances_brute(query: np.ndarray, ref: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s : s + chunk]
        out[s : s + chunk] = _pair_distances(q[:, None, :], ref[None, :, :]).min(axis=1)
    return out


def chamfer(recon: PointCloud, gt: PointCloud, brute_force: bool = False) -> MetricsReport:
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("both point clouds must be non-empty")
    nn = nearest_distances_brute if brute_force else nearest_distances
    acc = float(np.mean(nn(recon.points, gt.points)))
    comp = float(np.mean(nn(gt.points, recon.points)))
    return MetricsReport(acc, comp, (acc + comp) / 2, len(recon), len(gt))


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def depth_error(estimate: MultiViewRig, reference: MultiViewRig) -> DepthErrors:
    """Per-camera MAE / RMSE over foreground pixels."""
    if len(estimate) != len(reference):
        raise ValueError("rigs have different camera counts")
    mae, rmse, pixels, diffs = [], [], [], []
    for j, (a, b) in enumerate(zip(estimate.cameras, reference.cameras)):
        if a.shape != b.shape:
            raise ValueError(f"camera {j}: depth map sizes differ")
        if not np.array_equal(a.mask, b.mask):
            raise ValueError(f"camera {j}: foreground masks differ")
        diff = (a.depth - b.depth)[a.mask]
        diffs.append(diff)
        pixels.append(int(diff.size))
        mae.append(float(np.mean(np.abs(diff))) if diff.size else 0.0)
        rmse.append(float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0)
    all_d = np.concatenate(diffs)
    return DepthErrors(mae, rmse, pixels, float(np.mean(np.abs(all_d))), float(np.sqrt(np.mean(all_d * all_d))))
