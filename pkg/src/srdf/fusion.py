"""Depth-map post-processing and fusion into a triangle mesh."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from skimage import measure

from ._kernels import tsdf_accumulate
from .geometry import CameraView, bilinear_footprint, lookup_validity, sample_grid

logger = logging.getLogger(__name__)

# TSDF observations are accumulated as integers in units of tau / 2**20 so that
# the fused grid does not depend on the order in which cameras are integrated.
_QUANT_LEVELS = 2**20


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def __len__(self):
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def vertex_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def signed_volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def edge_counts(self) -> np.ndarray:
        """How many triangles share each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return len(self.faces) > 0 and bool(np.all(self.edge_counts() == 2))

    def compact(self) -> TriangleMesh:
        """Drop degenerate triangles and unreferenced vertices."""
        f = self.faces
        keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        f = f[keep]
        if len(f):
            keep = self.__class__(self.vertices, f).face_areas() > 0
            f = f[keep]
        used = np.unique(f)
        remap = np.full(len(self.vertices), -1)
        remap[used] = np.arange(len(used))
        normals = None if self.normals is None else self.normals[used]
        return TriangleMesh(self.vertices[used], remap[f], normals)


# -- bilateral filter -----------------------------------------------------------


def bilateral_filter(depth: np.ndarray, mask: np.ndarray, sigma_spatial: float = 2.0, sigma_range: float = 0.01) -> np.ndarray:
    """Edge-preserving smoothing restricted to foreground pixels.

    Each foreground pixel becomes the average of foreground neighbours within
    a window of half-width ``ceil(3 * sigma_spatial)``, weighted by a spatial
    Gaussian times a Gaussian on the depth difference. The range term is
    measured from the 3x3 foreground median rather than from the pixel itself,
    so an isolated spike is pulled back to its surroundings instead of being
    protected by its own range weight; step edges survive because the median
    keeps them.
    """
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ValueError("sigmas must be positive")
    h, w = depth.shape
    r = int(np.ceil(3 * sigma_spatial))
    d = np.where(mask, depth, 0.0)
    padded = np.pad(np.where(mask, depth, np.nan), 1, constant_values=np.nan)
    shifts = np.stack([padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        guide = np.where(mask, np.nanmedian(shifts, axis=0), 0.0)
    pad_d = np.pad(d, r)
    pad_m = np.pad(mask, r)
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nd = pad_d[r + dy : r + dy + h, r + dx : r + dx + w]
            nm = pad_m[r + dy : r + dy + h, r + dx : r + dx + w]
            ws = np.exp(-(dx * dx + dy * dy) / (2 * sigma_spatial**2))
            wr = np.exp(-((nd - guide) ** 2) / (2 * sigma_range**2))
            wt = np.where(nm, ws * wr, 0.0)
            # accumulate offsets so a constant map is an exact fixed point
            num += wt * (nd - d)
            den += wt
    out = depth.copy()
    ok = mask & (den > 0)
    out[ok] = d[ok] + num[ok] / den[ok]
    return out


# -- TSDF -----------------------------------------------------------------------


@dataclass
class TsdfVolume:
    """Regular grid of truncated signed distances (positive in free space).

    Values live at voxel centers ``origin + (index + 0.5) * voxel_size``.
    """

    origin: np.ndarray
    voxel_size: float
    resolution: tuple
    trunc: float
    sdf_sum: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_bbox(cls, bbox_min, bbox_max, resolution: int = 256, pad: float = 0.05, trunc_voxels: float = 3.0):
        lo = np.asarray(bbox_min, dtype=np.float64)
        hi = np.asarray(bbox_max, dtype=np.float64)
        ext = hi - lo
        lo = lo - pad * ext
        hi = hi + pad * ext
        vs = float((hi - lo).max() / resolution)
        res = tuple(int(np.ceil(e / vs)) for e in (hi - lo))
        return cls(lo, vs, res, trunc_voxels * vs, np.zeros(res, dtype=np.int64), np.zeros(res, dtype=np.int32))

    @property
    def quantum(self) -> float:
        return self.trunc / _QUANT_LEVELS

    @property
    def tsdf(self) -> np.ndarray:
        """Weighted-average distance; unobserved voxels read as ``+trunc``."""
        out = np.full(self.resolution, self.trunc)
        seen = self.weight > 0
        out[seen] = self.sdf_sum[seen] * self.quantum / self.weight[seen]
        return out

    def centers(self, k_slice=slice(None)) -> np.ndarray:
        ii, jj, kk = np.meshgrid(
            np.arange(self.resolution[0]), np.arange(self.resolution[1]), np.arange(self.resolution[2])[k_slice], indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1)
        return self.origin + (idx + 0.5) * self.voxel_size

    def copy(self) -> TsdfVolume:
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.resolution, self.trunc, self.sdf_sum.copy(), self.weight.copy())


def tsdf_integrate(volume: TsdfVolume, camera: CameraView, carve_background: bool = False) -> TsdfVolume:
    """Fuse one depth map into the volume (in place; also returned).

    For every voxel whose projection has a valid bilinear depth lookup, the
    signed distance ``depth - ray_distance`` is clamped to ``[-trunc, trunc]``
    and averaged in, unless it lies more than ``trunc`` behind the surface.
    With ``carve_background``, voxels projecting entirely onto background
    pixels are observed as free space (``+trunc``).
    """
    tsdf_accumulate(volume, camera, carve_background)
    return volume


def tsdf_integrate_reference(volume: TsdfVolume, camera: CameraView, carve_background: bool = False, slab: int = 16) -> TsdfVolume:
    """Vectorized numpy version of :func:`tsdf_integrate`, kept as a cross-check."""
    nz = volume.resolution[2]
    depth = np.nan_to_num(camera.depth, nan=0.0)
    for k0 in range(0, nz, slab):
        sl = slice(k0, min(k0 + slab, nz))
        pts = volume.centers(sl).reshape(-1, 3)
        uv, Z, in_front = camera.project_points(pts)
        idx, w = bilinear_footprint(uv, camera.width, camera.height)
        valid = in_front & lookup_validity(camera, uv, idx, w)
        D = sample_grid(depth, idx, w)
        d = D - Z
        obs = valid & (d > -volume.trunc)
        val = np.clip(d, -volume.trunc, volume.trunc)
        if carve_background:
            bg = in_front & camera.in_image(uv) & ~valid & ~np.any(camera.mask.reshape(-1)[idx], axis=1)
            obs |= bg
            val = np.where(bg, volume.trunc, val)
        q = np.rint(np.where(obs, val, 0.0) / volume.quantum).astype(np.int64)
        shape = (volume.resolution[0], volume.resolution[1], sl.stop - sl.start)
        volume.sdf_sum[:, :, sl] += q.reshape(shape)
        volume.weight[:, :, sl] += obs.reshape(shape).astype(np.int32)
    return volume


def marching_cubes(volume: TsdfVolume, level: float = 0.0) -> TriangleMesh:
    """Zero-level surface of the fused field, outward (free-space) facing.

    Only cells whose eight corners are all observed produce triangles.
    """
    field = volume.tsdf
    seen = volume.weight > 0
    if not (np.any(field[seen] > level) and np.any(field[seen] < level)):
        logger.warning("marching cubes: no sign change among observed voxels")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(field, level, gradient_direction="descent", allow_degenerate=False)
    cell_ok = seen[:-1, :-1, :-1].copy()
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                cell_ok &= seen[di : di + cell_ok.shape[0], dj : dj + cell_ok.shape[1], dk : dk + cell_ok.shape[2]]
    cell = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cell = np.clip(cell, 0, np.array(cell_ok.shape) - 1)
    faces = faces[cell_ok[cell[:, 0], cell[:, 1], cell[:, 2]]]
    mesh = TriangleMesh(volume.origin + (verts + 0.5) * volume.voxel_size, faces).compact()
    if len(mesh.faces) and mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    mesh.normals = mesh.vertex_normals()
    return mesh


def fuse(cameras: list[CameraView], bbox_min, bbox_max, resolution: int = 256, trunc_voxels: float = 3.0, pad: float = 0.05, carve_background: bool = False) -> TsdfVolume:
    volume = TsdfVolume.from_bbox(bbox_min, bbox_max, resolution, pad, trunc_voxels)
    for cam in cameras:
        tsdf_integrate(volume, cam, carve_background)
    return volume


# -- cleaning -------------------------------------------------------------------


def clean_mesh(mesh: TriangleMesh, cameras: list[CameraView], min_component_fraction: float = 0.001) -> TriangleMesh:
    """Drop geometry that every observing camera places outside its silhouette.

    Vertices seen by at least one camera and outside the silhouette in all
    cameras that see them are removed along with their triangles; then
    connected components smaller than ``min_component_fraction`` of the
    triangle count are discarded.
    """
    if len(mesh.faces) == 0:
        return mesh
    v = mesh.vertices
    seen_any = np.zeros(len(v), dtype=bool)
    inside_any = np.zeros(len(v), dtype=bool)
    for cam in cameras:
        uv, _, in_front = cam.project_points(v)
        seen = in_front & cam.in_image(uv)
        col = np.clip(np.rint(np.nan_to_num(uv[:, 0])), 0, cam.width - 1).astype(np.int64)
        row = np.clip(np.rint(np.nan_to_num(uv[:, 1])), 0, cam.height - 1).astype(np.int64)
        seen_any |= seen
        inside_any |= seen & cam.mask[row, col]
    drop = seen_any & ~inside_any
    faces = mesh.faces[~np.any(drop[mesh.faces], axis=1)]
    out = TriangleMesh(v, faces, mesh.normals).compact()
    if len(out.faces) == 0:
        return out
    n_v = len(out.vertices)
    f = out.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_v, n_v))
    _, label = connected_components(adj, directed=False)
    face_label = label[f[:, 0]]
    sizes = np.bincount(face_label)
    keep = sizes[face_label] >= min_component_fraction * len(f)
    return TriangleMesh(out.vertices, f[keep], out.normals).compact()
