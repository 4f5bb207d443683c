"""Synthetic scenes: analytic ray casting, Lambertian rendering and visual-hull initialization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import io
from .geometry import NO_DEPTH, CameraView, MultiViewRig, look_at, planar_to_ray

logger = logging.getLogger(__name__)


class SceneError(Exception):
    pass


# -- textures -------------------------------------------------------------------


@dataclass
class Texture:
    """Procedural solid albedo: a function of the 3D surface point only.

    kinds: ``constant`` (``color``), ``checker`` (``colors``, ``scale``),
    ``gradient`` (``colors`` blended along ``axis``), ``noise`` (sum of
    ``waves`` random-direction sinusoids whose frequencies span three octaves
    up to ``frequency``, ``seed``).
    """

    kind: str = "noise"
    color: tuple = (0.7, 0.7, 0.7)
    colors: tuple = ((0.9, 0.9, 0.9), (0.15, 0.15, 0.15))
    scale: float = 0.25
    frequency: float = 8.0
    axis: int = 2
    seed: int = 0
    waves: int = 12

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        n = p.shape[0]
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.color, dtype=np.float64), (n, 3)).copy()
        if self.kind == "checker":
            cells = np.floor(p / self.scale).astype(np.int64).sum(axis=1) % 2
            return np.asarray(self.colors, dtype=np.float64)[cells]
        if self.kind == "gradient":
            a, b = np.asarray(self.colors, dtype=np.float64)
            s = np.clip(0.5 + 0.5 * np.tanh(p[:, self.axis] / self.scale), 0.0, 1.0)[:, None]
            return (1 - s) * a + s * b
        if self.kind == "noise":
            rng = np.random.default_rng(self.seed)
            out = np.zeros((n, 3))
            for c in range(3):
                dirs = rng.normal(size=(self.waves, 3))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
                # log-uniform over three octaves below ``frequency``
                freqs = self.frequency * 2.0 ** rng.uniform(-3.0, 0.0, size=self.waves)
                phases = rng.uniform(0, 2 * np.pi, size=self.waves)
                out[:, c] = np.sin(p @ (dirs * freqs[:, None]).T + phases).mean(axis=1)
            return np.clip(0.5 + 1.2 * out, 0.02, 0.98)
        raise SceneError(f"unknown texture kind {self.kind!r}")


# -- shapes ---------------------------------------------------------------------


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        t = np.full(len(dirs), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        ok = hit & (t0 > 0)
        t[ok] = t0[ok]
        return t

    def sdf(self, points):
        return np.linalg.norm(points - self.center, axis=-1) - self.radius

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def albedo(self, points):
        return self.texture(points)


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)

    def intersect(self, origins, dirs):
        half = self.size / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (self.center - half - origins) * inv
            t2 = (self.center + half - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmin > 0)
        return np.where(ok, tmin, np.inf)

    def sdf(self, points):
        q = np.abs(points - self.center) - self.size / 2
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        return self.center - self.size / 2, self.center + self.size / 2

    def albedo(self, points):
        return self.texture(points)


@dataclass
class TriangleMeshShape:
    vertices: np.ndarray
    faces: np.ndarray
    texture: Texture = field(default_factory=Texture)
    face_colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self._last_face = None

    def _hits(self, origins, dirs, chunk=256):
        """Nearest positive hit distance and face id per ray (Moller-Trumbore)."""
        tri = self.vertices[self.faces]
        best = np.full(len(dirs), np.inf)
        face = np.full(len(dirs), -1)
        for s in range(0, len(tri), chunk):
            a, b, c = (tri[s : s + chunk, k][None] for k in range(3))
            e1, e2 = b - a, c - a
            pvec = np.cross(dirs[:, None], e2)
            det = np.einsum("tk,rtk->rt", e1[0], pvec)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
                tvec = origins[:, None] - a
                u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
                qvec = np.cross(tvec, e1)
                v = np.einsum("rk,rtk->rt", dirs, qvec) * inv
                t = np.einsum("tk,rtk->rt", e2[0], qvec) * inv
            ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
            t = np.where(ok, t, np.inf)
            j = np.argmin(t, axis=1)
            tj = t[np.arange(len(dirs)), j]
            better = tj < best
            best[better] = tj[better]
            face[better] = s + j[better]
        return best, face

    def intersect(self, origins, dirs):
        best = np.full(len(dirs), np.inf)
        face = np.full(len(dirs), -1)
        for s in range(0, len(dirs), 1024):
            best[s : s + 1024], face[s : s + 1024] = self._hits(origins[s : s + 1024], dirs[s : s + 1024])
        self._last_face = face
        return best

    def contains(self, point) -> bool:
        # parity of crossings along an arbitrary fixed direction
        d = np.array([[0.5773, 0.5774, 0.5775]])
        d /= np.linalg.norm(d)
        o = np.asarray(point, dtype=np.float64)[None]
        count, t0 = 0, 0.0
        while True:
            t, _ = self._hits(o + t0 * d, d)
            if not np.isfinite(t[0]):
                return count % 2 == 1
            count += 1
            t0 += t[0] + 1e-9

    def sdf(self, points):
        raise NotImplementedError("mesh shapes have no analytic SDF")

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def albedo(self, points, faces=None):
        if self.face_colors is not None and faces is not None:
            return np.asarray(self.face_colors, dtype=np.float64)[faces]
        return self.texture(points)


@dataclass
class Union:
    children: list

    def intersect(self, origins, dirs):
        return np.min([c.intersect(origins, dirs) for c in self.children], axis=0)

    def sdf(self, points):
        return np.min([c.sdf(points) for c in self.children], axis=0)

    def bounds(self):
        lo, hi = zip(*(c.bounds() for c in self.children))
        return np.min(lo, axis=0), np.max(hi, axis=0)


@dataclass
class SceneDescription:
    shapes: list
    background: tuple = (0.0, 0.0, 0.0)
    noise: float = 0.0
    light: float = 1.0

    def __post_init__(self):
        if not self.shapes:
            raise SceneError("scene has no shapes")

    def leaves(self):
        out = []

        def walk(s):
            if isinstance(s, Union):
                for c in s.children:
                    walk(c)
            else:
                out.append(s)

        for s in self.shapes:
            walk(s)
        return out

    def sdf(self, points):
        return np.min([s.sdf(points) for s in self.leaves()], axis=0)

    def bounds(self):
        lo, hi = zip(*(s.bounds() for s in self.leaves()))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def inside(self, point) -> bool:
        for s in self.leaves():
            if isinstance(s, TriangleMeshShape):
                if s.contains(point):
                    return True
            elif s.sdf(np.asarray(point, dtype=np.float64)[None])[0] < 0:
                return True
        return False


def cast_rays(scene: SceneDescription, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit distance (inf on miss) and albedo at the hit."""
    leaves = scene.leaves()
    ts = []
    faces = []
    for s in leaves:
        ts.append(s.intersect(origins, dirs))
        faces.append(s._last_face if isinstance(s, TriangleMeshShape) else None)
    ts = np.stack(ts)
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(len(dirs))]
    hit = np.isfinite(t)
    albedo = np.zeros((len(dirs), 3))
    points = origins + np.where(hit, t, 0.0)[:, None] * dirs
    for k, s in enumerate(leaves):
        sel = hit & (which == k)
        if not np.any(sel):
            continue
        if isinstance(s, TriangleMeshShape):
            albedo[sel] = s.albedo(points[sel], faces[k][sel])
        else:
            albedo[sel] = s.albedo(points[sel])
    return t, albedo


# -- rigs -----------------------------------------------------------------------


def make_camera(eye, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)) -> CameraView:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    R, t = look_at(eye, target, up)
    return CameraView(f, f, (width - 1) / 2, (height - 1) / 2, R, t, width, height)


def orbit_rig(
    n_cameras: int,
    distance: float,
    width: int,
    height: int,
    fov_deg: float,
    bbox_min,
    bbox_max,
    layout: str = "sphere",
    target=(0.0, 0.0, 0.0),
    elevation_deg: float = 20.0,
) -> MultiViewRig:
    """Cameras looking at ``target`` from a sphere (Fibonacci lattice) or a ring."""
    target = np.asarray(target, dtype=np.float64)
    if layout == "sphere":
        k = np.arange(n_cameras) + 0.5
        z = 1 - 2 * k / n_cameras
        phi = np.pi * (1 + 5**0.5) * k
        r = np.sqrt(1 - z * z)
        dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    elif layout == "ring":
        phi = 2 * np.pi * np.arange(n_cameras) / n_cameras
        el = np.radians(elevation_deg)
        dirs = np.stack([np.cos(phi) * np.cos(el), np.sin(phi) * np.cos(el), np.full_like(phi, np.sin(el))], axis=1)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    cams = [make_camera(target + distance * d, target, width, height, fov_deg) for d in dirs]
    return MultiViewRig(cams, bbox_min, bbox_max)


# -- rendering ------------------------------------------------------------------


def render(scene: SceneDescription, rig: MultiViewRig, seed: int = 0) -> MultiViewRig:
    """Render images, silhouettes and ground-truth ray-distance depth for every camera."""
    lo, hi = scene.bounds()
    if np.any(lo < rig.bbox_min - 1e-9) or np.any(hi > rig.bbox_max + 1e-9):
        raise SceneError("scene shapes extend outside the rig bounding box")
    for j, cam in enumerate(rig.cameras):
        if scene.inside(cam.center):
            raise SceneError(f"degenerate viewpoint: camera {j} is inside a shape")
    out = rig.copy()
    seeds = np.random.SeedSequence(seed).spawn(len(rig))
    for j, cam in enumerate(out.cameras):
        dirs = cam.all_ray_directions().reshape(-1, 3)
        origins = np.broadcast_to(cam.center, dirs.shape)
        t, albedo = cast_rays(scene, np.ascontiguousarray(origins), dirs)
        hit = np.isfinite(t)
        image = np.where(hit[:, None], albedo * scene.light, np.asarray(scene.background, dtype=np.float64))
        if scene.noise > 0:
            rng = np.random.default_rng(seeds[j])
            image = np.clip(image + rng.normal(0.0, scene.noise, image.shape), 0.0, 1.0)
        cam.image = image.reshape(cam.height, cam.width, 3)
        cam.mask = hit.reshape(cam.height, cam.width)
        cam.depth = np.where(hit, t, NO_DEPTH).reshape(cam.height, cam.width)
    return out


# -- visual hull ----------------------------------------------------------------


@dataclass
class HullGrid:
    occupancy: np.ndarray
    origin: np.ndarray
    voxel_size: np.ndarray

    def centers(self):
        idx = np.indices(self.occupancy.shape).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.voxel_size


def carve(cameras: list[CameraView], bbox_min, bbox_max, resolution: int) -> HullGrid:
    """Silhouette carving on a ``resolution``^3 grid over the bounding box.

    A voxel survives unless, in some camera that sees it, its projected
    footprint (half-diagonal radius plus one pixel of mask quantization)
    misses the silhouette entirely.
    """
    if resolution < 16:
        raise ValueError("hull resolution must be >= 16")
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    vs = (hi - lo) / resolution
    grid = HullGrid(np.ones((resolution,) * 3, dtype=bool), lo, vs)
    centers = grid.centers()
    half_diag = 0.5 * np.linalg.norm(vs)
    occ = grid.occupancy.reshape(-1)
    for cam in cameras:
        dist_to_fg = ndimage.distance_transform_edt(~cam.mask)
        uv, _, in_front = cam.project_points(centers)
        z = cam.to_camera(centers)[:, 2]
        seen = in_front & cam.in_image(uv)
        col = np.clip(np.rint(np.nan_to_num(uv[:, 0])), 0, cam.width - 1).astype(np.int64)
        row = np.clip(np.rint(np.nan_to_num(uv[:, 1])), 0, cam.height - 1).astype(np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            radius_px = max(cam.fx, cam.fy) * half_diag / z
        inside = dist_to_fg[row, col] <= radius_px + 1.5
        occ &= ~seen | inside
    return grid


def _traverse(grid: HullGrid, origins: np.ndarray, dirs: np.ndarray):
    """Entry distance of the first occupied voxel along each ray (voxel DDA).

    Returns ``(t_hit, t_box)``; ``t_hit`` is NaN for rays that never meet an
    occupied voxel and ``t_box`` is the bounding-box entry distance.
    """
    res = np.array(grid.occupancy.shape)
    lo = grid.origin
    hi = lo + res * grid.voxel_size
    n = len(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    t_box = np.maximum(t_near, 0.0)
    t_hit = np.full(n, np.nan)
    active = np.flatnonzero(t_far > t_box)

    o, d = origins[active], dirs[active]
    t_enter = t_box[active]
    p = o + (t_enter + 1e-12)[:, None] * d
    ijk = np.clip(np.floor((p - lo) / grid.voxel_size).astype(np.int64), 0, res - 1)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = lo + (ijk + (step > 0)) * grid.voxel_size
        t_max = np.where(d != 0, (boundary - o) / d, np.inf)
        t_delta = np.where(d != 0, grid.voxel_size / np.abs(d), np.inf)
    occ = grid.occupancy
    rows = np.arange(len(active))
    while len(active):
        filled = occ[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        t_hit[active[filled]] = t_enter[filled]
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(len(active))
        t_enter = t_max[rows, axis]
        ijk[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        keep = ~filled & np.all((ijk >= 0) & (ijk < res), axis=1)
        active, ijk, t_max, t_delta, step, t_enter = (a[keep] for a in (active, ijk, t_max, t_delta, step, t_enter))
    return t_hit, t_box


def visual_hull_init(rig: MultiViewRig, resolution: int = 128) -> tuple[MultiViewRig, int]:
    """Initialize every foreground depth with the entry distance of the carved hull.

    Returns the new rig and the number of foreground rays that met no
    surviving voxel (those fall back to the bounding-box entry distance).
    """
    for j, cam in enumerate(rig.cameras):
        if cam.mask is None:
            raise ValueError(f"camera {j} has no silhouette mask")
    grid = carve(rig.cameras, rig.bbox_min, rig.bbox_max, resolution)
    out = rig.copy()
    misses = 0
    for cam in out.cameras:
        fg = np.flatnonzero(cam.mask)
        rows, cols = np.divmod(fg, cam.width)
        dirs = cam.ray_directions(rows, cols)
        origins = np.broadcast_to(cam.center, dirs.shape)
        t_hit, t_box = _traverse(grid, np.ascontiguousarray(origins), dirs)
        miss = np.isnan(t_hit)
        misses += int(miss.sum())
        t_hit[miss] = t_box[miss]
        depth = np.full(cam.height * cam.width, NO_DEPTH)
        depth[fg] = t_hit
        cam.depth = depth.reshape(cam.height, cam.width)
    if misses:
        logger.warning("visual hull: %d foreground rays hit no surviving voxel", misses)
    out.meta["hull_misses"] = misses
    return out, misses


def import_depth_maps(rig: MultiViewRig, files, planar: bool = False) -> MultiViewRig:
    """Replace depth grids with maps read from PFM / raw files (one per camera)."""
    files = list(files)
    if len(files) != len(rig):
        raise ValueError(f"expected {len(rig)} depth files, got {len(files)}")
    out = rig.copy()
    for j, (cam, path) in enumerate(zip(out.cameras, files)):
        grid = np.asarray(io.read_depth(path), dtype=np.float64) if not isinstance(path, np.ndarray) else path
        if grid.shape != cam.shape:
            raise ValueError(f"camera {j}: depth map is {grid.shape}, expected {cam.shape}")
        if planar:
            grid = planar_to_ray(cam, grid)
        fg = grid[cam.mask]
        if not np.all(np.isfinite(fg)) or np.any(fg <= 0):
            raise ValueError(f"camera {j}: non-positive or missing depth on foreground")
        cam.depth = np.where(cam.mask, grid, NO_DEPTH)
    return out


# -- configuration --------------------------------------------------------------


def texture_from_dict(d: dict | None) -> Texture:
    d = dict(d or {})
    d["kind"] = d.pop("type", d.get("kind", "noise"))
    for key in ("color", "colors"):
        if key in d:
            d[key] = tuple(map(tuple, d[key])) if key == "colors" else tuple(d[key])
    return Texture(**d)


def shape_from_dict(d: dict, base_dir=None):
    kind = d.get("type")
    tex = texture_from_dict(d.get("texture"))
    if kind == "sphere":
        return Sphere(d["center"], float(d["radius"]), tex)
    if kind == "box":
        return Box(d["center"], d["size"], tex)
    if kind == "union":
        return Union([shape_from_dict(c, base_dir) for c in d["children"]])
    if kind == "mesh":
        from pathlib import Path

        path = Path(d["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        v, f = io.read_mesh(path)
        v = v * float(d.get("scale", 1.0)) + np.asarray(d.get("offset", (0, 0, 0)), dtype=np.float64)
        return TriangleMeshShape(v, f, tex, d.get("face_colors"))
    raise SceneError(f"unknown shape type {kind!r}")


def scene_from_dict(d: dict, base_dir=None) -> SceneDescription:
    return SceneDescription(
        shapes=[shape_from_dict(s, base_dir) for s in d["shapes"]],
        background=tuple(d.get("background", (0.0, 0.0, 0.0))),
        noise=float(d.get("noise", 0.0)),
        light=float(d.get("light", 1.0)),
    )


def rig_from_dict(d: dict) -> MultiViewRig:
    bbox = d.get("bbox", [[-1, -1, -1], [1, 1, 1]])
    return orbit_rig(
        int(d.get("cameras", 16)),
        float(d.get("distance", 3.5)),
        int(d.get("width", 128)),
        int(d.get("height", 128)),
        float(d.get("fov_deg", 40.0)),
        bbox[0],
        bbox[1],
        layout=d.get("layout", "sphere"),
        target=d.get("target", (0.0, 0.0, 0.0)),
        elevation_deg=float(d.get("elevation_deg", 20.0)),
    )
