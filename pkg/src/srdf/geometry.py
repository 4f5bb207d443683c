"""Pinhole cameras, ray geometry, depth lookups and signed ray distances.

Depth maps hold the Euclidean distance from the camera center along each
pixel ray (not planar z-depth), so a stored depth and the distance of a 3D
point to the camera live on the same axis. Pixel centers sit at integer
coordinates: pixel ``(row, col)`` projects to ``(u, v) = (col, row)``.
Background pixels carry ``NO_DEPTH`` (NaN).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NO_DEPTH = np.nan


class GeometryError(Exception):
    """Base class for lookups that mean "treat this camera as occluded"."""


class BehindCamera(GeometryError):
    pass


class OutOfView(GeometryError):
    pass


class InvalidLookup(GeometryError):
    pass


@dataclass
class CameraView:
    """Calibrated pinhole camera with its image, silhouette and depth map.

    ``rotation`` and ``translation`` map world points into the camera frame:
    ``x_cam = rotation @ x_world + translation``. The camera looks down +z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    image: np.ndarray | None = None
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        shape = (self.height, self.width)
        if self.image is not None and self.image.shape[:2] != shape:
            raise ValueError(f"image shape {self.image.shape[:2]} != {shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != shape:
                raise ValueError(f"mask shape {self.mask.shape} != {shape}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != shape:
                raise ValueError(f"depth shape {self.depth.shape} != {shape}")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def copy(self, **changes) -> CameraView:
        """Deep-ish copy: arrays are copied so the clone owns its depth grid."""
        fields = dict(
            image=None if self.image is None else self.image.copy(),
            mask=None if self.mask is None else self.mask.copy(),
            depth=None if self.depth is None else self.depth.copy(),
        )
        fields.update(changes)
        return replace(self, **fields)

    def check_depth(self) -> None:
        """Raise unless depth is positive on the foreground and NO_DEPTH elsewhere."""
        if self.depth is None or self.mask is None:
            raise ValueError("camera has no depth map or mask")
        fg = self.depth[self.mask]
        if not np.all(np.isfinite(fg)) or np.any(fg <= 0):
            raise ValueError("foreground depths must be finite and positive")
        if not np.all(np.isnan(self.depth[~self.mask])):
            raise ValueError("background depths must be NO_DEPTH")

    # -- vectorized geometry -------------------------------------------------

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.rotation.T + self.translation

    def project_points(self, X: np.ndarray):
        """Project ``(N, 3)`` world points.

        Returns:
            ``(uv, Z, in_front)``: continuous pixel coordinates ``(N, 2)``,
            ray distances ``(N,)`` and a mask of points strictly in front of
            the camera. ``uv`` is NaN where ``in_front`` is False.
        """
        Xc = self.to_camera(X)
        z = Xc[..., 2]
        in_front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * Xc[..., 0] / z + self.cx
            v = self.fy * Xc[..., 1] / z + self.cy
        uv = np.stack([u, v], axis=-1)
        uv[~in_front] = np.nan
        Z = np.linalg.norm(Xc, axis=-1)
        return uv, Z, in_front

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        u, v = uv[..., 0], uv[..., 1]
        with np.errstate(invalid="ignore"):
            return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def ray_directions(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Unit world-space directions of the rays through pixel centers."""
        x = (np.asarray(cols, dtype=np.float64) - self.cx) / self.fx
        y = (np.asarray(rows, dtype=np.float64) - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.rotation

    def all_ray_directions(self) -> np.ndarray:
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        return self.ray_directions(rows, cols)

    def unproject_pixels(self, flat_idx: np.ndarray, distances: np.ndarray) -> np.ndarray:
        rows, cols = np.divmod(np.asarray(flat_idx), self.width)
        dirs = self.ray_directions(rows, cols)
        return self.center + np.asarray(distances, dtype=np.float64)[..., None] * dirs


@dataclass
class MultiViewRig:
    cameras: list[CameraView]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if len(self.cameras) < 2:
            raise ValueError("a rig needs at least 2 cameras")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("empty bounding box")
        for j, cam in enumerate(self.cameras):
            c = cam.center
            if np.all(c >= self.bbox_min) and np.all(c <= self.bbox_max):
                raise ValueError(f"camera {j} center lies inside the scene bounding box")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def __len__(self):
        return len(self.cameras)

    def copy(self) -> MultiViewRig:
        return MultiViewRig([c.copy() for c in self.cameras], self.bbox_min.copy(), self.bbox_max.copy(), dict(self.meta))


@dataclass(frozen=True)
class RaySample:
    point: np.ndarray
    camera: int
    pixel: int
    offset: float


# -- bilinear lookups -----------------------------------------------------------


def bilinear_footprint(uv: np.ndarray, width: int, height: int):
    """Corner indices and weights of a bilinear lookup at ``uv``.

    Only meaningful where ``uv`` is inside the image. Returns flat pixel
    indices ``(N, 4)`` and weights ``(N, 4)`` summing to one.
    """
    u = np.nan_to_num(uv[..., 0])
    v = np.nan_to_num(uv[..., 1])
    x0 = np.clip(np.floor(u), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, max(height - 2, 0)).astype(np.int64)
    ax = u - x0
    ay = v - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=-1)
    w = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=-1)
    return idx, w


def lookup_validity(camera: CameraView, uv: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """True where the lookup is in view and every corner with weight > 0 is foreground."""
    inside = camera.in_image(uv)
    fg = camera.mask.reshape(-1)[idx] | (w == 0)
    return inside & np.all(fg, axis=-1)


def sample_grid(grid: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Bilinear gather from an ``(H, W)`` or ``(H, W, C)`` grid given a footprint."""
    flat = grid.reshape(grid.shape[0] * grid.shape[1], -1)
    vals = flat[idx]  # (..., 4, C)
    out = np.einsum("...k,...kc->...c", w, vals)
    return out[..., 0] if grid.ndim == 2 else out


# -- scalar API -----------------------------------------------------------------


def project(camera: CameraView, X) -> tuple[tuple[float, float], float]:
    """Project a single world point; raise ``BehindCamera`` if z <= 0."""
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("point must be finite")
    uv, Z, in_front = camera.project_points(X[None])
    if not in_front[0]:
        raise BehindCamera(f"point {X} is behind the camera")
    return (float(uv[0, 0]), float(uv[0, 1])), float(Z[0])


def interpolate_depth(camera: CameraView, uv) -> tuple[float, list[tuple[int, float]]]:
    """Bilinear depth at continuous pixel coordinates.

    Returns the depth and the ``(flat_pixel, weight)`` pairs with non-zero
    weight. Raises ``OutOfView`` outside the image and ``InvalidLookup`` if a
    contributing pixel is background.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(1, 2)
    # a point on a pixel's own ray projects a rounding error away from the
    # pixel center; snap so it neither leaves the image nor picks up a
    # background neighbour with a ~1e-16 weight
    node = np.rint(uv)
    uv = np.where(np.abs(uv - node) < 1e-9, node, uv)
    if not camera.in_image(uv)[0]:
        raise OutOfView(f"({uv[0, 0]}, {uv[0, 1]}) outside {camera.width}x{camera.height} image")
    idx, w = bilinear_footprint(uv, camera.width, camera.height)
    if not lookup_validity(camera, uv, idx, w)[0]:
        raise InvalidLookup("lookup touches a background pixel")
    pairs: dict[int, float] = {}
    for i, wi in zip(idx[0], w[0]):
        if wi > 0:
            pairs[int(i)] = pairs.get(int(i), 0.0) + float(wi)
    depth = camera.depth.reshape(-1)
    value = sum(depth[i] * wi for i, wi in pairs.items())
    return float(value), list(pairs.items())


def srdf(camera: CameraView, X) -> float:
    """Signed ray distance: depth predicted at the projection of X minus the distance of X."""
    uv, Z = project(camera, X)
    D, _ = interpolate_depth(camera, uv)
    return D - Z


def unproject(camera: CameraView, pixel, distance: float) -> np.ndarray:
    """World point at ray distance ``distance`` through ``pixel`` (flat index or (row, col))."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    if isinstance(pixel, (tuple, list, np.ndarray)):
        row, col = pixel
    else:
        row, col = divmod(int(pixel), camera.width)
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise ValueError(f"pixel ({row}, {col}) outside image")
    d = camera.ray_directions(np.array([row]), np.array([col]))[0]
    return camera.center + distance * d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.99:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # re-orthonormalize to keep det(R) = 1 within 1e-9
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return R, -R @ eye


def planar_to_ray(camera: CameraView, zdepth: np.ndarray) -> np.ndarray:
    """Convert a planar z-depth grid to ray distances."""
    rows, cols = np.mgrid[0 : camera.height, 0 : camera.width]
    x = (cols - camera.cx) / camera.fx
    y = (rows - camera.cy) / camera.fy
    return zdepth * np.sqrt(x * x + y * y + 1.0)


def ray_to_planar(camera: CameraView, depth: np.ndarray) -> np.ndarray:
    rows, cols = np.mgrid[0 : camera.height, 0 : camera.width]
    x = (cols - camera.cx) / camera.fx
    y = (rows - camera.cy) / camera.fy
    return depth / np.sqrt(x * x + y * y + 1.0)
