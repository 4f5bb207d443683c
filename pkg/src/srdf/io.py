"""File formats: PFM / raw depth grids, PNG images and masks, camera files, PLY / OBJ."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraView

RAW_MAGIC = b"SRDFRAW1"


# -- depth grids ----------------------------------------------------------------


def write_pfm(path, grid: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    grid = np.asarray(grid, dtype="<f4")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(grid[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    expected = w * h * channels
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_raw_depth(path, grid: np.ndarray) -> None:
    """float32 grid behind a 16-byte header: magic, then uint32 height and width."""
    grid = np.asarray(grid, dtype="<f4")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(grid).tobytes())


def read_raw_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != RAW_MAGIC:
        raise ValueError(f"{path}: bad raw depth header")
    h, w = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float32)


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_raw_depth(path)


# -- images ---------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


# -- cameras --------------------------------------------------------------------


def write_cameras(path, cameras: list[CameraView]) -> None:
    """One line per camera: width height fx fy cx cy r00..r22 tx ty tz."""
    lines = ["# width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for cam in cameras:
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.rotation.reshape(-1), *cam.translation]
        lines.append(f"{cam.width} {cam.height} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[CameraView]:
    cameras = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 18:
            raise ValueError(f"{path}:{lineno}: expected 18 fields, found {len(parts)}")
        w, h = int(parts[0]), int(parts[1])
        v = [float(p) for p in parts[2:]]
        cameras.append(
            CameraView(
                fx=v[0], fy=v[1], cx=v[2], cy=v[3],
                rotation=np.array(v[4:13]).reshape(3, 3), translation=np.array(v[13:16]),
                width=w, height=h,
            )
        )
    return cameras


# -- meshes ---------------------------------------------------------------------


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None, normals: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 positions, optional normals and int32 faces."""
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    faces = np.zeros((0, 3), dtype="<i4") if faces is None else np.asarray(faces, dtype="<i4").reshape(-1, 3)
    props = ["property float x", "property float y", "property float z"]
    cols = [vertices]
    if normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
        cols.append(np.asarray(normals, dtype="<f4").reshape(-1, 3))
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(vertices)}",
        *props,
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    vdata = np.ascontiguousarray(np.hstack(cols).astype("<f4"))
    fdtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    fdata = np.empty(len(faces), dtype=fdtype)
    fdata["n"] = 3
    fdata["idx"] = faces
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read vertices (and triangle faces, if any) from an ASCII or binary PLY.

    Returns ``(vertices, faces, normals)``; ``normals`` is None when absent.
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements: list[list] = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        body = f.read()

    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    normals = None
    if fmt == "ascii":
        rows = iter(body.decode("ascii").split("\n"))
        for name, count, props in elements:
            data = [next(rows).split() for _ in range(count)]
            if name == "vertex":
                names = [p[-1] for p in props]
                arr = np.array(data, dtype=np.float64).reshape(count, -1)
                vertices = arr[:, [names.index(c) for c in "xyz"]]
                if "nx" in names:
                    normals = arr[:, [names.index(c) for c in ("nx", "ny", "nz")]]
            elif name == "face":
                faces = np.array([[int(x) for x in r[1:4]] for r in data], dtype=np.int64).reshape(-1, 3)
        return vertices, faces, normals

    endian = "<" if fmt == "binary_little_endian" else ">"
    offset = 0
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise ValueError(f"{path}: unsupported list layout")
            _, ctype, itype, _ = props[0]
            dt = np.dtype([("n", endian + _PLY_TYPES[ctype]), ("idx", endian + _PLY_TYPES[itype], (3,))])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            if count and np.any(arr["n"] != 3):
                raise ValueError(f"{path}: only triangle faces are supported")
            offset += dt.itemsize * count
            if name == "face":
                faces = arr["idx"].astype(np.int64)
        else:
            dt = np.dtype([(p[1], endian + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            if name == "vertex":
                vertices = np.stack([arr[c] for c in "xyz"], axis=1).astype(np.float64)
                if "nx" in dt.names:
                    normals = np.stack([arr[c] for c in ("nx", "ny", "nz")], axis=1).astype(np.float64)
    return vertices, faces, normals


def write_obj(path, vertices: np.ndarray, faces: np.ndarray, normals: np.ndarray | None = None) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices]
    if normals is not None:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in np.asarray(faces) + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in np.asarray(faces) + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_mesh(path):
    """Load ``(vertices, faces)`` from PLY or OBJ."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    v, f, _ = read_ply(path)
    return v, f


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
