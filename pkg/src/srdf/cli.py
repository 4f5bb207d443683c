"""Command line: ``srdf synth | reconstruct | eval``.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 failure while
computing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import yaml

from . import io, plotting
from .config import RunConfig
from .consistency import ConfigError
from .fusion import TriangleMesh
from .geometry import MultiViewRig
from .metrics import PointCloud, chamfer, depth_error, nearest_distances, sample_mesh
from .optimizer import OptimizationError
from .pipeline import fuse_mesh, gt_point_cloud, initialize, optimize_depths
from .scene import SceneError, import_depth_maps, render, rig_from_dict, scene_from_dict

logger = logging.getLogger("srdf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InvalidInput(Exception):
    """Bad configuration or unreadable inputs (exit 2)."""


class RuntimeFailure(Exception):
    """Failure after validation succeeded (exit 3)."""


def _invalid(module: str, exc: BaseException) -> InvalidInput:
    return InvalidInput(f"{module}: {exc}")


def _failed(module: str, exc: BaseException) -> RuntimeFailure:
    return RuntimeFailure(f"{module}: {exc}")


# -- file layout ------------------------------------------------------------------


def _cam_name(j: int) -> str:
    return f"cam_{j:03d}"


def _write_manifest(out: Path, files: list[Path], extra: dict | None = None) -> Path:
    entries = []
    for f in sorted(set(files)):
        entry = {"path": f.relative_to(out).as_posix(), "bytes": f.stat().st_size, "sha256": io.sha256(f)}
        if f.name == "energy_log.csv":
            entry["sha256_stable"] = _stable_log_hash(f)
        entries.append(entry)
    manifest = {"files": entries, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _stable_log_hash(path: Path) -> str:
    """Checksum of the energy log without its timing column."""
    rows = list(csv.reader(path.read_text().splitlines()))
    keep = [i for i, name in enumerate(rows[0]) if name != "wall_ms"]
    text = "\n".join(",".join(r[i] for i in keep) for r in rows)
    return hashlib.sha256(text.encode()).hexdigest()


def write_rig(out: Path, rig: MultiViewRig, depth_dir: str | None = "depth") -> list[Path]:
    files = []
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    cam_file = out / "cameras.txt"
    io.write_cameras(cam_file, rig.cameras)
    rig_file = out / "rig.yaml"
    rig_file.write_text(yaml.safe_dump({"bbox_min": rig.bbox_min.tolist(), "bbox_max": rig.bbox_max.tolist()}))
    files += [cam_file, rig_file]
    for j, cam in enumerate(rig.cameras):
        img = out / "images" / f"{_cam_name(j)}.png"
        msk = out / "masks" / f"{_cam_name(j)}.png"
        io.write_image(img, cam.image)
        io.write_mask(msk, cam.mask)
        files += [img, msk]
    if depth_dir:
        files += write_depths(out / depth_dir, rig)
    return files


def write_depths(directory: Path, rig: MultiViewRig) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for j, cam in enumerate(rig.cameras):
        p = directory / f"{_cam_name(j)}.pfm"
        io.write_pfm(p, cam.depth)
        files.append(p)
    return files


def read_rig(data: Path) -> MultiViewRig:
    """Load cameras, images and masks written by ``synth`` (or laid out alike)."""
    try:
        cams = io.read_cameras(data / "cameras.txt")
        box = yaml.safe_load((data / "rig.yaml").read_text())
        views = []
        for j, cam in enumerate(cams):
            image = io.read_image(data / "images" / f"{_cam_name(j)}.png")
            mask = io.read_mask(data / "masks" / f"{_cam_name(j)}.png")
            views.append(cam.copy(image=image, mask=mask))
        return MultiViewRig(views, box["bbox_min"], box["bbox_max"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise _invalid("io", exc) from None


def _depth_files(directory: Path, n: int) -> list[Path]:
    files = []
    for j in range(n):
        for ext in (".pfm", ".raw"):
            p = directory / f"{_cam_name(j)}{ext}"
            if p.exists():
                files.append(p)
                break
        else:
            raise InvalidInput(f"io: camera {j}: no depth file in {directory}")
    return files


def write_energy_log(path: Path, log: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "group", "E", "grad_norm", "wall_ms"])
        for r in log:
            w.writerow([r["stage"], r["epoch"], r["group"], repr(r["E"]), repr(r["grad_norm"]), f"{r['wall_ms']:.3f}"])
    return path


# -- subcommands --------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> list[Path]:
    path = cfg.resolve("scene")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
        scene = scene_from_dict(doc["scene"] if "scene" in doc else doc, path.parent)
        rig = rig_from_dict(doc.get("rig", {}))
    except (OSError, ValueError, KeyError, TypeError, SceneError, yaml.YAMLError) as exc:
        raise _invalid("scene-synth", exc) from None
    try:
        rig = render(scene, rig, seed=cfg.seed)
    except SceneError as exc:
        raise _invalid("scene-synth", exc) from None
    out.mkdir(parents=True, exist_ok=True)
    files = write_rig(out, rig)
    gt = out / "gt_points.ply"
    io.write_ply(gt, gt_point_cloud(rig))
    files.append(gt)
    files.append(_write_manifest(out, files, {"command": "synth", "seed": cfg.seed, "cameras": len(rig)}))
    return files


def cmd_reconstruct(cfg: RunConfig, out: Path) -> list[Path]:
    data = cfg.resolve("data")
    rig = read_rig(data)
    if cfg.init == "import":
        try:
            files = _depth_files(cfg.resolve("import_dir"), len(rig))
            init = import_depth_maps(rig, files, planar=cfg.planar_depth)
        except ValueError as exc:
            raise _invalid("scene-synth", exc) from None
    else:
        try:
            init = initialize(rig, cfg)
        except ValueError as exc:
            raise _failed("scene-synth", exc) from None
    out.mkdir(parents=True, exist_ok=True)
    files = []
    try:
        optimized, log = optimize_depths(init, cfg, progress=lambda s, lg: logger.info("stage %d done (%d log records)", s, len(lg)))
    except (OptimizationError, ValueError) as exc:
        raise _failed("energy-optimizer", exc) from None
    files += write_depths(out / "depth", optimized)
    files.append(write_energy_log(out / "energy_log.csv", log))
    files.append(plotting.energy_curves(log, out / "energy.png"))
    try:
        mesh = fuse_mesh(optimized, cfg)
    except ValueError as exc:
        raise _failed("fusion", exc) from None
    if len(mesh.faces) == 0:
        raise RuntimeFailure("fusion: extracted mesh is empty")
    for name, writer in (("mesh.ply", io.write_ply), ("mesh.obj", io.write_obj)):
        writer(out / name, mesh.vertices, mesh.faces, mesh.normals)
        files.append(out / name)
    summary = {"faces": len(mesh.faces), "vertices": len(mesh.vertices), "watertight": mesh.is_watertight()}
    gt_dir = data / "depth"
    if gt_dir.is_dir():
        gt = rig.copy()
        for cam, p in zip(gt.cameras, _depth_files(gt_dir, len(rig))):
            cam.depth = io.read_depth(p)
        err0 = depth_error(init, gt)
        err1 = depth_error(optimized, gt)
        summary.update(depth_mae_init=err0.mae_all, depth_mae=err1.mae_all, depth_rmse_init=err0.rmse_all, depth_rmse=err1.rmse_all)
        files.append(plotting.depth_error_maps(optimized, gt, out / "depth_error.png"))
        err_csv = out / "depth_error.csv"
        with open(err_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["camera", "pixels", "mae_init", "rmse_init", "mae", "rmse"])
            for j in range(len(rig)):
                w.writerow([j, err1.pixels[j], repr(err0.mae[j]), repr(err0.rmse[j]), repr(err1.mae[j]), repr(err1.rmse[j])])
        files.append(err_csv)
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(summary_path)
    files.append(_write_manifest(out, files, {"command": "reconstruct", "seed": cfg.seed}))
    return files


def _load_cloud(path: Path, count: int, seed: int) -> PointCloud:
    try:
        v, f = io.read_mesh(path)
    except (OSError, ValueError, KeyError) as exc:
        raise _invalid("metrics", f"cannot read {path}: {exc}") from None
    if len(v) == 0:
        raise InvalidInput(f"metrics: {path} has no vertices")
    if len(f):
        return sample_mesh(TriangleMesh(v, f), count, seed)
    return PointCloud(v)


def cmd_eval(cfg: RunConfig, out: Path, mesh_path: Path, gt_path: Path) -> list[Path]:
    for p in (mesh_path, gt_path):
        if not p.is_file():
            raise InvalidInput(f"metrics: file not found: {p}")
    # one seed for both sides, so a mesh compared with itself scores exactly zero
    recon = _load_cloud(mesh_path, cfg.metrics.samples, cfg.seed)
    gt = _load_cloud(gt_path, cfg.metrics.samples, cfg.seed)
    report = chamfer(recon, gt)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "metrics.json", out / "metrics.csv"]
    files[0].write_text(report.to_json() + "\n")
    files[1].write_text(report.to_csv())
    acc = nearest_distances(recon.points, gt.points)
    comp = nearest_distances(gt.points, recon.points)
    files.append(plotting.distance_histogram(acc, comp, out / "distances.png"))
    files.append(_write_manifest(out, files, {"command": "eval", "seed": cfg.seed}))
    return files


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (YAML)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    common.add_argument("--dry-run", action="store_true", help="validate and print the resolved configuration")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="srdf", description="multi-view depth optimization with signed ray distances")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render a synthetic scene")
    sub.add_parser("reconstruct", parents=[common], help="optimize depth maps and fuse a mesh")
    ev = sub.add_parser("eval", parents=[common], help="chamfer metrics between two meshes or clouds")
    ev.add_argument("mesh", type=Path, nargs="?", help="reconstruction (PLY/OBJ)")
    ev.add_argument("gt", type=Path, nargs="?", help="ground truth (PLY/OBJ); defaults to metrics.gt_mesh")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out = str(args.out.resolve())
    cfg.validate(check_paths=True, command=args.command)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = _resolve_config(args)
        except (ConfigError, TypeError, ValueError) as exc:
            raise InvalidInput(f"config: {exc}") from None
        if args.command == "eval":
            mesh = args.mesh
            gt = args.gt or cfg.path(cfg.metrics.gt_mesh)
            if mesh is None or gt is None:
                raise InvalidInput("metrics: eval needs a mesh and a ground-truth path")
        if args.dry_run:
            sys.stdout.write(cfg.to_yaml())
            return EXIT_OK
        out = cfg.resolve("out")
        if args.command == "synth":
            files = cmd_synth(cfg, out)
        elif args.command == "reconstruct":
            files = cmd_reconstruct(cfg, out)
        else:
            files = cmd_eval(cfg, out, mesh, gt)
        logger.info("wrote %d files to %s", len(files), out)
        return EXIT_OK
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
