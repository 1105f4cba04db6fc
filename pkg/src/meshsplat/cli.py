"""Command-line entry point: ``meshsplat run | eval | export``.

Config files are flat ``key = value`` text (``#`` starts a comment). Every
:class:`~meshsplat.optim.TrainConfig` field and every loss weight is a key;
the remaining keys describe the synthetic scene and the outputs:

=================  =====================================================
shape              analytic shape, e.g. ``sphere r=1`` or ``torus R=1 r=0.3``
n_gaussians        initial Gaussian budget
n_cameras          number of cameras on the viewing sphere
resolution         square image size in pixels
background         gray level or ``r,g,b`` in [0, 1]
normal_scale       initial scale along the surface normal, relative to tangential
init_noise         std of the initial normal offset, times the bbox diagonal
name               output subdirectory (defaults to the config file stem)
mesh_format        ``ply`` or ``obj``
checkpoint_every   iterations between scene + mesh dumps (0 disables)
f1_threshold       F1 distance threshold as a fraction of the shape radius
eval_samples       mesh surface samples for Chamfer and F1
color_grid         voxel grid resolution of the evaluation color field
color_iters        Adam iterations for fitting the color field
dump_png           also write depth/normal/color PNGs of the first test view
=================  =====================================================

Outputs go to ``$MESHSPLAT_OUTPUT_ROOT/<name>`` (default root ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .delaunay import triangulate
from .eval import evaluate, positive_center_fraction
from .meshing import export_mesh, load_mesh, marching_tetrahedra
from .optim import LossBreakdown, TrainConfig, read_config_file, train, train_view_indices
from .pivots import sample_pivots
from .render import rasterize_mesh, render_gaussians
from .render.io import dump_buffers
from .scene import ground_truth_samples, load_cameras, load_scene, make_synthetic_scene, parse_shape, save_cameras, save_scene, shape_to_spec

log = logging.getLogger("meshsplat")

OUTPUT_ROOT_ENV = "MESHSPLAT_OUTPUT_ROOT"
CONFIG_DIR = Path(__file__).parent / "configs"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it for the diagnostic."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class RunConfig:
    train: TrainConfig
    shape: str = "sphere r=1"
    n_gaussians: int = 300
    n_cameras: int = 16
    resolution: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    normal_scale: float = 0.1
    init_noise: float = 0.0
    name: str = "run"
    mesh_format: str = "ply"
    checkpoint_every: int = 0
    f1_threshold: float = 0.02
    eval_samples: int = 100_000
    color_grid: int = 64
    color_iters: int = 2000
    dump_png: bool = False

    def snapshot(self) -> dict[str, str]:
        d = {
            "shape": self.shape,
            "n_gaussians": str(self.n_gaussians),
            "n_cameras": str(self.n_cameras),
            "resolution": str(self.resolution),
            "background": ",".join(repr(float(c)) for c in self.background),
            "normal_scale": repr(self.normal_scale),
            "init_noise": repr(self.init_noise),
            "name": self.name,
            "mesh_format": self.mesh_format,
            "checkpoint_every": str(self.checkpoint_every),
            "f1_threshold": repr(self.f1_threshold),
            "eval_samples": str(self.eval_samples),
            "color_grid": str(self.color_grid),
            "color_iters": str(self.color_iters),
            "dump_png": "true" if self.dump_png else "false",
        }
        d.update(self.train.to_mapping())
        return d


_INT_KEYS = ("n_gaussians", "n_cameras", "resolution", "checkpoint_every", "eval_samples", "color_grid", "color_iters")
_FLOAT_KEYS = ("normal_scale", "init_noise", "f1_threshold")


def _parse_background(text: str) -> tuple:
    vals = [float(x) for x in str(text).replace(",", " ").split()]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or not all(0.0 <= v <= 1.0 for v in vals):
        raise ValueError(f"background must be one or three values in [0, 1], got {text!r}")
    return tuple(vals)


def parse_run_config(mapping: dict, default_name: str = "run") -> RunConfig:
    """Build a :class:`RunConfig` from string key/values; unknown keys are an error."""
    train_cfg, rest = TrainConfig.from_mapping(mapping)
    kw = {"name": default_name}
    for key, text in rest.items():
        try:
            if key in _INT_KEYS:
                kw[key] = int(text)
            elif key in _FLOAT_KEYS:
                kw[key] = float(text)
            elif key == "background":
                kw[key] = _parse_background(text)
            elif key == "dump_png":
                kw[key] = str(text).strip().lower() in ("1", "true", "yes", "on")
            elif key in ("shape", "name", "mesh_format"):
                kw[key] = str(text).strip()
            else:
                raise ValueError(f"unknown config key {key!r}")
        except ValueError as exc:
            if "unknown config key" in str(exc) or "background" in str(exc):
                raise
            raise ValueError(f"config key {key!r}: cannot parse {text!r}") from exc
    cfg = RunConfig(train=train_cfg, **kw)
    parse_shape(cfg.shape)
    if cfg.mesh_format not in ("ply", "obj"):
        raise ValueError(f"mesh_format must be ply or obj, got {cfg.mesh_format!r}")
    if not cfg.name or Path(cfg.name).name != cfg.name or cfg.name in (".", ".."):
        raise ValueError(f"name must be a plain directory name, got {cfg.name!r}")
    if cfg.f1_threshold <= 0:
        raise ValueError("f1_threshold must be positive")
    return cfg


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists() and (CONFIG_DIR / path.name).exists():
        path = CONFIG_DIR / path.name
    mapping = read_config_file(path)
    mapping.update(overrides or {})
    return parse_run_config(mapping, default_name=path.stem)


def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter",) + LossBreakdown.COLUMNS)
        for it, lb in history:
            w.writerow([it] + [repr(float(x)) for x in lb.as_row()])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes a stage diagnostic
        raise StageError(name, str(exc) or type(exc).__name__) from exc


def _metrics(mesh, cameras, images, background, bounds, gt, radius, cfg: RunConfig) -> dict:
    report = evaluate(
        mesh,
        cameras,
        images,
        background,
        bounds,
        gt=gt,
        f1_threshold=cfg.f1_threshold * radius,
        n_samples=cfg.eval_samples,
        n_grid=cfg.color_grid,
        color_iters=cfg.color_iters,
        seed=cfg.train.seed,
    )
    report["f1_threshold"] = cfg.f1_threshold * radius
    return report


def run_pipeline(cfg: RunConfig, out_dir: Path) -> dict:
    """Generate, train, export and evaluate; returns the manifest dict."""
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    data, scene0 = _stage(
        "scene",
        make_synthetic_scene,
        cfg.shape,
        cfg.n_gaussians,
        cfg.n_cameras,
        cfg.train.seed,
        resolution=cfg.resolution,
        noise=cfg.init_noise,
        normal_scale=cfg.normal_scale,
        background=cfg.background,
    )
    timings["scene"] = time.perf_counter() - t0

    ckpt_dir = out_dir / "checkpoints"
    ckpt_paths = []

    def on_checkpoint(it, scene, mesh):
        ckpt_dir.mkdir(exist_ok=True)
        sp = ckpt_dir / f"scene_{it:06d}.bin"
        mp = ckpt_dir / f"mesh_{it:06d}.{cfg.mesh_format}"
        save_scene(scene, sp)
        export_mesh(mesh, mp, cfg.mesh_format)
        ckpt_paths.extend([sp, mp])

    t0 = time.perf_counter()
    result = _stage("train", train, scene0, data, cfg.train, on_checkpoint, cfg.checkpoint_every)
    timings["train"] = time.perf_counter() - t0
    timings.update({f"train_{k}": v for k, v in result.timings.items()})

    paths = {
        "mesh": out_dir / f"mesh.{cfg.mesh_format}",
        "scene": out_dir / "scene.bin",
        "cameras": out_dir / "cameras.json",
        "images": out_dir / "images.npy",
        "pivots": out_dir / "pivots.json",
        "loss_csv": out_dir / "loss.csv",
        "metrics": out_dir / "metrics.json",
        "manifest": out_dir / "manifest.json",
    }
    t0 = time.perf_counter()
    selected = result.pivots.selected if result.pivots is not None else np.empty(0, dtype=np.int64)

    def export():
        export_mesh(result.mesh, paths["mesh"], cfg.mesh_format)
        save_scene(result.scene, paths["scene"])
        save_cameras(
            data.cameras,
            paths["cameras"],
            extra={"shape": shape_to_spec(data.shape), "background": [float(c) for c in data.background]},
        )
        np.save(paths["images"], data.images)
        write_json(
            {"selected": [int(i) for i in selected], "corner_mult": cfg.train.corner_mult, "seed": cfg.train.seed},
            paths["pivots"],
        )
        write_loss_csv(result.history, paths["loss_csv"])

    _stage("export", export)
    timings["export"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def metrics():
        # evaluate the mesh as written so that `eval` on the file agrees exactly
        mesh = load_mesh(paths["mesh"])
        report = _metrics(mesh, data.cameras, data.images, data.background, data.bbox, data.gt_samples, data.radius, cfg)
        report["positive_center_fraction"] = positive_center_fraction(result.scene, selected)
        write_json(report, paths["metrics"])
        if cfg.dump_png:
            test = np.setdiff1d(np.arange(len(data.cameras)), train_view_indices(len(data.cameras)))
            cam = data.cameras[int(test[0]) if len(test) else 0]
            png_dir = out_dir / "png"
            paths["png_gaussians"] = dump_buffers(render_gaussians(result.scene, cam, data.background), png_dir, "gaussians")
            paths["png_mesh"] = dump_buffers(rasterize_mesh(mesh, cam), png_dir, "mesh")
        return report

    report = _stage("metrics", metrics)
    timings["metrics"] = time.perf_counter() - t0

    manifest = {
        "config": cfg.snapshot(),
        "seed": cfg.train.seed,
        "git_describe": git_describe(),
        "timings": timings,
        "paths": {k: ([str(p) for p in v] if isinstance(v, list) else str(v)) for k, v in paths.items()},
        "checkpoints": [str(p) for p in ckpt_paths],
        "chamfer": report["chamfer"],
    }
    write_json(manifest, paths["manifest"])
    return manifest


def _fail(stage: str, message: str) -> int:
    print(f"meshsplat: {stage} failed: {message}", file=sys.stderr)
    return 1


def cmd_run(config_path, overrides: dict | None = None, root=None) -> int:
    """Run the full pipeline for one config file; returns the exit code."""
    try:
        cfg = load_run_config(config_path, overrides)
    except OSError as exc:
        return _fail("config", f"cannot read {config_path}: {exc.strerror or exc}")
    except ValueError as exc:
        return _fail("config", str(exc))
    try:
        manifest = run_pipeline(cfg, output_root(root) / cfg.name)
    except StageError as exc:
        return _fail(exc.stage, str(exc).split(": ", 1)[1])
    except OSError as exc:
        return _fail("output", str(exc))
    print(manifest["paths"]["manifest"])
    return 0


def _load_run_dir(scene_dir: Path):
    cams, extra = load_cameras(scene_dir / "cameras.json")
    images = np.load(scene_dir / "images.npy")
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images for {len(cams)} cameras")
    return cams, images, extra


def cmd_eval(mesh_path, scene_dir, out=None, config: RunConfig | None = None) -> int:
    """Evaluate a mesh against a run directory's cameras, images and shape."""
    mesh_path, scene_dir = Path(mesh_path), Path(scene_dir)
    if not mesh_path.is_file():
        return _fail("eval", f"mesh not found: {mesh_path}")
    try:
        cams, images, extra = _load_run_dir(scene_dir)
        mesh = load_mesh(mesh_path)
    except (OSError, ValueError) as exc:
        return _fail("eval", str(exc))
    if config is None:
        manifest = scene_dir / "manifest.json"
        snap = json.loads(manifest.read_text())["config"] if manifest.exists() else {}
        config = parse_run_config(snap) if snap else parse_run_config({})
    gt = bounds = radius = None
    if "shape" in extra:
        shape = parse_shape(extra["shape"])
        gt = ground_truth_samples(shape, config.train.seed)
        lo, hi = shape.bounds()
        bounds, radius = (lo, hi), float(0.5 * np.max(hi - lo))
    else:
        lo = mesh.vertices.min(axis=0) if mesh.n_vertices else np.full(3, -1.0)
        hi = mesh.vertices.max(axis=0) if mesh.n_vertices else np.full(3, 1.0)
        bounds, radius = (lo, hi), float(0.5 * np.max(hi - lo))
    try:
        report = _metrics(mesh, cams, images, np.asarray(extra.get("background", (0.0, 0.0, 0.0))), bounds, gt, radius, config)
        target = Path(out) if out else scene_dir / "eval_metrics.json"
        write_json(report, target)
    except (OSError, ValueError) as exc:
        return _fail("eval", str(exc))
    print(target)
    return 0


def extract_mesh(scene, selected=None, corner_mult: float = 1.0, seed: int = 0):
    """Rebuild the marching-tetrahedra mesh of a trained scene."""
    if selected is None:
        selected = np.arange(len(scene))
    if len(selected) == 0:
        raise ValueError("scene has no pivot Gaussians")
    pivots = sample_pivots(scene, selected, corner_mult)
    tets = triangulate(pivots.sites, seed).tets
    return marching_tetrahedra(tets, pivots.sites, pivots.sdf(scene))


def cmd_export(scene_path, out_path, fmt: str | None = None) -> int:
    """Extract and write the mesh of a scene checkpoint (OBJ or PLY)."""
    scene_path, out_path = Path(scene_path), Path(out_path)
    try:
        scene = load_scene(scene_path)
        side = scene_path.parent / "pivots.json"
        if side.exists():
            meta = json.loads(side.read_text())
            mesh = extract_mesh(scene, np.asarray(meta["selected"], dtype=np.int64), meta["corner_mult"], meta["seed"])
        else:
            mesh = extract_mesh(scene)
        export_mesh(mesh, out_path, fmt)
    except (OSError, ValueError, KeyError) as exc:
        return _fail("export", str(exc))
    print(out_path)
    return 0


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="generate, train, export and evaluate")
    r.add_argument("config", help="config file (bundled names such as sphere.cfg also work)")
    r.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--output-root", default=None, help=f"overrides ${OUTPUT_ROOT_ENV}")
    e = sub.add_parser("eval", help="metrics for a mesh against a run directory")
    e.add_argument("--mesh", required=True)
    e.add_argument("--scene", required=True, help="run directory with cameras.json and images.npy")
    e.add_argument("--out", default=None)
    x = sub.add_parser("export", help="extract a mesh from a scene checkpoint")
    x.add_argument("--scene", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=("obj", "ply"), default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, dict(args.overrides), args.output_root)
    if args.command == "eval":
        return cmd_eval(args.mesh, args.scene, args.out)
    return cmd_export(args.scene, args.out, args.format)


if __name__ == "__main__":
    sys.exit(main())
