"""Adam and the two-phase training driver.

Phase A fits the Gaussians photometrically (plus depth-normal consistency after
a warmup). Phase B selects pivot Gaussians, initializes their SDF values by
depth fusion, and then extracts a mesh by marching tetrahedra at every
iteration so the mesh losses can pull on both representations. The
tetrahedralization is rebuilt on a fixed cadence and held frozen in between.
"""
from __future__ import annotations

import configparser
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .delaunay import triangulate
from .losses import LossBreakdown, LossWeights, MeshContext, OccupancyLabels, compute_occupancy, init_sdf, total_loss
from .meshing import ExtractedMesh, marching_tetrahedra
from .pivots import PivotSet, compute_importance, sample_pivots, select_pivot_gaussians
from .scene import GaussianScene, SyntheticScene

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("mu", "quat", "log_scale", "logit_opacity", "rgb")


class ScheduleError(ValueError):
    pass


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64), 0)


def adam_step(param, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-15, name="param"):
    """One bias-corrected Adam update; ``param`` and ``state`` are updated in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(param) or state.m.shape != grad.shape:
        raise ValueError(f"{name}: gradient shape {grad.shape} does not match parameter {np.shape(param)}")
    if np.isnan(grad).any():
        raise FloatingPointError(f"NaN gradient in parameter group {name!r}")
    state.step += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1**state.step)
    vhat = state.v / (1 - beta2**state.step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class SceneOptimizer:
    """Adam over the parameter groups of a :class:`GaussianScene`."""

    def __init__(self, scene: GaussianScene, groups=GAUSSIAN_GROUPS):
        self.state = {k: AdamState.zeros_like(getattr(scene, k)) for k in groups}

    def enable(self, scene: GaussianScene, group: str) -> None:
        self.state[group] = AdamState.zeros_like(getattr(scene, group))

    def step(self, scene: GaussianScene, grads: dict, lrs: dict, max_log_scale: float = np.inf) -> None:
        """One Adam step per group, then project back onto the valid set.

        Quaternions are renormalized, colors clipped to [0, 1] and log-scales
        capped at ``max_log_scale``.
        """
        for k, st in self.state.items():
            adam_step(getattr(scene, k), grads[k], st, lrs[k], name=k)
        scene.renormalize()
        np.clip(scene.rgb, 0.0, 1.0, out=scene.rgb)
        np.minimum(scene.log_scale, max_log_scale, out=scene.log_scale)

    def prune(self, keep) -> None:
        keep = np.asarray(keep)
        for st in self.state.values():
            st.m = st.m[keep]
            st.v = st.v[keep]


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    iters_total: int = 2000
    iter_mesh_start: int = 400
    delaunay_refresh_every: int = 500
    occupancy_refresh_every: int = 200
    normal_warmup: int = -1  # -1: iter_mesh_start // 3
    lr_position: float = 1.6e-6  # times the bbox diagonal, decays to 1/100
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_sdf: float = 0.025
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "base"
    pivot_budget: int = 0  # 0: every Gaussian
    corner_mult: float = 1.0
    max_scale: float = 0.1  # cap on every axis scale, times the bbox diagonal
    antialias: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iters_total < 1:
            raise ScheduleError("invalid schedule: iters_total must be >= 1")
        if not 0 <= self.iter_mesh_start <= self.iters_total:
            raise ScheduleError("invalid schedule: need 0 <= iter_mesh_start <= iters_total")
        if self.delaunay_refresh_every < 1 or self.occupancy_refresh_every < 1:
            raise ScheduleError("invalid schedule: refresh cadences must be >= 1")
        if self.mode not in ("base", "dense"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.pivot_budget < 0:
            raise ValueError("pivot_budget must be >= 0")
        if self.corner_mult <= 0:
            raise ValueError("corner_mult must be positive")
        if not self.max_scale > 0:
            raise ValueError("max_scale must be positive")

    @property
    def warmup(self) -> int:
        return self.iter_mesh_start // 3 if self.normal_warmup < 0 else self.normal_warmup

    def to_mapping(self) -> dict[str, str]:
        d = {k: v for k, v in asdict(self).items() if k != "weights"}
        d.update(asdict(self.weights))
        return {k: _fmt(v) for k, v in d.items()}

    @classmethod
    def from_mapping(cls, m: dict) -> tuple["TrainConfig", dict]:
        """Build from string key/values; returns the config and the unused keys."""
        m = dict(m)
        kw = {}
        for f in fields(cls):
            if f.name == "weights" or f.name not in m:
                continue
            kw[f.name] = _parse(m.pop(f.name), type(getattr(cls(), f.name)), f.name)
        wkw = {}
        for f in fields(LossWeights):
            if f.name in m:
                wkw[f.name] = _parse(m.pop(f.name), float, f.name)
        kw["weights"] = LossWeights(**wkw)
        return cls(**kw), m


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, typ, name: str):
    text = str(text).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if typ is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return typ(text)
    except ValueError as exc:
        raise ValueError(f"config key {name!r}: cannot parse {text!r} as {typ.__name__}") from exc


def read_config_file(path) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments, no sections)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return dict(parser["run"])


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    scene: GaussianScene
    mesh: ExtractedMesh
    history: list  # [(iteration, LossBreakdown)]
    pivots: PivotSet | None = None
    tets: np.ndarray | None = None
    occupancy: OccupancyLabels | None = None
    timings: dict = field(default_factory=dict)

    def history_rows(self) -> list[list]:
        return [[it] + lb.as_row() for it, lb in self.history]


def train_view_indices(n_views: int) -> np.ndarray:
    """Every 8th view (0, 8, 16, ...) is held out for evaluation."""
    idx = np.arange(n_views)
    train = idx[idx % 8 != 0]
    return train if len(train) >= 2 else idx


def _position_lr(cfg: TrainConfig, it: int, diag: float) -> float:
    return cfg.lr_position * diag * 0.01 ** (it / max(cfg.iters_total, 1))


def train(scene: GaussianScene, data: SyntheticScene, cfg: TrainConfig, on_checkpoint=None, checkpoint_every: int = 0) -> TrainResult:
    """Run both phases; ``scene`` is not modified (a copy is optimized)."""
    cfg.validate()
    views = train_view_indices(len(data.cameras))
    if len(views) < 2:
        raise ValueError("training needs at least 2 cameras")
    cams = [data.cameras[i] for i in views]
    targets = [data.images[i] for i in views]
    diag = data.bbox_diag
    bg = data.background
    scene = scene.copy()
    opt = SceneOptimizer(scene)
    max_log_scale = float(np.log(cfg.max_scale * diag))
    history = []
    timings = {"phase_a": 0.0, "phase_b": 0.0, "delaunay": 0.0}
    pivots = tets = occupancy = None
    mesh_ctx = None
    mesh = ExtractedMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))

    def lrs(it):
        return {
            "mu": _position_lr(cfg, it, diag),
            "quat": cfg.lr_rotation,
            "log_scale": cfg.lr_scale,
            "logit_opacity": cfg.lr_opacity,
            "rgb": cfg.lr_color,
            "sdf_pre": cfg.lr_sdf,
        }

    t_phase = time.perf_counter()
    for it in range(cfg.iters_total):
        if it == cfg.iter_mesh_start:
            timings["phase_a"] = time.perf_counter() - t_phase
            t_phase = time.perf_counter()
            scene, pivots = _start_mesh_phase(scene, cams, opt, cfg, data)
            t0 = time.perf_counter()
            tets = triangulate(pivots.sites, cfg.seed).tets
            timings["delaunay"] += time.perf_counter() - t0
            mesh = marching_tetrahedra(tets, pivots.sites, pivots.sdf(scene))
            occupancy = compute_occupancy(mesh, cams, pivots.sites, diag, iteration=it)
            mesh_ctx = MeshContext(pivots, tets, occupancy, d_cap=diag, antialias=cfg.antialias, mesh=mesh)
        k = it - cfg.iter_mesh_start
        if mesh_ctx is not None and k > 0:
            if k % cfg.delaunay_refresh_every == 0:
                pivots = sample_pivots(scene, pivots.selected, cfg.corner_mult)
                t0 = time.perf_counter()
                mesh_ctx.tets = triangulate(pivots.sites, cfg.seed).tets
                timings["delaunay"] += time.perf_counter() - t0
                mesh_ctx.pivots = pivots
            if k % cfg.occupancy_refresh_every == 0:
                sites = sample_pivots(scene, pivots.selected, cfg.corner_mult).sites
                mesh_ctx.occupancy = compute_occupancy(mesh_ctx.mesh, cams, sites, diag, iteration=it)

        v = it % len(cams)
        lb, grads = total_loss(
            scene, cams[v], targets[v], cfg.weights, background=bg, use_normal=it >= cfg.warmup, mesh_ctx=mesh_ctx
        )
        if not np.isfinite(lb.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        history.append((it, lb))
        if mesh_ctx is not None and "sdf_pre" not in opt.state:
            opt.enable(scene, "sdf_pre")
        opt.step(scene, grads, lrs(it), max_log_scale)
        if on_checkpoint is not None and checkpoint_every > 0 and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, scene, mesh_ctx.mesh if mesh_ctx is not None else mesh)
    timings["phase_b" if mesh_ctx is not None else "phase_a"] = time.perf_counter() - t_phase

    if mesh_ctx is not None:
        pivots = sample_pivots(scene, pivots.selected, cfg.corner_mult)
        tets = triangulate(pivots.sites, cfg.seed).tets
        mesh = marching_tetrahedra(tets, pivots.sites, pivots.sdf(scene))
        occupancy = mesh_ctx.occupancy
    return TrainResult(scene, mesh, history, pivots, tets, occupancy, timings)


def _start_mesh_phase(scene, cams, opt: SceneOptimizer, cfg: TrainConfig, data: SyntheticScene):
    scores = compute_importance(scene, cams, background=data.background)
    budget = cfg.pivot_budget or len(scene)
    budget = min(budget, len(scene))
    selected = select_pivot_gaussians(scores, budget, cfg.mode, cfg.seed)
    if cfg.mode == "base":
        scene = scene.subset(selected)
        opt.prune(selected)
        selected = np.arange(len(scene))
    pivots = sample_pivots(scene, selected, cfg.corner_mult)
    pre = init_sdf(scene, pivots, cams, data.truncation, background=data.background)
    scene.sdf_pre[pivots.gaussian, pivots.corner] = pre
    log.info("mesh phase: %d pivot Gaussians, %d sites", len(selected), len(pivots))
    return scene, pivots


__all__ = [
    "AdamState",
    "adam_step",
    "SceneOptimizer",
    "TrainConfig",
    "TrainResult",
    "ScheduleError",
    "read_config_file",
    "train",
    "train_view_indices",
    "LossBreakdown",
]
