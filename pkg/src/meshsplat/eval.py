"""Geometry metrics against analytic ground truth and mesh-based view synthesis.

The color field is a trilinear RGB voxel grid over the scene box, fitted to the
training pixels that hit the mesh (back-projected through the mesh depth).
Because colors live in space rather than on vertices, the rendered images do
not depend on how finely the mesh is tessellated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .meshing import ExtractedMesh, interior_components, sample_surface
from .optim import AdamState, adam_step, train_view_indices
from .render import rasterize_mesh
from .scene import Camera

PSNR_MSE_FLOOR = 1e-10  # caps PSNR at 100 dB


# ---------------------------------------------------------------- geometry


def _check_inputs(mesh: ExtractedMesh, gt) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if mesh.n_faces == 0:
        raise ValueError("mesh is empty")
    if len(gt) == 0:
        raise ValueError("ground-truth point set is empty")
    return gt


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Average of the two mean nearest-neighbour distances a->b and b->a."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def precision_recall(pred: np.ndarray, gt: np.ndarray, threshold: float) -> tuple[float, float]:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    dp, _ = cKDTree(gt).query(pred)
    dg, _ = cKDTree(pred).query(gt)
    return float(np.mean(dp <= threshold)), float(np.mean(dg <= threshold))


def f1_points(pred: np.ndarray, gt: np.ndarray, threshold: float) -> float:
    p, r = precision_recall(pred, gt, threshold)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def chamfer(mesh: ExtractedMesh, gt, n_samples: int = 100_000, seed: int = 0) -> float:
    gt = _check_inputs(mesh, gt)
    pts = sample_surface(mesh, n_samples, np.random.default_rng(seed))
    return chamfer_points(pts, gt)


def f1_score(mesh: ExtractedMesh, gt, threshold: float, n_samples: int = 100_000, seed: int = 0) -> float:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    gt = _check_inputs(mesh, gt)
    pts = sample_surface(mesh, n_samples, np.random.default_rng(seed))
    return f1_points(pts, gt, threshold)


def positive_center_fraction(scene, selected) -> float:
    """Fraction of selected Gaussians whose center SDF value is positive (outside)."""
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == 0:
        return 0.0
    return float(np.mean(scene.sdf_pre[selected, 0] > 0))


# ---------------------------------------------------------------- color field


@dataclass
class ColorField:
    grid: np.ndarray  # (N, N, N, 3)
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def gray(cls, n: int, lo, hi) -> "ColorField":
        return cls(np.full((n, n, n, 3), 0.5), np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    def _corners(self, points: np.ndarray):
        n = self.n
        x = (np.asarray(points, dtype=np.float64) - self.lo) / (self.hi - self.lo) * (n - 1)
        x = np.clip(x, 0.0, n - 1)
        i0 = np.minimum(np.floor(x).astype(np.int64), n - 2)
        t = x - i0
        idx, wts = [], []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (t[:, 0] if dx else 1 - t[:, 0]) * (t[:, 1] if dy else 1 - t[:, 1]) * (t[:, 2] if dz else 1 - t[:, 2])
                    flat = ((i0[:, 0] + dx) * n + (i0[:, 1] + dy)) * n + (i0[:, 2] + dz)
                    idx.append(flat)
                    wts.append(w)
        return np.stack(idx, axis=1), np.stack(wts, axis=1)

    def query(self, points: np.ndarray) -> np.ndarray:
        idx, w = self._corners(points)
        flat = self.grid.reshape(-1, 3)
        return np.clip(np.einsum("pk,pkc->pc", w, flat[idx]), 0.0, 1.0)


def backproject(cam: Camera, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points of all foreground pixels and the boolean foreground mask."""
    fg = np.isfinite(depth)
    pc = cam.ray_dirs()[fg] * depth[fg][:, None]
    return (pc - cam.t) @ cam.R, fg


def fit_color_field(
    mesh: ExtractedMesh, cameras, images, bounds, n_grid: int = 64, iters: int = 2000, lr: float = 0.05
) -> ColorField:
    """Fit grid colors to training pixels that hit the mesh (squared error, Adam)."""
    if len(cameras) == 0:
        raise ValueError("need at least one training view")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    pad = 0.05 * (hi - lo)
    field_ = ColorField.gray(n_grid, lo - pad, hi + pad)
    pts, cols = [], []
    for cam, img in zip(cameras, images):
        p, fg = backproject(cam, rasterize_mesh(mesh, cam).depth)
        pts.append(p)
        cols.append(np.asarray(img)[fg])
    P = np.concatenate(pts)
    C = np.concatenate(cols)
    if len(P) == 0:
        raise ValueError("no training pixel hits the mesh")
    idx, w = field_._corners(P)
    flat = field_.grid.reshape(-1, 3)
    state = AdamState.zeros_like(flat)
    n_cells = len(flat)
    for _ in range(iters):
        pred = np.einsum("pk,pkc->pc", w, flat[idx])
        resid = 2.0 * (pred - C) / len(P)
        g = np.zeros_like(flat)
        for c in range(3):
            g[:, c] = np.bincount(idx.ravel(), (w * resid[:, c : c + 1]).ravel(), minlength=n_cells)
        adam_step(flat, g, state, lr, eps=1e-15, name="color_field")
        np.clip(flat, 0.0, 1.0, out=flat)
    return field_


def render_mesh_color(mesh: ExtractedMesh, field_: ColorField, cam: Camera, background) -> np.ndarray:
    img = np.empty(cam.shape + (3,))
    img[:] = np.asarray(background, dtype=np.float64)
    if mesh.n_faces == 0:
        return img
    p, fg = backproject(cam, rasterize_mesh(mesh, cam).depth)
    if len(p):
        img[fg] = field_.query(p)
    return img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = max(float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)), PSNR_MSE_FLOOR)
    return float(-10.0 * np.log10(mse))


def mesh_nvs_psnr(mesh: ExtractedMesh, field_: ColorField, cameras, images, background) -> list[float]:
    return [psnr(render_mesh_color(mesh, field_, c, background), img) for c, img in zip(cameras, images)]


# ---------------------------------------------------------------- report


def evaluate(
    mesh: ExtractedMesh,
    cameras,
    images,
    background,
    bounds,
    gt=None,
    f1_threshold: float | None = None,
    n_samples: int = 100_000,
    n_grid: int = 64,
    color_iters: int = 2000,
    seed: int = 0,
) -> dict:
    """Metrics report: chamfer, f1, per-view and mean mesh-NVS PSNR, mesh stats."""
    idx = np.arange(len(cameras))
    train = train_view_indices(len(cameras))
    test = np.setdiff1d(idx, train)
    if len(test) == 0:
        test = idx
    report = {"chamfer": None, "f1": None, "per_view_psnr": [], "mean_psnr": None}
    if gt is not None and mesh.n_faces > 0:
        report["chamfer"] = chamfer(mesh, gt, n_samples, seed)
        if f1_threshold is not None:
            report["f1"] = f1_score(mesh, gt, f1_threshold, n_samples, seed)
    if mesh.n_faces > 0:
        field_ = fit_color_field(mesh, [cameras[i] for i in train], [images[i] for i in train], bounds, n_grid, color_iters)
        per = mesh_nvs_psnr(mesh, field_, [cameras[i] for i in test], [images[i] for i in test], background)
        report["per_view_psnr"] = per
        report["mean_psnr"] = float(np.mean(per))
    comps = interior_components(mesh)
    report["mesh_stats"] = {
        "n_vertices": int(mesh.n_vertices),
        "n_faces": int(mesh.n_faces),
        "n_interior_components": int(comps.n_interior),
    }
    return report
