"""Delaunay sites from Gaussians and importance-weighted pivot selection."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .rotation import quat_to_rotmat, rotmat_jacobian
from .scene import GaussianScene

#: b_0 is the center; b_1..b_8 are the unit-box corners in lexicographic sign order.
UNIT_OFFSETS = np.array([(0.0, 0.0, 0.0)] + list(itertools.product((-1.0, 1.0), repeat=3)))


@dataclass
class PivotSet:
    sites: np.ndarray  # (9 * K, 3)
    gaussian: np.ndarray  # (9 * K,) index k of the owning Gaussian
    corner: np.ndarray  # (9 * K,) corner index i in 0..8
    selected: np.ndarray  # (K,) sorted Gaussian indices
    corner_mult: float = 1.0

    def __len__(self) -> int:
        return len(self.sites)

    def sdf_pre(self, scene: GaussianScene) -> np.ndarray:
        return scene.sdf_pre[self.gaussian, self.corner]

    def sdf(self, scene: GaussianScene) -> np.ndarray:
        return np.tanh(self.sdf_pre(scene))

    def center_sites(self) -> np.ndarray:
        return np.nonzero(self.corner == 0)[0]


def _check_selected(scene: GaussianScene, selected) -> np.ndarray:
    sel = np.unique(np.asarray(selected, dtype=np.int64))
    if sel.size == 0:
        raise ValueError("selected set is empty")
    if sel[0] < 0 or sel[-1] >= len(scene):
        raise IndexError(f"selected index out of range for {len(scene)} Gaussians")
    return sel


def sample_pivots(scene: GaussianScene, selected=None, corner_mult: float = 1.0) -> PivotSet:
    """Nine sites per selected Gaussian: ``mu + R (s * b_i)``."""
    if corner_mult <= 0:
        raise ValueError("corner_mult must be positive")
    sel = np.arange(len(scene)) if selected is None else _check_selected(scene, selected)
    R = quat_to_rotmat(scene.quat[sel])  # (K, 3, 3)
    s = np.exp(scene.log_scale[sel])  # (K, 3)
    b = UNIT_OFFSETS.copy()
    b[1:] *= corner_mult
    local = s[:, None, :] * b[None, :, :]  # (K, 9, 3)
    sites = scene.mu[sel][:, None, :] + np.einsum("kab,kib->kia", R, local)
    k = len(sel)
    return PivotSet(
        sites=sites.reshape(-1, 3),
        gaussian=np.repeat(sel, 9),
        corner=np.tile(np.arange(9), k),
        selected=sel,
        corner_mult=float(corner_mult),
    )


def pivot_jacobian(scene: GaussianScene, pivots: PivotSet) -> dict[str, np.ndarray]:
    """Per-site Jacobian blocks w.r.t. the owning Gaussian's parameters.

    Returns ``mu`` (M, 3, 3), ``quat`` (M, 3, 4) and ``log_scale`` (M, 3, 3).
    """
    g = pivots.gaussian
    b = UNIT_OFFSETS[pivots.corner].copy()
    b[pivots.corner > 0] *= pivots.corner_mult
    s = np.exp(scene.log_scale[g])
    R = quat_to_rotmat(scene.quat[g])
    dR = rotmat_jacobian(scene.quat[g])  # (M, 4, 3, 3)
    local = s * b
    return {
        "mu": np.broadcast_to(np.eye(3), (len(g), 3, 3)).copy(),
        "quat": np.einsum("miab,mb->mai", dR, local),
        "log_scale": R * local[:, None, :],
    }


def pivot_backward(scene: GaussianScene, pivots: PivotSet, grad_sites: np.ndarray) -> dict[str, np.ndarray]:
    """Accumulate dL/dsites onto ``mu``, ``quat`` and ``log_scale`` of the whole scene."""
    n = len(scene)
    g = pivots.gaussian
    gs = np.asarray(grad_sites, dtype=np.float64)
    b = UNIT_OFFSETS[pivots.corner].copy()
    b[pivots.corner > 0] *= pivots.corner_mult
    s = np.exp(scene.log_scale[g])
    local = s * b

    out = {"mu": np.zeros((n, 3)), "quat": np.zeros((n, 4)), "log_scale": np.zeros((n, 3))}
    for c in range(3):
        out["mu"][:, c] = np.bincount(g, gs[:, c], minlength=n)
    # site = mu + R @ local  =>  dL/dR = gs local^T ; dL/dlocal = R^T gs
    sel = pivots.selected
    K = len(sel)
    gs9 = gs.reshape(K, 9, 3)
    loc9 = local.reshape(K, 9, 3)
    gR = np.einsum("kia,kib->kab", gs9, loc9)
    R = quat_to_rotmat(scene.quat[sel])
    glocal = np.einsum("kab,kia->kib", R, gs9)
    out["quat"][sel] = np.einsum("kiab,kab->ki", rotmat_jacobian(scene.quat[sel]), gR)
    out["log_scale"][sel] = np.sum(glocal * loc9, axis=1)
    return out


# ---------------------------------------------------------------- importance


def compute_importance(scene: GaussianScene, cameras, renderer=None, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Blending weight accumulated by each Gaussian over all pixels, averaged over views."""
    if len(cameras) == 0:
        raise ValueError("compute_importance needs at least one camera")
    if renderer is None:
        from .render import render_gaussians as renderer
    score = np.zeros(len(scene))
    for cam in cameras:
        score += renderer(scene, cam, background).weight_sum
    return score / len(cameras)


def select_pivot_gaussians(scores, budget: int, mode: str = "base", seed: int = 0) -> np.ndarray:
    """Weighted sampling without replacement (exponential race).

    Zero-score Gaussians are only drawn once every positive-score Gaussian is
    taken. ``mode`` does not change the draw; it tells the caller whether the
    unselected Gaussians are pruned (``base``) or kept for rendering (``dense``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if mode not in ("base", "dense"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 1 <= budget <= n:
        raise ValueError(f"budget {budget} outside [1, {n}]")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and non-negative")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    pos = scores > 0
    key = np.full(n, np.inf)
    key[pos] = -np.log1p(-u[pos]) / scores[pos]
    # zero-score entries: ordered among themselves by their uniform draw
    order = np.lexsort((np.where(pos, 0.0, u), key))
    return np.sort(order[:budget])
