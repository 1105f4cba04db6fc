"""Loss terms, occupancy labels, SDF initialization and the full loss chain.

Every loss returns ``(value, grad...)`` with gradients w.r.t. its inputs; all
per-pixel and per-site sums are mean-normalized.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .meshing import ExtractedMesh, marching_tetrahedra, mt_backward
from .pivots import PivotSet, pivot_backward, sample_pivots
from .render import antialias_depth, depth_to_normal, rasterize_mesh, render_gaussians
from .scene import Camera, GaussianScene

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ATANH_SHRINK = 1.0 - 1e-6
OCCUPANCY_EPS = 1e-4  # relative to the bounding-box diagonal
DEPTH_ALPHA_MIN = 0.5


@dataclass
class LossWeights:
    lambda_rgb: float = 0.2
    lambda_n: float = 0.05
    lambda_md: float = 0.05
    lambda_mn: float = 0.05
    lambda_erosion: float = 0.005
    lambda_interior: float = 0.005

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.lambda_rgb > 1:
            raise ValueError("lambda_rgb must lie in [0, 1]")


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


# ---------------------------------------------------------------- photometric


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_WIN = _gauss_window()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian window over the two image axes, zero padded."""
    y = correlate1d(x, _WIN, axis=0, mode="constant")
    return correlate1d(y, _WIN, axis=1, mode="constant")


def ssim(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over pixels and channels and its gradient w.r.t. ``x``."""
    _check_shapes(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    n = S.size
    g = 1.0 / n
    d_mx = g * S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2)
    d_exy = g * S * 2 / A2
    d_exx = -g * S / B2
    grad = _blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return float(S.mean()), grad


def loss_photometric(rendered, target, lambda_rgb: float):
    """``(1 - lambda) L1 + lambda (1 - SSIM) / 2``; returns (value, grad, parts)."""
    _check_shapes(rendered, target)
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    diff = r - t
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim(r, t)
    dssim = 0.5 * (1.0 - s)
    value = (1 - lambda_rgb) * l1 + lambda_rgb * dssim
    grad = (1 - lambda_rgb) * g_l1 - 0.5 * lambda_rgb * g_s
    return value, grad, {"l1": l1, "dssim": dssim}


# ---------------------------------------------------------------- normals / depth


def _normal_agreement(N, M):
    _check_shapes(N, M)
    N = np.asarray(N, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    valid = np.any(N != 0, axis=-1) & np.any(M != 0, axis=-1)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(N), np.zeros_like(M)
    dot = np.sum(N * M, axis=-1)
    value = float(np.sum(np.where(valid, 1.0 - dot, 0.0)) / count)
    w = valid[..., None] / count
    return value, -M * w, -N * w


def loss_normal_consistency(N, N_tilde):
    """Mean of ``1 - N . N_tilde`` over pixels that are foreground in both."""
    return _normal_agreement(N, N_tilde)


def loss_mesh_normal(N_tilde, N_mesh):
    """Mean of ``1 - N_tilde . N_mesh`` over pixels that are foreground in both."""
    return _normal_agreement(N_tilde, N_mesh)


def loss_mesh_depth(D, D_mesh, d_cap: float):
    """Mean of ``log(1 + |D - D_M|)`` over pixels foreground in either map.

    Pixels foreground in only one map contribute the constant ``log(1 + d_cap)``.
    """
    _check_shapes(D, D_mesh)
    D = np.asarray(D, dtype=np.float64)
    DM = np.asarray(D_mesh, dtype=np.float64)
    fa, fb = np.isfinite(D), np.isfinite(DM)
    both = fa & fb
    either = fa | fb
    count = int(either.sum())
    gD = np.zeros_like(D)
    gM = np.zeros_like(DM)
    if count == 0:
        return 0.0, gD, gM
    diff = np.where(both, np.where(fa, D, 0.0) - np.where(fb, DM, 0.0), 0.0)
    ad = np.abs(diff)
    value = (np.sum(np.log1p(ad)[both]) + np.log1p(d_cap) * int((either & ~both).sum())) / count
    g = np.sign(diff) / (1.0 + ad) / count
    gD[both] = g[both]
    gM[both] = -g[both]
    return float(value), gD, gM


# ---------------------------------------------------------------- regularizers


def loss_erosion(scene: GaussianScene, selected):
    """Mean hinge ``max(0, f)`` on the center SDF value of each selected Gaussian.

    Returns (value, grad on ``scene.sdf_pre`` of shape (N, 9)).
    """
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size == 0:
        raise ValueError("selected set is empty")
    f = np.tanh(scene.sdf_pre[sel, 0])
    pos = f > 0
    value = float(np.sum(np.where(pos, f, 0.0)) / len(sel))
    grad = np.zeros_like(scene.sdf_pre)
    np.add.at(grad[:, 0], sel, np.where(pos, (1 - f * f) / len(sel), 0.0))
    return value, grad


def softplus(x):
    return np.logaddexp(0.0, x)


def loss_interior_values(f, occupancy):
    """Mean ``log(1 + e^f)`` over interior sites; returns (value, dL/df)."""
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(occupancy).astype(bool)
    if o.shape != f.shape:
        raise ValueError(f"occupancy has {o.shape} entries, sites {f.shape}")
    n = int(o.sum())
    if n == 0:
        return 0.0, np.zeros_like(f)
    value = float(softplus(f[o]).sum() / n)
    grad = np.where(o, 0.5 * (1 + np.tanh(0.5 * f)) / n, 0.0)  # sigmoid(f) / n
    return value, grad


@dataclass
class OccupancyLabels:
    o: np.ndarray  # (M,) uint8 in {0, 1}
    last_update_iter: int = 0


def loss_interior(scene: GaussianScene, pivots: PivotSet, occupancy):
    """Interior cross-entropy on pivot SDF values; returns (value, grad on sdf_pre)."""
    o = occupancy.o if isinstance(occupancy, OccupancyLabels) else occupancy
    if len(o) != len(pivots):
        raise ValueError(f"occupancy has {len(o)} entries, pivot set has {len(pivots)} sites")
    pre = pivots.sdf_pre(scene)
    f = np.tanh(pre)
    value, gf = loss_interior_values(f, o)
    grad = np.zeros_like(scene.sdf_pre)
    np.add.at(grad, (pivots.gaussian, pivots.corner), gf * (1 - f * f))
    return value, grad


# ---------------------------------------------------------------- occupancy


def _lookup(depth: np.ndarray, cam: Camera, points: np.ndarray):
    """Depth under each point's pixel; returns (in_frustum, z_point, depth_at_pixel)."""
    u, v, z = cam.project(points)
    inside = cam.in_frustum(points)
    col = np.clip(np.floor(np.where(inside, u, 0)).astype(np.int64), 0, cam.width - 1)
    row = np.clip(np.floor(np.where(inside, v, 0)).astype(np.int64), 0, cam.height - 1)
    return inside, z, depth[row, col]


def compute_occupancy(
    mesh: ExtractedMesh, cameras, sites, bbox_diag: float, rasterizer=rasterize_mesh, iteration: int = 0
) -> OccupancyLabels:
    """Label a site inside when it lies behind the mesh depth in every view that sees it.

    A view whose pixel under the site shows background counts as evidence
    that the site is outside.
    """
    if len(cameras) == 0:
        raise ValueError("compute_occupancy needs at least one camera")
    sites = np.asarray(sites, dtype=np.float64)
    n = len(sites)
    if mesh.n_faces == 0:
        return OccupancyLabels(np.zeros(n, dtype=np.uint8), iteration)
    eps = OCCUPANCY_EPS * bbox_diag
    seen = np.zeros(n, dtype=bool)
    behind_all = np.ones(n, dtype=bool)
    for cam in cameras:
        depth = rasterizer(mesh, cam).depth
        inside, z, d = _lookup(depth, cam, sites)
        seen |= inside
        behind = np.isfinite(d) & (z > d + eps)
        behind_all &= ~inside | behind
    return OccupancyLabels((seen & behind_all).astype(np.uint8), iteration)


# ---------------------------------------------------------------- SDF initialization


def masked_depth(render) -> np.ndarray:
    """Gaussian expected depth with low-coverage pixels treated as background."""
    return np.where(render.alpha >= DEPTH_ALPHA_MIN, render.depth, np.inf)


def init_sdf(scene: GaussianScene, pivots: PivotSet, cameras, truncation: float, renderer=render_gaussians, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Pre-activation SDF per pivot site by fusing signed depth residuals over views.

    Per view the residual is ``D(pixel) - z`` clamped to +-tau, and +tau where
    the pixel is background. Views where the site sits more than tau behind
    the rendered surface are treated as occluded and skipped; a site occluded
    in every view that sees it gets -tau. Sites seen by no view get +tau / 2.
    """
    if len(cameras) < 2:
        raise ValueError("init_sdf needs at least 2 cameras")
    tau = float(truncation)
    sites = pivots.sites
    n = len(sites)
    acc = np.zeros(n)
    cnt = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    for cam in cameras:
        depth = masked_depth(renderer(scene, cam, background))
        inside, z, d = _lookup(depth, cam, sites)
        resid = np.where(np.isfinite(d), d - z, tau)
        use = inside & (resid >= -tau)
        seen |= inside
        acc += np.where(use, np.clip(resid, -tau, tau), 0.0)
        cnt += use
    dist = np.where(cnt > 0, acc / np.maximum(cnt, 1), -tau)
    dist = np.where(seen, dist, 0.5 * tau)
    return np.arctanh(np.clip(dist / tau, -1.0, 1.0) * ATANH_SHRINK)


# ---------------------------------------------------------------- full chain


@dataclass
class LossBreakdown:
    l1: float = 0.0
    dssim: float = 0.0
    photometric: float = 0.0
    normal: float = 0.0
    mesh_depth: float = 0.0
    mesh_normal: float = 0.0
    erosion: float = 0.0
    interior: float = 0.0
    total: float = 0.0

    COLUMNS = ("l1", "dssim", "photometric", "normal", "mesh_depth", "mesh_normal", "erosion", "interior", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.COLUMNS]


def combine(parts: dict, w: LossWeights) -> float:
    """``L_vol + L_mesh + L_reg`` from unweighted component values."""
    vol = (1 - w.lambda_rgb) * parts.get("l1", 0.0) + w.lambda_rgb * parts.get("dssim", 0.0) + w.lambda_n * parts.get("normal", 0.0)
    mesh = w.lambda_md * parts.get("mesh_depth", 0.0) + w.lambda_mn * parts.get("mesh_normal", 0.0)
    reg = w.lambda_erosion * parts.get("erosion", 0.0) + w.lambda_interior * parts.get("interior", 0.0)
    return vol + mesh + reg


@dataclass
class MeshContext:
    """Everything the mesh branch needs for one iteration."""

    pivots: PivotSet
    tets: np.ndarray
    occupancy: OccupancyLabels | None = None
    d_cap: float = 1.0
    antialias: bool = True
    mesh: ExtractedMesh | None = field(default=None)


def total_loss(
    scene: GaussianScene,
    cam: Camera,
    target: np.ndarray,
    weights: LossWeights,
    *,
    background=(0.0, 0.0, 0.0),
    use_normal: bool = True,
    mesh_ctx: MeshContext | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Full loss for one view and its gradient w.r.t. every scene parameter.

    With ``mesh_ctx`` the mesh is re-extracted by marching tetrahedra on the
    current pivot sites and SDF values over the (frozen) ``tets``. The
    extracted mesh is stored back on ``mesh_ctx.mesh``.
    """
    H, W = cam.height, cam.width
    r = render_gaussians(scene, cam, background)
    parts = {}
    value, g_color, ph = loss_photometric(r.color, target, weights.lambda_rgb)
    parts.update(ph)
    g_D = np.zeros((H, W))
    g_N = np.zeros((H, W, 3))
    g_Nt = np.zeros((H, W, 3))

    D = masked_depth(r)
    need_nt = use_normal or mesh_ctx is not None
    if need_nt:
        Nt, nt_backward = depth_to_normal(D, cam)
    if use_normal:
        parts["normal"], gN, gNt = loss_normal_consistency(r.normal, Nt)
        g_N += weights.lambda_n * gN
        g_Nt += weights.lambda_n * gNt

    grads = {k: np.zeros_like(v) for k, v in scene.params().items()}
    if mesh_ctx is not None:
        pv = mesh_ctx.pivots
        pv_now = sample_pivots(scene, pv.selected, pv.corner_mult)
        pre = pv_now.sdf_pre(scene)
        f = np.tanh(pre)
        mesh = marching_tetrahedra(mesh_ctx.tets, pv_now.sites, f)
        mesh_ctx.mesh = mesh
        g_sites = np.zeros_like(pv_now.sites)
        g_f = np.zeros(len(f))
        if mesh.n_faces > 0:
            m = rasterize_mesh(mesh, cam)
            if mesh_ctx.antialias:
                DM, aa_backward = antialias_depth(m.depth)
            else:
                DM, aa_backward = m.depth, (lambda g: g)
            parts["mesh_depth"], gD_md, gDM = loss_mesh_depth(D, DM, mesh_ctx.d_cap)
            parts["mesh_normal"], gNt_mn, gNM = loss_mesh_normal(Nt, m.normal)
            g_D += weights.lambda_md * gD_md
            g_Nt += weights.lambda_mn * gNt_mn
            g_verts = m.backward(grad_depth=weights.lambda_md * aa_backward(gDM), grad_normal=weights.lambda_mn * gNM)
            g_sites, g_f = mt_backward(mesh, pv_now.sites, g_verts)
        parts["erosion"], g_ero = loss_erosion(scene, pv_now.selected)
        grads["sdf_pre"] += weights.lambda_erosion * g_ero
        if mesh_ctx.occupancy is not None and weights.lambda_interior > 0:
            parts["interior"], g_fi = loss_interior_values(f, mesh_ctx.occupancy.o)
            g_f = g_f + weights.lambda_interior * g_fi
        g_pre = g_f * (1 - f * f)
        np.add.at(grads["sdf_pre"], (pv_now.gaussian, pv_now.corner), g_pre)
        pg = pivot_backward(scene, pv_now, g_sites)
        for k in ("mu", "quat", "log_scale"):
            grads[k] += pg[k]

    if need_nt:
        g_D += nt_backward(g_Nt)
    g_D = np.where(np.isfinite(D), g_D, 0.0)
    rg = r.backward(grad_depth=g_D, grad_normal=g_N, grad_color=g_color)
    for k, v in rg.items():
        grads[k] += v
    parts["photometric"] = value
    parts["total"] = combine(parts, weights)
    return LossBreakdown(**parts), grads
