"""Front-to-back alpha compositing of EWA-projected Gaussians, with reverse mode.

Each Gaussian is projected to a 2D Gaussian through the first-order
perspective Jacobian, dilated by ``DILATION`` px^2 and cut off at 3 sigma.
The cut-off footprint is shifted and rescaled so it reaches exactly 0 at the
boundary, which keeps the render continuous in every parameter.

The compositing kernels exist twice: a numba per-pixel loop over 8x8 tiles,
and a vectorized numpy twin that works on (pixels x Gaussians) blocks. The
environment flag ``MESHSPLAT_NUMBA=0`` selects the twin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._jit import USE_NUMBA, njit
from ..rotation import quat_to_rotmat, quat_to_rotmat_backward
from ..scene import Camera, GaussianScene

DILATION = 0.3
CUTOFF_M = 9.0  # squared Mahalanobis radius, i.e. 3 sigma
_EXP_CUT = float(np.exp(-0.5 * CUTOFF_M))
ALPHA_MAX = 0.999
T_MIN = 1e-4
NEAR = 1e-2
TILE = 8


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (H, W) camera z, +inf on background
    normal: np.ndarray  # (H, W, 3) camera frame, zero on background
    color: np.ndarray | None  # (H, W, 3)
    alpha: np.ndarray  # (H, W)


@dataclass
class GaussianRender(RenderBuffers):
    weight_sum: np.ndarray = None  # (N,) blending weight summed over pixels
    _ctx: dict = field(default=None, repr=False)

    def backward(self, grad_depth=None, grad_normal=None, grad_color=None) -> dict[str, np.ndarray]:
        """Gradients w.r.t. mu, quat, log_scale, logit_opacity and rgb."""
        return _render_backward(self._ctx, grad_depth, grad_normal, grad_color)


# ---------------------------------------------------------------- projection


def _project(scene: GaussianScene, cam: Camera) -> dict:
    W = cam.R
    R = quat_to_rotmat(scene.quat)
    s = np.exp(scene.log_scale)
    M = R * s[:, None, :]
    Sigma = M @ np.transpose(M, (0, 2, 1))
    pc = scene.mu @ W.T + cam.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    J = np.zeros((len(scene), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    Sc = W @ Sigma @ W.T
    S2 = J @ Sc @ np.transpose(J, (0, 2, 1)) + DILATION * np.eye(2)
    det = S2[:, 0, 0] * S2[:, 1, 1] - S2[:, 0, 1] ** 2
    conic = np.stack([S2[:, 1, 1] / det, -S2[:, 0, 1] / det, S2[:, 0, 0] / det], axis=1)
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    tr = 0.5 * (S2[:, 0, 0] + S2[:, 1, 1])
    lam = tr + np.sqrt(np.maximum(tr**2 - det, 0.0))
    rad = np.sqrt(CUTOFF_M * lam)
    # smallest-scale axis as the normal, flipped toward the camera
    jstar = np.argmin(scene.log_scale, axis=1)
    n_world = R[np.arange(len(scene)), :, jstar]
    n_cam = n_world @ W.T
    sgn = np.where(np.einsum("ij,ij->i", n_cam, pc) > 0, -1.0, 1.0)
    visible = front & (u + rad > 0) & (u - rad < cam.width) & (v + rad > 0) & (v - rad < cam.height)
    return dict(
        R=R, s=s, M=M, Sigma=Sigma, pc=pc, J=J, Sc=Sc, S2=S2, conic=conic, u=u, v=v, z=z, rad=rad,
        jstar=jstar, normal=n_cam * sgn[:, None], sgn=sgn, visible=visible,
        opacity=1.0 / (1.0 + np.exp(-scene.logit_opacity)),
    )


def _project_backward(scene: GaussianScene, cam: Camera, P: dict, g: dict) -> dict[str, np.ndarray]:
    """Chain per-Gaussian screen-space gradients back to scene parameters."""
    n = len(scene)
    W = cam.R
    x, y, z = P["pc"][:, 0], P["pc"][:, 1], P["pc"][:, 2]
    zs = np.where(z > NEAR, z, 1.0)
    fx, fy = cam.fx, cam.fy
    a, b, c = P["conic"][:, 0], P["conic"][:, 1], P["conic"][:, 2]
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = a, b, b, c
    gQ = np.empty((n, 2, 2))
    gQ[:, 0, 0] = g["qa"]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * g["qb"]
    gQ[:, 1, 1] = g["qc"]
    gS2 = -Q @ gQ @ Q
    J = P["J"]
    Jt = np.transpose(J, (0, 2, 1))
    gSc = Jt @ gS2 @ J
    gJ = 2.0 * gS2 @ J @ P["Sc"]

    gpc = np.zeros((n, 3))
    gpc[:, 0] += g["u"] * fx / zs
    gpc[:, 1] += g["v"] * fy / zs
    gpc[:, 2] += -g["u"] * fx * x / zs**2 - g["v"] * fy * y / zs**2 + g["z"]
    gpc[:, 0] += gJ[:, 0, 2] * (-fx / zs**2)
    gpc[:, 1] += gJ[:, 1, 2] * (-fy / zs**2)
    gpc[:, 2] += (
        gJ[:, 0, 0] * (-fx / zs**2)
        + gJ[:, 0, 2] * (2 * fx * x / zs**3)
        + gJ[:, 1, 1] * (-fy / zs**2)
        + gJ[:, 1, 2] * (2 * fy * y / zs**3)
    )
    g_mu = gpc @ W

    gSigma = W.T @ gSc @ W
    gSigma = 0.5 * (gSigma + np.transpose(gSigma, (0, 2, 1)))
    gM = 2.0 * gSigma @ P["M"]
    s = P["s"]
    gR = gM * s[:, None, :]
    g_s = np.einsum("nij,nij->nj", gM, P["R"])
    # normal = sgn * W R[:, j*]
    gn_world = (g["n"] * P["sgn"][:, None]) @ W
    gR[np.arange(n), :, P["jstar"]] += gn_world
    o = P["opacity"]
    return {
        "mu": g_mu,
        "quat": quat_to_rotmat_backward(scene.quat, gR),
        "log_scale": g_s * s,
        "logit_opacity": g["opacity"] * o * (1 - o),
        "rgb": g["rgb"],
    }


# ---------------------------------------------------------------- tiles


@njit
def _bin_tiles(order, u, v, rad, n_tx, n_ty, tile):
    counts = np.zeros(n_tx * n_ty + 1, np.int64)
    tx0 = np.empty(order.shape[0], np.int64)
    tx1 = np.empty(order.shape[0], np.int64)
    ty0 = np.empty(order.shape[0], np.int64)
    ty1 = np.empty(order.shape[0], np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        tx0[k] = max(0, int(np.floor((u[g] - rad[g] - 0.5) / tile)))
        tx1[k] = min(n_tx - 1, int(np.floor((u[g] + rad[g] - 0.5) / tile)))
        ty0[k] = max(0, int(np.floor((v[g] - rad[g] - 0.5) / tile)))
        ty1[k] = min(n_ty - 1, int(np.floor((v[g] + rad[g] - 0.5) / tile)))
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                t = ty * n_tx + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists


@njit
def _footprint(px, py, u, v, qa, qb, qc):
    dx = px - u
    dy = py - v
    m = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
    return dx, dy, m


@njit
def _composite_numba(H, W, tile, n_tx, offsets, lists, u, v, qa, qb, qc, opac, col, z, nrm, bg):
    color = np.zeros((H, W, 3))
    sz = np.zeros((H, W))
    sw = np.zeros((H, W))
    nr = np.zeros((H, W, 3))
    T_out = np.ones((H, W))
    last = np.full((H, W), -1, np.int64)
    wsum = np.zeros(u.shape[0])
    for py in range(H):
        for px in range(W):
            t = (py // tile) * n_tx + px // tile
            T = 1.0
            for idx in range(offsets[t], offsets[t + 1]):
                g = lists[idx]
                dx, dy, m = _footprint(px + 0.5, py + 0.5, u[g], v[g], qa[g], qb[g], qc[g])
                if not (m < CUTOFF_M) or m < 0.0:
                    continue
                G = (np.exp(-0.5 * m) - _EXP_CUT) / (1.0 - _EXP_CUT)
                a = opac[g] * G
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                w = a * T
                for ch in range(3):
                    color[py, px, ch] += w * col[g, ch]
                    nr[py, px, ch] += w * nrm[g, ch]
                sz[py, px] += w * z[g]
                sw[py, px] += w
                wsum[g] += w
                T *= 1.0 - a
                last[py, px] = idx
                if T < T_MIN:
                    break
            T_out[py, px] = T
            for ch in range(3):
                color[py, px, ch] += T * bg[ch]
    return color, sz, sw, nr, T_out, last, wsum


@njit
def _composite_backward_numba(
    H, W, tile, n_tx, offsets, lists, u, v, qa, qb, qc, opac, col, z, nrm, bg, T_out, last, gC, gDn, D, gNr
):
    n = u.shape[0]
    g_u = np.zeros(n)
    g_v = np.zeros(n)
    g_qa = np.zeros(n)
    g_qb = np.zeros(n)
    g_qc = np.zeros(n)
    g_op = np.zeros(n)
    g_col = np.zeros((n, 3))
    g_z = np.zeros(n)
    g_n = np.zeros((n, 3))
    for py in range(H):
        for px in range(W):
            lst = last[py, px]
            if lst < 0:
                continue
            t = (py // tile) * n_tx + px // tile
            T = T_out[py, px]
            S = T * (gC[py, px, 0] * bg[0] + gC[py, px, 1] * bg[1] + gC[py, px, 2] * bg[2])
            for idx in range(lst, offsets[t] - 1, -1):
                g = lists[idx]
                dx, dy, m = _footprint(px + 0.5, py + 0.5, u[g], v[g], qa[g], qb[g], qc[g])
                if not (m < CUTOFF_M) or m < 0.0:
                    continue
                eg = np.exp(-0.5 * m)
                G = (eg - _EXP_CUT) / (1.0 - _EXP_CUT)
                a = opac[g] * G
                clamped = a > ALPHA_MAX
                if clamped:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                Tk = T / (1.0 - a)
                w = a * Tk
                gw = gDn[py, px] * (z[g] - D[py, px])
                for ch in range(3):
                    gw += gC[py, px, ch] * col[g, ch] + gNr[py, px, ch] * nrm[g, ch]
                    g_col[g, ch] += gC[py, px, ch] * w
                    g_n[g, ch] += gNr[py, px, ch] * w
                g_z[g] += gDn[py, px] * w
                ga = Tk * gw - S / (1.0 - a)
                S += gw * w
                T = Tk
                if not clamped:
                    g_op[g] += ga * G
                    gm = ga * opac[g] * (-0.5 * eg / (1.0 - _EXP_CUT))
                    g_u[g] += -2.0 * gm * (qa[g] * dx + qb[g] * dy)
                    g_v[g] += -2.0 * gm * (qb[g] * dx + qc[g] * dy)
                    g_qa[g] += gm * dx * dx
                    g_qb[g] += gm * 2.0 * dx * dy
                    g_qc[g] += gm * dy * dy
    return g_u, g_v, g_qa, g_qb, g_qc, g_op, g_col, g_z, g_n


# ---------------------------------------------------------------- numpy twin


def _pixel_alpha(px, py, u, v, qa, qb, qc, opac):
    """(P, N) alpha, footprint and bookkeeping for a block of pixels."""
    dx = px[:, None] - u[None, :]
    dy = py[:, None] - v[None, :]
    m = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
    inside = (m < CUTOFF_M) & (m >= 0.0)
    eg = np.exp(-0.5 * np.where(inside, m, CUTOFF_M))
    G = np.where(inside, (eg - _EXP_CUT) / (1.0 - _EXP_CUT), 0.0)
    a_raw = opac[None, :] * G
    clamped = a_raw > ALPHA_MAX
    a = np.minimum(a_raw, ALPHA_MAX)
    a = np.where(a > 0.0, a, 0.0)
    one_m = 1.0 - a
    T_incl = np.cumprod(one_m, axis=1)
    T_before = np.concatenate([np.ones((len(px), 1)), T_incl[:, :-1]], axis=1)
    contrib = (T_before >= T_MIN) & (a > 0.0)
    a = np.where(contrib, a, 0.0)
    T_before = np.concatenate([np.ones((len(px), 1)), np.cumprod(1.0 - a, axis=1)[:, :-1]], axis=1)
    return dict(dx=dx, dy=dy, m=m, eg=eg, G=G, a=a, clamped=clamped, contrib=contrib, T_before=T_before)


_BLOCK = 256


def _composite_numpy(H, W, order, u, v, qa, qb, qc, opac, col, z, nrm, bg):
    py, px = np.divmod(np.arange(H * W), W)
    P = H * W
    color = np.zeros((P, 3))
    sz = np.zeros(P)
    sw = np.zeros(P)
    nr = np.zeros((P, 3))
    T_out = np.ones(P)
    last = np.full(P, -1, dtype=np.int64)
    wsum_sorted = np.zeros(len(order))
    args = (u[order], v[order], qa[order], qb[order], qc[order], opac[order])
    for s0 in range(0, P, _BLOCK):
        sl = slice(s0, min(P, s0 + _BLOCK))
        A = _pixel_alpha(px[sl] + 0.5, py[sl] + 0.5, *args)
        w = A["a"] * A["T_before"]
        color[sl] = w @ col[order]
        nr[sl] = w @ nrm[order]
        sz[sl] = w @ z[order]
        sw[sl] = w.sum(axis=1)
        wsum_sorted += w.sum(axis=0)
        T_out[sl] = np.prod(1.0 - A["a"], axis=1)
        any_c = A["contrib"].any(axis=1)
        last[sl] = np.where(any_c, A["contrib"].shape[1] - 1 - np.argmax(A["contrib"][:, ::-1], axis=1), -1)
    color += T_out[:, None] * bg
    wsum = np.zeros(len(u))
    wsum[order] = wsum_sorted
    return (
        color.reshape(H, W, 3), sz.reshape(H, W), sw.reshape(H, W), nr.reshape(H, W, 3),
        T_out.reshape(H, W), last.reshape(H, W), wsum,
    )


def _composite_backward_numpy(H, W, order, u, v, qa, qb, qc, opac, col, z, nrm, bg, T_out, gC, gDn, D, gNr):
    n = len(u)
    py, px = np.divmod(np.arange(H * W), W)
    P = H * W
    gC = gC.reshape(P, 3)
    gDn = gDn.reshape(P)
    D = np.where(np.isfinite(D), D, 0.0).reshape(P)
    gNr = gNr.reshape(P, 3)
    T_out = T_out.reshape(P)
    K = len(order)
    acc = {k: np.zeros(K) for k in ("u", "v", "qa", "qb", "qc", "op", "z")}
    g_col = np.zeros((K, 3))
    g_n = np.zeros((K, 3))
    us, vs, qas, qbs, qcs, ops = u[order], v[order], qa[order], qb[order], qc[order], opac[order]
    cs, zs, ns = col[order], z[order], nrm[order]
    for s0 in range(0, P, _BLOCK):
        sl = slice(s0, min(P, s0 + _BLOCK))
        A = _pixel_alpha(px[sl] + 0.5, py[sl] + 0.5, us, vs, qas, qbs, qcs, ops)
        a, Tb = A["a"], A["T_before"]
        w = a * Tb
        gw = gC[sl] @ cs.T + gNr[sl] @ ns.T + gDn[sl, None] * (zs[None, :] - D[sl, None])
        gw = np.where(A["contrib"], gw, 0.0)
        g_col += w.T @ gC[sl]
        g_n += w.T @ gNr[sl]
        acc["z"] += (w * gDn[sl, None]).sum(axis=0)
        # S_k = sum_{j>k} gw_j w_j + gT * T_final
        gw_w = gw * w
        tail = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1]
        S = tail - gw_w + (T_out[sl] * (gC[sl] @ bg))[:, None]
        ga = np.where(A["contrib"], Tb * gw - S / (1.0 - a), 0.0)
        live = A["contrib"] & ~A["clamped"]
        ga = np.where(live, ga, 0.0)
        acc["op"] += (ga * A["G"]).sum(axis=0)
        gm = ga * ops[None, :] * (-0.5 * A["eg"] / (1.0 - _EXP_CUT))
        dx, dy = A["dx"], A["dy"]
        acc["u"] += (-2.0 * gm * (qas * dx + qbs * dy)).sum(axis=0)
        acc["v"] += (-2.0 * gm * (qbs * dx + qcs * dy)).sum(axis=0)
        acc["qa"] += (gm * dx * dx).sum(axis=0)
        acc["qb"] += (gm * 2.0 * dx * dy).sum(axis=0)
        acc["qc"] += (gm * dy * dy).sum(axis=0)

    def scatter(x):
        out = np.zeros((n,) + x.shape[1:])
        out[order] = x
        return out

    return (
        scatter(acc["u"]), scatter(acc["v"]), scatter(acc["qa"]), scatter(acc["qb"]), scatter(acc["qc"]),
        scatter(acc["op"]), scatter(g_col), scatter(acc["z"]), scatter(g_n),
    )


# ---------------------------------------------------------------- driver


def render_gaussians(scene: GaussianScene, cam: Camera, background=(0.0, 0.0, 0.0)) -> GaussianRender:
    """Render depth, normal, color and alpha maps from the Gaussians."""
    for name, arr in scene.params().items():
        if np.isnan(arr).any():
            raise ValueError(f"NaN in Gaussian parameter {name!r}")
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    P = _project(scene, cam)
    vis = np.nonzero(P["visible"])[0]
    order = vis[np.argsort(P["z"][vis], kind="stable")].astype(np.int64)
    qa, qb, qc = (np.ascontiguousarray(P["conic"][:, i]) for i in range(3))
    col = np.ascontiguousarray(scene.rgb, dtype=np.float64)
    nrm = np.ascontiguousarray(P["normal"])
    n_tx = (W + TILE - 1) // TILE
    n_ty = (H + TILE - 1) // TILE
    ctx = dict(scene=scene, cam=cam, proj=P, order=order, bg=bg, n_tx=n_tx)
    if USE_NUMBA:
        offsets, lists = _bin_tiles(order, P["u"], P["v"], P["rad"], n_tx, n_ty, TILE)
        out = _composite_numba(H, W, TILE, n_tx, offsets, lists, P["u"], P["v"], qa, qb, qc, P["opacity"], col, P["z"], nrm, bg)
        ctx.update(offsets=offsets, lists=lists)
    else:
        out = _composite_numpy(H, W, order, P["u"], P["v"], qa, qb, qc, P["opacity"], col, P["z"], nrm, bg)
    color, sz, sw, nr, T_out, last, wsum = out
    fg = sw > 0
    depth = np.full((H, W), np.inf)
    depth[fg] = sz[fg] / sw[fg]
    nlen = np.linalg.norm(nr, axis=2)
    has_n = nlen > 0
    normal = np.zeros((H, W, 3))
    normal[has_n] = nr[has_n] / nlen[has_n, None]
    ctx.update(qa=qa, qb=qb, qc=qc, col=col, nrm=nrm, T_out=T_out, last=last, sw=sw, nr=nr, nlen=nlen, depth=depth, normal=normal)
    return GaussianRender(depth=depth, normal=normal, color=color, alpha=1.0 - T_out, weight_sum=wsum, _ctx=ctx)


def _render_backward(ctx, grad_depth, grad_normal, grad_color) -> dict[str, np.ndarray]:
    scene, cam, P = ctx["scene"], ctx["cam"], ctx["proj"]
    H, W = cam.height, cam.width
    gC = np.zeros((H, W, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gD = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    gN = np.zeros((H, W, 3)) if grad_normal is None else np.asarray(grad_normal, dtype=np.float64)
    sw = ctx["sw"]
    fg = sw > 0
    gDn = np.where(fg, np.where(fg, gD, 0.0) / np.where(fg, sw, 1.0), 0.0)
    D = np.where(fg, ctx["depth"], 0.0)
    N, nlen = ctx["normal"], ctx["nlen"]
    has_n = nlen > 0
    gNr = np.zeros((H, W, 3))
    proj_g = gN - N * np.sum(N * gN, axis=2, keepdims=True)
    gNr[has_n] = proj_g[has_n] / nlen[has_n, None]
    args = (P["u"], P["v"], ctx["qa"], ctx["qb"], ctx["qc"], P["opacity"], ctx["col"], P["z"], ctx["nrm"], ctx["bg"])
    if USE_NUMBA:
        res = _composite_backward_numba(
            H, W, TILE, ctx["n_tx"], ctx["offsets"], ctx["lists"], *args, ctx["T_out"], ctx["last"], gC, gDn, D, gNr
        )
    else:
        res = _composite_backward_numpy(H, W, ctx["order"], *args, ctx["T_out"], gC, gDn, D, gNr)
    g_u, g_v, g_qa, g_qb, g_qc, g_op, g_col, g_z, g_n = res
    g = dict(u=g_u, v=g_v, qa=g_qa, qb=g_qb, qc=g_qc, opacity=g_op, rgb=g_col, z=g_z, n=g_n)
    return _project_backward(scene, cam, P, g)
