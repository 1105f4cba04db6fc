"""Z-buffered triangle rasterization with depth/normal gradients to vertices.

Depth at a pixel is the camera z where the pixel ray meets the winning
triangle's plane, ``z = det(V0, V1, V2) / (n . d)`` with ``n`` the unnormalized
face normal and ``d`` the ray direction scaled to unit z. This is exactly the
perspective-correct interpolation of vertex depths. Visibility is hard: only
the z-buffer winner receives gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .._jit import USE_NUMBA, njit
from ..meshing import ExtractedMesh
from ..scene import Camera
from .splat import NEAR, RenderBuffers

BINOMIAL_3x3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass
class MeshRender(RenderBuffers):
    face_id: np.ndarray = None  # (H, W) winning face, -1 on background
    _ctx: dict = field(default=None, repr=False)

    def backward(self, grad_depth=None, grad_normal=None) -> np.ndarray:
        """dL/dvertices (V, 3) in world coordinates."""
        return _raster_backward(self._ctx, grad_depth, grad_normal)


@njit
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit
def _owns_edge(ax, ay, bx, by):
    # top-left rule for this orientation (image y points down)
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


@njit
def _raster_numba(vc, faces, fx, fy, cx, cy, H, W):
    depth = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if vc[i0, 2] <= NEAR or vc[i1, 2] <= NEAR or vc[i2, 2] <= NEAR:
            continue
        xs = np.empty(3)
        ys = np.empty(3)
        for k in range(3):
            vi = faces[f, k]
            xs[k] = fx * vc[vi, 0] / vc[vi, 2] + cx
            ys[k] = fy * vc[vi, 1] / vc[vi, 2] + cy
        area = _edge(xs[0], ys[0], xs[1], ys[1], xs[2], ys[2])
        if area == 0.0:
            continue
        a, b, c = 0, 1, 2
        if area < 0:
            b, c = 2, 1
        x0 = max(0, int(np.floor(min(xs[0], min(xs[1], xs[2])) - 0.5)))
        x1 = min(W - 1, int(np.ceil(max(xs[0], max(xs[1], xs[2])) - 0.5)))
        y0 = max(0, int(np.floor(min(ys[0], min(ys[1], ys[2])) - 0.5)))
        y1 = min(H - 1, int(np.ceil(max(ys[0], max(ys[1], ys[2])) - 0.5)))
        if x0 > x1 or y0 > y1:
            continue
        # plane of the triangle in camera space
        e1 = vc[i1] - vc[i0]
        e2 = vc[i2] - vc[i0]
        n0 = e1[1] * e2[2] - e1[2] * e2[1]
        n1 = e1[2] * e2[0] - e1[0] * e2[2]
        n2 = e1[0] * e2[1] - e1[1] * e2[0]
        num = n0 * vc[i0, 0] + n1 * vc[i0, 1] + n2 * vc[i0, 2]
        own_ab = _owns_edge(xs[a], ys[a], xs[b], ys[b])
        own_bc = _owns_edge(xs[b], ys[b], xs[c], ys[c])
        own_ca = _owns_edge(xs[c], ys[c], xs[a], ys[a])
        for py in range(y0, y1 + 1):
            qy = py + 0.5
            for px in range(x0, x1 + 1):
                qx = px + 0.5
                w0 = _edge(xs[a], ys[a], xs[b], ys[b], qx, qy)
                w1 = _edge(xs[b], ys[b], xs[c], ys[c], qx, qy)
                w2 = _edge(xs[c], ys[c], xs[a], ys[a], qx, qy)
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                if (w0 == 0 and not own_ab) or (w1 == 0 and not own_bc) or (w2 == 0 and not own_ca):
                    continue
                dxr = (qx - cx) / fx
                dyr = (qy - cy) / fy
                den = n0 * dxr + n1 * dyr + n2
                if den == 0.0:
                    continue
                z = num / den
                if z > NEAR and z < depth[py, px]:
                    depth[py, px] = z
                    fid[py, px] = f
    return depth, fid


def _raster_numpy(vc, faces, fx, fy, cx, cy, H, W):
    depth = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    for f, (i0, i1, i2) in enumerate(faces):
        V = vc[[i0, i1, i2]]
        if np.any(V[:, 2] <= NEAR):
            continue
        xs = fx * V[:, 0] / V[:, 2] + cx
        ys = fy * V[:, 1] / V[:, 2] + cy
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (ys[1] - ys[0]) * (xs[2] - xs[0])
        if area == 0.0:
            continue
        idx = [0, 1, 2] if area > 0 else [0, 2, 1]
        xs, ys = xs[idx], ys[idx]
        x0 = max(0, int(np.floor(xs.min() - 0.5)))
        x1 = min(W - 1, int(np.ceil(xs.max() - 0.5)))
        y0 = max(0, int(np.floor(ys.min() - 0.5)))
        y1 = min(H - 1, int(np.ceil(ys.max() - 0.5)))
        if x0 > x1 or y0 > y1:
            continue
        qx, qy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        ok = np.ones(qx.shape, dtype=bool)
        for k in range(3):
            ax, ay, bx, by = xs[k], ys[k], xs[(k + 1) % 3], ys[(k + 1) % 3]
            e = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            own = (by - ay) < 0 or ((by - ay) == 0 and (bx - ax) > 0)
            ok &= (e > 0) | ((e == 0) & own)
        n = np.cross(V[1] - V[0], V[2] - V[0])
        num = n @ V[0]
        den = n[0] * (qx - cx) / fx + n[1] * (qy - cy) / fy + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = num / den
        ok &= (den != 0) & (z > NEAR)
        sub_d = depth[y0 : y1 + 1, x0 : x1 + 1]
        sub_f = fid[y0 : y1 + 1, x0 : x1 + 1]
        win = ok & (z < sub_d)
        sub_d[win] = z[win]
        sub_f[win] = f
    return depth, fid


def rasterize_mesh(mesh: ExtractedMesh, cam: Camera) -> MeshRender:
    """Depth and face-normal maps of a triangle mesh (camera frame)."""
    H, W = cam.height, cam.width
    if mesh.n_faces == 0:
        return MeshRender(
            depth=np.full((H, W), np.inf), normal=np.zeros((H, W, 3)), color=None, alpha=np.zeros((H, W)),
            face_id=np.full((H, W), -1, dtype=np.int64), _ctx=dict(mesh=mesh, cam=cam, fid=np.full((H, W), -1)),
        )
    vc = np.ascontiguousarray(cam.to_camera(mesh.vertices))
    faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    kern = _raster_numba if USE_NUMBA else _raster_numpy
    depth, fid = kern(vc, faces, cam.fx, cam.fy, cam.cx, cam.cy, H, W)
    fg = fid >= 0
    rays = cam.ray_dirs()
    fn = np.cross(vc[faces[:, 1]] - vc[faces[:, 0]], vc[faces[:, 2]] - vc[faces[:, 0]])
    fn_len = np.linalg.norm(fn, axis=1)
    normal = np.zeros((H, W, 3))
    sgn = np.zeros((H, W))
    if fg.any():
        f = fid[fg]
        nh = fn[f] / fn_len[f, None]
        s = np.where(np.einsum("ij,ij->i", nh, rays[fg]) > 0, -1.0, 1.0)
        normal[fg] = nh * s[:, None]
        sgn[fg] = s
    ctx = dict(mesh=mesh, cam=cam, vc=vc, fid=fid, depth=depth, sgn=sgn, rays=rays)
    return MeshRender(depth=depth, normal=normal, color=None, alpha=fg.astype(np.float64), face_id=fid, _ctx=ctx)


def _raster_backward(ctx, grad_depth, grad_normal) -> np.ndarray:
    mesh, cam = ctx["mesh"], ctx["cam"]
    out = np.zeros((mesh.n_vertices, 3))
    fid = ctx["fid"]
    fg = fid >= 0
    if not fg.any():
        return out
    vc = ctx["vc"]
    f = fid[fg]
    tri = mesh.faces[f]
    V0, V1, V2 = vc[tri[:, 0]], vc[tri[:, 1]], vc[tri[:, 2]]
    d = ctx["rays"][fg]
    z = ctx["depth"][fg]
    e1, e2 = V1 - V0, V2 - V0
    n = np.cross(e1, e2)
    den = np.einsum("ij,ij->i", n, d)
    gV = np.zeros((len(f), 3, 3))
    if grad_depth is not None:
        gz = np.asarray(grad_depth, dtype=np.float64)[fg]
        coef = (gz / den)[:, None]
        gV[:, 0] += coef * (np.cross(V1, V2) - z[:, None] * np.cross(V1 - V2, d))
        gV[:, 1] += coef * (np.cross(V2, V0) - z[:, None] * np.cross(V2 - V0, d))
        gV[:, 2] += coef * (np.cross(V0, V1) - z[:, None] * np.cross(V0 - V1, d))
    if grad_normal is not None:
        gN = np.asarray(grad_normal, dtype=np.float64)[fg]
        nl = np.linalg.norm(n, axis=1, keepdims=True)
        nh = n / nl
        s = ctx["sgn"][fg][:, None]
        gn = s * (gN - nh * np.sum(nh * gN, axis=1, keepdims=True)) / nl
        ge1 = np.cross(e2, gn)
        ge2 = np.cross(gn, e1)
        gV[:, 1] += ge1
        gV[:, 2] += ge2
        gV[:, 0] -= ge1 + ge2
    flat_idx = tri.reshape(-1)
    flat_g = gV.reshape(-1, 3)
    for c in range(3):
        out[:, c] = np.bincount(flat_idx, flat_g[:, c], minlength=mesh.n_vertices)
    return out @ cam.R


# ---------------------------------------------------------------- antialias


def antialias_depth(depth: np.ndarray):
    """Masked, renormalized 3x3 binomial blur of the foreground depth.

    Returns the blurred map and a closure mapping dL/d(blurred) to dL/d(depth).
    Background stays +inf and takes no part in the average.
    """
    fg = np.isfinite(depth)
    m = fg.astype(np.float64)
    dz = np.where(fg, depth, 0.0)
    num = correlate(dz, BINOMIAL_3x3, mode="constant")
    den = correlate(m, BINOMIAL_3x3, mode="constant")
    out = np.full(depth.shape, np.inf)
    out[fg] = num[fg] / den[fg]

    def backward(grad):
        g = np.where(fg, np.asarray(grad, dtype=np.float64), 0.0)
        g = np.where(fg, g / np.where(fg, den, 1.0), 0.0)
        # adjoint of correlation with a symmetric kernel is the same correlation
        return m * correlate(g, BINOMIAL_3x3, mode="constant")

    return out, backward
