"""Normals from a depth map by finite differences of back-projected points."""
from __future__ import annotations

import numpy as np

from ..scene import Camera


def _pairs(valid: np.ndarray, axis: int):
    """Index offsets (lo, hi) along ``axis`` for each pixel: forward if possible, else backward."""
    H, W = valid.shape
    n = valid.shape[axis]
    fwd = np.zeros_like(valid)
    bwd = np.zeros_like(valid)
    if axis == 1:
        fwd[:, : n - 1] = valid[:, : n - 1] & valid[:, 1:]
        bwd[:, 1:] = valid[:, 1:] & valid[:, : n - 1]
    else:
        fwd[: n - 1] = valid[: n - 1] & valid[1:]
        bwd[1:] = valid[1:] & valid[: n - 1]
    lo = np.where(fwd, 0, -1)
    hi = np.where(fwd, 1, 0)
    ok = fwd | bwd
    return lo, hi, ok


def depth_to_normal(depth: np.ndarray, cam: Camera):
    """Camera-frame unit normals of the depth surface, flipped toward the camera.

    Uses forward differences along +x and +y, falling back to backward
    differences where the forward neighbour is missing or background. Pixels
    with neither get a zero normal. Returns ``(normals, backward)`` where
    ``backward(dL/dN)`` gives dL/d(depth).
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    valid = np.isfinite(depth)
    rays = cam.ray_dirs()
    P = np.where(valid[..., None], depth[..., None] * rays, 0.0)
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    lo_x, hi_x, ok_x = _pairs(valid, 1)
    lo_y, hi_y, ok_y = _pairs(valid, 0)
    ok = valid & ok_x & ok_y
    ax = (ii, np.clip(jj + lo_x, 0, W - 1))
    bx = (ii, np.clip(jj + hi_x, 0, W - 1))
    ay = (np.clip(ii + lo_y, 0, H - 1), jj)
    by = (np.clip(ii + hi_y, 0, H - 1), jj)
    dx = P[bx] - P[ax]
    dy = P[by] - P[ay]
    c = np.cross(dx, dy)
    clen = np.linalg.norm(c, axis=2)
    ok &= clen > 0
    sgn = np.where(np.sum(c * rays, axis=2) > 0, -1.0, 1.0)
    N = np.zeros((H, W, 3))
    N[ok] = (c[ok] / clen[ok, None]) * sgn[ok, None]

    def backward(grad):
        g = np.where(ok[..., None], np.asarray(grad, dtype=np.float64), 0.0)
        safe = np.where(ok, clen, 1.0)[..., None]
        nh = np.where(ok[..., None], c / safe, 0.0)
        gc = sgn[..., None] * (g - nh * np.sum(nh * g, axis=2, keepdims=True)) / safe
        gdx = np.cross(dy, gc)
        gdy = np.cross(gc, dx)
        gP = np.zeros((H, W, 3))
        for (src, sign, gd) in ((bx, 1.0, gdx), (ax, -1.0, gdx), (by, 1.0, gdy), (ay, -1.0, gdy)):
            np.add.at(gP, (src[0].ravel(), src[1].ravel()), (sign * gd).reshape(-1, 3))
        return np.where(valid, np.sum(gP * rays, axis=2), 0.0)

    return N, backward
