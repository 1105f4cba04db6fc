"""8-bit PNG dumps of render buffers for debugging.

Normalization:

* depth: finite values mapped linearly from [min, max] to [255, 1] so near is
  bright; background (non-finite) pixels are 0.
* normal: unit vectors encoded as ``(n + 1) / 2``; zero vectors stay black.
* color: values clipped to [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def depth_to_u8(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    out = np.zeros(depth.shape, dtype=np.uint8)
    fin = np.isfinite(depth)
    if not fin.any():
        return out
    lo, hi = depth[fin].min(), depth[fin].max()
    t = (depth[fin] - lo) / (hi - lo) if hi > lo else np.zeros(fin.sum())
    out[fin] = np.round(255.0 - 254.0 * t).astype(np.uint8)
    return out


def normal_to_u8(normal: np.ndarray) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    out = np.round(np.clip((n + 1.0) * 0.5, 0.0, 1.0) * 255.0).astype(np.uint8)
    out[~np.any(n != 0, axis=-1)] = 0
    return out


def color_to_u8(color: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def dump_buffers(render, directory, prefix: str = "view") -> list[Path]:
    """Write ``<prefix>_depth.png``, ``_normal.png`` and (if present) ``_color.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    items = [("depth", depth_to_u8(render.depth)), ("normal", normal_to_u8(render.normal))]
    color = getattr(render, "color", None)
    if color is not None:
        items.append(("color", color_to_u8(color)))
    for name, img in items:
        p = directory / f"{prefix}_{name}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths
