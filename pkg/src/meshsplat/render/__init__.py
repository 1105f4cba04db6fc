"""Software renderers for Gaussians and triangle meshes."""
from .normals import depth_to_normal
from .raster import MeshRender, antialias_depth, rasterize_mesh
from .splat import GaussianRender, RenderBuffers, render_gaussians

__all__ = [
    "RenderBuffers",
    "GaussianRender",
    "MeshRender",
    "render_gaussians",
    "rasterize_mesh",
    "antialias_depth",
    "depth_to_normal",
]
