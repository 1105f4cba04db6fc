"""Mesh-in-the-loop Gaussian splatting surface reconstruction at desk scale.

Gaussians are fitted to images of an analytic scene; each Gaussian spawns nine
Delaunay sites carrying learnable SDF values, and a marching-tetrahedra mesh
extracted at every iteration feeds depth and normal losses back into both the
Gaussians and the SDF values.
"""
from .delaunay import Tetrahedralization, triangulate, verify_delaunay
from .eval import chamfer, evaluate, f1_score, fit_color_field, mesh_nvs_psnr, positive_center_fraction
from .losses import LossWeights, init_sdf, total_loss
from .meshing import ExtractedMesh, export_mesh, interior_components, load_mesh, marching_tetrahedra, mt_gradients
from .optim import TrainConfig, TrainResult, train
from .pivots import PivotSet, compute_importance, sample_pivots, select_pivot_gaussians
from .render import rasterize_mesh, render_gaussians
from .scene import Camera, GaussianScene, SyntheticScene, load_scene, make_synthetic_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ExtractedMesh",
    "GaussianScene",
    "LossWeights",
    "PivotSet",
    "SyntheticScene",
    "Tetrahedralization",
    "TrainConfig",
    "TrainResult",
    "chamfer",
    "compute_importance",
    "evaluate",
    "export_mesh",
    "f1_score",
    "fit_color_field",
    "init_sdf",
    "interior_components",
    "load_mesh",
    "load_scene",
    "make_synthetic_scene",
    "marching_tetrahedra",
    "mesh_nvs_psnr",
    "mt_gradients",
    "positive_center_fraction",
    "rasterize_mesh",
    "render_gaussians",
    "sample_pivots",
    "save_scene",
    "select_pivot_gaussians",
    "total_loss",
    "train",
    "triangulate",
    "verify_delaunay",
]
