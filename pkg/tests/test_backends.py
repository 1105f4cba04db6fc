"""The numba kernels and their numpy fallbacks must agree."""
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

import fd_cases
from meshsplat import _jit
from meshsplat.delaunay import triangulate
from meshsplat.meshing import marching_tetrahedra, sphere_mesh
from meshsplat.render import rasterize_mesh, render_gaussians
from meshsplat.scene import look_at

pytestmark = pytest.mark.skipif(not _jit.USE_NUMBA, reason="parity needs the numba backend in this process")

# The child computes the same quantities with MESHSPLAT_NUMBA=0 and saves them.
CHILD = textwrap.dedent(
    """
    import sys
    import numpy as np
    sys.path.insert(0, {tests!r})
    import fd_cases
    from meshsplat import _jit
    from meshsplat.delaunay import triangulate
    from meshsplat.meshing import marching_tetrahedra, sphere_mesh
    from meshsplat.render import rasterize_mesh, render_gaussians
    from meshsplat.scene import look_at
    assert _jit.backend() == "numpy"
    out = compute(fd_cases, triangulate, marching_tetrahedra, sphere_mesh, rasterize_mesh, render_gaussians, look_at)
    np.savez(sys.argv[1], **out)
    """
)


def compute(fd_cases, triangulate, marching_tetrahedra, sphere_mesh, rasterize_mesh, render_gaussians, look_at):
    """Everything compared across backends; shared verbatim with the child process."""
    import numpy as np

    out = {}
    cam = look_at([1.0, -0.5, -4.0], [0, 0, 0], 24, 24)
    sc = fd_cases.random_splat_scene(np.random.default_rng(3), 12)
    r = render_gaussians(sc, cam, (0.2, 0.3, 0.4))
    out.update(depth=r.depth, normal=r.normal, color=r.color, alpha=r.alpha)
    fg = np.isfinite(r.depth)
    g = r.backward(np.where(fg, 1.0, 0.0), np.where(fg[..., None], 0.5, 0.0), np.full((24, 24, 3), 0.25))
    out.update({f"grad_{k}": v for k, v in g.items()})
    m = rasterize_mesh(sphere_mesh(1.0, 3), cam)
    out.update(raster_depth=m.depth, raster_face=m.face_id, raster_grad=m.backward(np.where(np.isfinite(m.depth), 1.0, 0.0)))
    sites = np.random.default_rng(4).uniform(-2, 2, (300, 3))
    tets = triangulate(sites, seed=1).tets
    out["tets"] = tets
    mesh = marching_tetrahedra(tets, sites, np.tanh((np.linalg.norm(sites, axis=1) - 1) / 0.3))
    out.update(mt_vertices=mesh.vertices, mt_faces=mesh.faces)
    return out


@pytest.fixture(scope="module")
def both(tmp_path_factory):
    import inspect

    path = tmp_path_factory.mktemp("backend") / "numpy.npz"
    tests = os.path.dirname(os.path.abspath(__file__))
    src = inspect.getsource(compute) + CHILD.format(tests=tests)
    env = dict(os.environ, MESHSPLAT_NUMBA="0")
    r = subprocess.run([sys.executable, "-c", src, str(path)], env=env, capture_output=True, text=True, timeout=600)
    assert r.returncode == 0, r.stderr
    ref = compute(fd_cases, triangulate, marching_tetrahedra, sphere_mesh, rasterize_mesh, render_gaussians, look_at)
    return ref, dict(np.load(path))


def test_backend_flag():
    assert _jit.backend() == "numba"


@pytest.mark.parametrize("key", ["depth", "normal", "color", "alpha"])
def test_gaussian_buffers_agree(both, key):
    a, b = both
    fin = np.isfinite(a[key])
    assert np.array_equal(fin, np.isfinite(b[key]))
    assert np.max(np.abs(a[key][fin] - b[key][fin]), initial=0.0) < 1e-10


@pytest.mark.parametrize("key", ["grad_mu", "grad_quat", "grad_log_scale", "grad_logit_opacity", "grad_rgb"])
def test_gaussian_gradients_agree(both, key):
    a, b = both
    assert np.allclose(a[key], b[key], rtol=1e-9, atol=1e-12)


def test_raster_agrees(both):
    # coverage and face ids are exact; depth differs only by evaluation order
    a, b = both
    assert np.array_equal(a["raster_face"], b["raster_face"])
    fin = np.isfinite(a["raster_depth"])
    assert np.array_equal(fin, np.isfinite(b["raster_depth"]))
    assert np.max(np.abs(a["raster_depth"][fin] - b["raster_depth"][fin])) < 1e-12
    assert np.allclose(a["raster_grad"], b["raster_grad"], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("key", ["tets", "mt_vertices", "mt_faces"])
def test_delaunay_and_extraction_agree(both, key):
    a, b = both
    assert np.array_equal(a[key], b[key])
