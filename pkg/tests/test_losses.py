import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import fd_cases
from meshsplat.losses import (
    LossBreakdown,
    LossWeights,
    MeshContext,
    OccupancyLabels,
    combine,
    compute_occupancy,
    init_sdf,
    loss_erosion,
    loss_interior,
    loss_interior_values,
    loss_mesh_depth,
    loss_mesh_normal,
    loss_normal_consistency,
    loss_photometric,
    ssim,
    total_loss,
)
from meshsplat.delaunay import triangulate
from meshsplat.meshing import ExtractedMesh, empty_mesh, interior_components, marching_tetrahedra, sphere_mesh
from meshsplat.pivots import sample_pivots
from meshsplat.render import rasterize_mesh
from meshsplat.scene import GaussianScene, look_at, make_synthetic_scene


def unit_field(rng, shape, p_bg=0.2):
    return fd_cases._unit_field(rng, shape, p_bg)


# ---------------------------------------------------------------- photometric


def test_photometric_perfect_fit_is_zero(rng):
    img = rng.random((16, 16, 3))
    value, grad, parts = loss_photometric(img, img, 0.2)
    assert value == pytest.approx(0.0, abs=1e-15)
    assert parts["l1"] == 0.0


def test_photometric_pure_l1_extreme():
    value, _, parts = loss_photometric(np.zeros((8, 8, 3)), np.ones((8, 8, 3)), 0.0)
    assert value == 1.0 and parts["l1"] == 1.0


def ssim_loop_oracle(x, y):
    """Windowed SSIM evaluated pixel by pixel with explicit zero padding."""
    k = np.arange(11) - 5
    g = np.exp(-(k**2) / (2 * 1.5**2))
    g /= g.sum()
    H, W, C = x.shape
    total = 0.0
    for c in range(C):
        for i in range(H):
            for j in range(W):
                mx = my = exx = eyy = exy = 0.0
                for a in range(11):
                    for b in range(11):
                        ii, jj = i + k[a], j + k[b]
                        if 0 <= ii < H and 0 <= jj < W:
                            w = g[a] * g[b]
                            xv, yv = x[ii, jj, c], y[ii, jj, c]
                            mx += w * xv
                            my += w * yv
                            exx += w * xv * xv
                            eyy += w * yv * yv
                            exy += w * xv * yv
                vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
                c1, c2 = 0.01**2, 0.03**2
                total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (H * W * C)


def test_ssim_matches_loop_oracle(rng):
    x, y = rng.random((12, 10, 2)), rng.random((12, 10, 2))
    assert ssim(x, y)[0] == pytest.approx(ssim_loop_oracle(x, y), abs=1e-12)
    assert ssim(x, x)[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_photometric_gradient_matches_finite_differences(seed):
    assert fd_cases.photometric_case(seed) < 1e-4


def test_photometric_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        loss_photometric(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 0.2)


# ---------------------------------------------------------------- normal terms


def normal_loop_oracle(N, M):
    total, count = 0.0, 0
    for idx in np.ndindex(N.shape[:2]):
        n, m = N[idx], M[idx]
        if np.any(n != 0) and np.any(m != 0):
            total += 1.0 - float(n[0] * m[0] + n[1] * m[1] + n[2] * m[2])
            count += 1
    return total / count if count else 0.0


@pytest.mark.parametrize("fn", [loss_normal_consistency, loss_mesh_normal])
def test_normal_loss_examples(fn, rng):
    N = unit_field(rng, (8, 8), 0.0)
    assert fn(N, N)[0] == pytest.approx(0.0, abs=1e-15)
    assert fn(N, -N)[0] == pytest.approx(2.0, abs=1e-15)
    # an orthogonal field: cross with a non-parallel vector
    ortho = np.cross(N, N[..., [1, 2, 0]] + [0.3, -0.2, 0.1])
    ortho /= np.linalg.norm(ortho, axis=-1, keepdims=True)
    assert fn(N, ortho)[0] == pytest.approx(1.0, abs=1e-14)


@given(st.integers(0, 2**31 - 1))
def test_normal_losses_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    N, M = unit_field(rng, (6, 7)), unit_field(rng, (6, 7))
    assert abs(loss_normal_consistency(N, M)[0] - normal_loop_oracle(N, M)) < 1e-12
    assert abs(loss_mesh_normal(N, M)[0] - normal_loop_oracle(N, M)) < 1e-12


def test_background_pixels_contribute_nothing():
    N = np.zeros((4, 4, 3))
    assert loss_normal_consistency(N, N)[0] == 0.0
    N[0, 0] = (0, 0, -1)
    M = np.zeros((4, 4, 3))
    M[0, 0] = (0, 0, 1)
    M[1, 1] = (0, 0, 1)
    assert loss_mesh_normal(N, M)[0] == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_normal_gradients_match_finite_differences(seed):
    assert fd_cases.normal_case(seed) < 1e-6
    assert fd_cases.mesh_normal_case(seed) < 1e-6


# ---------------------------------------------------------------- mesh depth


def depth_loop_oracle(D, DM, cap):
    total, count = 0.0, 0
    for idx in np.ndindex(D.shape):
        a, b = np.isfinite(D[idx]), np.isfinite(DM[idx])
        if a and b:
            total += math.log(1.0 + abs(D[idx] - DM[idx]))
        elif a or b:
            total += math.log(1.0 + cap)
        count += a or b
    return total / count if count else 0.0


def test_mesh_depth_examples():
    D = np.full((4, 4), np.inf)
    assert loss_mesh_depth(D, D, 2.0)[0] == 0.0
    D[1, 2] = 2.0
    DM = D.copy()
    assert loss_mesh_depth(D, DM, 2.0)[0] == 0.0
    DM[1, 2] = 2.0 + (math.e - 1.0)
    assert loss_mesh_depth(D, DM, 2.0)[0] == pytest.approx(1.0, abs=1e-15)


def test_mesh_depth_caps_one_sided_pixels():
    D = np.full((2, 2), np.inf)
    DM = D.copy()
    D[0, 0] = 1.0
    assert loss_mesh_depth(D, DM, 3.0)[0] == pytest.approx(math.log(4.0))


@given(st.integers(0, 2**31 - 1))
def test_mesh_depth_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    D, DM = 1 + rng.random((6, 5)) * 3, 1 + rng.random((6, 5)) * 3
    D[rng.random(D.shape) < 0.2] = np.inf
    DM[rng.random(D.shape) < 0.2] = np.inf
    assert abs(loss_mesh_depth(D, DM, 2.5)[0] - depth_loop_oracle(D, DM, 2.5)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_mesh_depth_gradient_matches_finite_differences(seed):
    assert fd_cases.mesh_depth_case(seed) < 1e-6


# ---------------------------------------------------------------- erosion


def scene_with_centers(values):
    sc = GaussianScene.empty(len(values))
    sc.sdf_pre[:, 0] = np.arctanh(values)
    return sc


def test_erosion_examples():
    assert loss_erosion(scene_with_centers([-0.5, -0.1, -0.9]), [0, 1, 2])[0] == 0.0
    value, _ = loss_erosion(scene_with_centers([-0.5, 0.2, 0.0]), [0, 1, 2])
    assert value == pytest.approx(0.2 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        loss_erosion(scene_with_centers([0.1]), [])


@given(st.integers(0, 2**31 - 1))
def test_erosion_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    sc = GaussianScene.empty(10)
    sc.sdf_pre[:] = rng.normal(size=(10, 9))
    sel = np.sort(rng.choice(10, 6, replace=False))
    value, grad = loss_erosion(sc, sel)
    f = [math.tanh(sc.sdf_pre[g, 0]) for g in sel]
    assert abs(value - sum(max(0.0, x) for x in f) / 6) < 1e-12
    expect = np.zeros((10, 9))
    for g, x in zip(sel, f):
        expect[g, 0] = (1 - x * x) / 6 if x > 0 else 0.0
    assert np.allclose(grad, expect, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_erosion_gradient_matches_finite_differences(seed):
    assert fd_cases.erosion_case(seed) < 1e-6


# ---------------------------------------------------------------- interior


def test_interior_examples():
    assert loss_interior_values([3.0, -2.0], [0, 0])[0] == 0.0
    assert loss_interior_values([-10.0], [1])[0] == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert loss_interior_values([-10.0], [1])[0] == pytest.approx(4.54e-5, rel=1e-3)
    assert loss_interior_values([0.0], [1])[0] == pytest.approx(math.log(2.0), rel=1e-15)
    with pytest.raises(ValueError):
        loss_interior_values([0.0, 1.0], [1])


@given(st.floats(-30, 30), st.floats(0.01, 5))
def test_interior_is_monotone_with_sigmoid_gradient(f, step):
    a, ga = loss_interior_values([f, 2.0], [1, 1])
    b, _ = loss_interior_values([f - step, 2.0], [1, 1])
    assert b <= a
    assert ga[0] == pytest.approx(1.0 / (1.0 + math.exp(-f)) / 2, rel=1e-12)


def test_interior_on_pivot_sites_routes_to_sdf_pre():
    sc = GaussianScene.empty(2)
    sc.sdf_pre[:] = np.linspace(-1, 1, 18).reshape(2, 9)
    pv = sample_pivots(sc, [1])
    o = np.zeros(9, dtype=np.uint8)
    o[3] = 1
    value, grad = loss_interior(sc, pv, OccupancyLabels(o))
    f = math.tanh(sc.sdf_pre[1, 3])
    assert value == pytest.approx(math.log1p(math.exp(f)))
    assert np.count_nonzero(grad) == 1
    assert grad[1, 3] == pytest.approx((1 - f * f) / (1 + math.exp(-f)))
    with pytest.raises(ValueError):
        loss_interior(sc, pv, OccupancyLabels(np.zeros(3, dtype=np.uint8)))


@pytest.mark.parametrize("seed", range(5))
def test_interior_gradient_matches_finite_differences(seed):
    assert fd_cases.interior_case(seed) < 1e-6


def test_interior_descent_removes_a_planted_pocket():
    # an empty pocket around r = 0.4 inside the unit sphere extracts as an interior shell
    sites = np.random.default_rng(0).uniform(-1.5, 1.5, (3000, 3))
    tets = triangulate(sites, seed=0).tets
    r = np.linalg.norm(sites, axis=1)
    f = np.maximum(r - 1.0, 0.15 - np.abs(r - 0.4))
    before = interior_components(marching_tetrahedra(tets, sites, f))
    assert before.n_interior >= 1
    o = (r < 1.0).astype(np.uint8)
    for _ in range(50):
        _, g = loss_interior_values(f, o)
        f = f - 0.5 * len(f) * g
    after = interior_components(marching_tetrahedra(tets, sites, f))
    assert (after.n_components, after.n_interior) == (1, 0)


# ---------------------------------------------------------------- occupancy


def convex_inside(mesh, p):
    """Largest signed face-plane distance of ``p`` for an outward convex mesh (< 0 inside)."""
    n = mesh.face_normals()
    v0 = mesh.vertices[mesh.faces[:, 0]]
    return np.max(np.einsum("pfk,fk->pf", p[:, None, :] - v0[None], n), axis=1)


def cube_mesh(h=1.0):
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    m = ExtractedMesh(v, np.array(faces))
    # make every face point outward
    ctr = m.vertices[m.faces].mean(axis=1)
    flip = np.sum(m.face_normals() * ctr, axis=1) < 0
    m.faces[flip] = m.faces[flip][:, ::-1]
    return m


def test_site_in_front_of_a_wall_is_outside():
    wall = ExtractedMesh(np.array([[-2, -2, 0], [2, -2, 0], [2, 2, 0], [-2, 2, 0]], dtype=float), np.array([[0, 1, 2], [0, 2, 3]]))
    cams = [look_at([x, y, -4], [0, 0, 0], 32, 32) for x, y in [(0, 0), (1, 0), (0, 1), (-1, -1)]]
    occ = compute_occupancy(wall, cams, np.array([[0.0, 0.0, -1.0], [0.3, -0.2, -0.5]]), bbox_diag=4.0)
    assert occ.o.tolist() == [0, 0]


def test_cube_center_is_inside():
    cams = [look_at(4 * s * e, [0, 0, 0], 32, 32) for e in np.eye(3) for s in (1, -1)]
    cube = cube_mesh()
    sites = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.5, -0.4, 0.2]])
    assert (convex_inside(cube, sites) < 0).tolist() == [True, False, True]
    occ = compute_occupancy(cube, cams, sites, bbox_diag=np.sqrt(12))
    assert occ.o.tolist() == [1, 0, 1]


def test_occupancy_agrees_with_point_in_mesh_oracle():
    mesh = sphere_mesh(1.0, 4)
    ring = [look_at([4 * np.cos(t), 4 * np.sin(t), 1.5 * np.sin(3 * t)], [0, 0, 0], 64, 64) for t in np.linspace(0, 2 * np.pi, 16, endpoint=False)]
    sites = np.random.default_rng(0).uniform(-1.5, 1.5, (1000, 3))
    diag = 2 * np.sqrt(3)
    occ = compute_occupancy(mesh, ring, sites, bbox_diag=diag)
    s = convex_inside(mesh, sites)
    keep = np.abs(s) > 2 * 1e-4 * diag
    agree = np.mean(occ.o[keep] == (s[keep] < 0))
    assert agree >= 0.98


def test_occupancy_of_empty_mesh_and_errors():
    cams = [look_at([0, 0, -4], [0, 0, 0], 16, 16)]
    assert compute_occupancy(empty_mesh(), cams, np.zeros((5, 3)), 1.0).o.tolist() == [0] * 5
    with pytest.raises(ValueError):
        compute_occupancy(sphere_mesh(), [], np.zeros((5, 3)), 1.0)


# ---------------------------------------------------------------- SDF initialization


def _stub_renderer(offset, alpha=1.0):
    """Depth at every pixel = camera z of the single site + ``offset``."""

    def render(scene, cam, background):
        z = cam.to_camera(scene.mu[:1])[0, 2]
        return SimpleNamespace(depth=np.full(cam.shape, z + offset), alpha=np.full(cam.shape, alpha))

    return render


def _center_only(mu):
    sc = GaussianScene.empty(1)
    sc.mu[0] = mu
    return sc, sample_pivots(sc)


CAMS = [look_at([4 * np.cos(t), 4 * np.sin(t), 0.5], [0, 0, 0], 16, 16) for t in np.linspace(0, 2 * np.pi, 5, endpoint=False)]


def test_site_on_rendered_surface_gets_zero():
    sc, pv = _center_only([0.1, -0.2, 0.05])
    f = np.tanh(init_sdf(sc, pv, CAMS, 0.2, renderer=_stub_renderer(0.0)))
    assert abs(f[0]) < 1e-3


def test_site_far_behind_surface_is_clamped_inside():
    sc, pv = _center_only([0.1, -0.2, 0.05])
    f = np.tanh(init_sdf(sc, pv, CAMS, 0.2, renderer=_stub_renderer(-0.5)))
    assert f[0] == pytest.approx(-(1 - 1e-6), abs=1e-12)


def test_background_and_unseen_sites_are_outside():
    sc, pv = _center_only([0.0, 0.0, 0.0])
    f = np.tanh(init_sdf(sc, pv, CAMS, 0.2, renderer=_stub_renderer(np.inf)))
    assert f[0] == pytest.approx(1 - 1e-6, abs=1e-12)
    behind = [look_at([4, 0, 0], [8, 0, 0], 16, 16), look_at([0, 4, 0], [0, 8, 0], 16, 16)]
    f = np.tanh(init_sdf(sc, pv, behind, 0.2, renderer=_stub_renderer(0.0)))
    assert f[0] == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        init_sdf(sc, pv, CAMS[:1], 0.2)


def _shell_sites(tau, n=3000, seed=0):
    # sites spread uniformly over the band |r - 1| < tau around the unit sphere
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return SimpleNamespace(sites=d * (1 + rng.uniform(-tau, tau, n))[:, None])


def _mesh_depth_renderer(mesh):
    def render(scene, cam, background):
        r = rasterize_mesh(mesh, cam)
        return SimpleNamespace(depth=r.depth, alpha=np.isfinite(r.depth).astype(float))

    return render


@pytest.mark.parametrize("renderer", ["exact", "gaussians"])
def test_init_sdf_sign_agrees_with_analytic_sphere(renderer):
    # coarse splats bias center depth toward the camera, so the Gaussian case uses a dense scene
    data, sc = make_synthetic_scene("sphere r=1", 3000, 16, 0, resolution=64, n_gt_samples=100)
    tau = data.truncation
    pv = _shell_sites(tau)
    kw = {"renderer": _mesh_depth_renderer(sphere_mesh(1.0, 5))} if renderer == "exact" else {}
    f = np.tanh(init_sdf(sc, pv, data.cameras, tau, background=data.background, **kw))
    a = data.sdf_oracle(pv.sites)
    keep = np.abs(a) > 0.1 * tau
    agree = np.mean(np.sign(f[keep]) == np.sign(a[keep]))
    assert agree >= (0.99 if renderer == "exact" else 0.9)


# ---------------------------------------------------------------- totals


def test_combine_uses_the_published_weights():
    w = LossWeights()
    assert (w.lambda_rgb, w.lambda_n, w.lambda_md, w.lambda_mn, w.lambda_erosion, w.lambda_interior) == (0.2, 0.05, 0.05, 0.05, 0.005, 0.005)
    ones = {k: 1.0 for k in ("l1", "dssim", "normal", "mesh_depth", "mesh_normal", "erosion", "interior")}
    assert combine(ones, w) == pytest.approx(0.8 + 0.2 + 3 * 0.05 + 2 * 0.005, abs=1e-15)
    assert combine({}, w) == 0.0
    assert combine({k: 0.0 for k in ones}, w) == 0.0


@pytest.mark.parametrize("kwargs", [dict(lambda_rgb=1.5), dict(lambda_n=-0.1), dict(lambda_interior=float("nan"))])
def test_weight_validation(kwargs):
    with pytest.raises(ValueError):
        LossWeights(**kwargs)


def test_breakdown_columns_cover_the_fields():
    assert LossBreakdown.COLUMNS[-1] == "total"
    assert len(LossBreakdown().as_row()) == len(LossBreakdown.COLUMNS)


def test_total_loss_reports_components():
    data, sc = make_synthetic_scene("sphere r=1", 30, 4, 0, resolution=16, n_gt_samples=100)
    sc.sdf_pre[:] = np.arctanh(0.5 * np.tanh(3 * data.sdf_oracle(sc.mu)))[:, None]
    pv = sample_pivots(sc)
    from meshsplat.delaunay import triangulate

    ctx = MeshContext(pv, triangulate(pv.sites).tets, OccupancyLabels(np.ones(len(pv), dtype=np.uint8)), d_cap=data.bbox_diag)
    w = LossWeights()
    lb, grads = total_loss(sc, data.cameras[0], data.images[0], w, mesh_ctx=ctx)
    parts = {k: getattr(lb, k) for k in LossBreakdown.COLUMNS}
    assert lb.total == pytest.approx(combine(parts, w), abs=1e-15)
    assert all(v >= 0 for v in parts.values())
    assert ctx.mesh is not None and set(grads) == set(sc.params())


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradient_matches_finite_differences(seed):
    err = fd_cases.end_to_end_case(seed)
    assert err is None or err < 1e-3
