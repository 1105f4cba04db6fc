import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshsplat.scene import (
    HEADER_BYTES,
    RECORD_BYTES,
    Camera,
    GaussianScene,
    SceneFormatError,
    Sphere,
    Torus,
    farthest_point_subset,
    ground_truth_samples,
    load_cameras,
    load_scene,
    look_at,
    make_synthetic_scene,
    parse_shape,
    save_cameras,
    save_scene,
    shape_to_spec,
    trace_shape,
)
from meshsplat.rotation import random_quats


def random_scene(rng, n):
    sc = GaussianScene.empty(n)
    sc.mu[:] = rng.normal(size=(n, 3))
    sc.quat[:] = random_quats(rng, n)
    sc.log_scale[:] = rng.normal(-2, 0.5, (n, 3))
    sc.logit_opacity[:] = rng.normal(size=n)
    sc.rgb[:] = rng.random((n, 3))
    sc.sdf_pre[:] = rng.normal(size=(n, 9))
    return sc


# ---------------------------------------------------------------- constructor


def test_single_gaussian_scene_lies_near_surface():
    data, sc = make_synthetic_scene("sphere r=1", 1, 2, 0, resolution=16, n_gt_samples=100)
    assert len(sc) == 1
    assert abs(data.sdf_oracle(sc.mu)[0]) < 0.05 * 2 * np.sqrt(3)


def test_scene_construction_is_deterministic():
    a_data, a = make_synthetic_scene("sphere r=1", 500, 16, 7, resolution=16, n_gt_samples=1000)
    b_data, b = make_synthetic_scene("sphere r=1", 500, 16, 7, resolution=16, n_gt_samples=1000)
    assert a.to_records().tobytes() == b.to_records().tobytes()
    assert a_data.images.tobytes() == b_data.images.tobytes()
    assert a_data.gt_samples.tobytes() == b_data.gt_samples.tobytes()


def test_torus_centers_within_band():
    data, sc = make_synthetic_scene("torus R=1 r=0.3", 500, 16, 1, resolution=16, n_gt_samples=1000)
    assert np.mean(np.abs(data.sdf_oracle(sc.mu))) < 0.05 * data.bbox_diag


def test_noisy_init_stays_in_band():
    data, sc = make_synthetic_scene("sphere r=1", 200, 4, 3, resolution=16, n_gt_samples=100, noise=0.05)
    assert np.all(np.abs(data.sdf_oracle(sc.mu)) < 0.05 * data.bbox_diag)
    assert np.std(data.sdf_oracle(sc.mu)) > 1e-3


def test_initial_gaussians_are_flat_along_normal():
    data, sc = make_synthetic_scene("sphere r=1", 50, 2, 0, resolution=16, n_gt_samples=100, normal_scale=0.1)
    R = sc.rotations()
    normal_axis = R[:, :, 0]
    assert np.allclose(np.abs(np.sum(normal_axis * data.shape.normal(sc.mu), axis=1)), 1.0, atol=1e-9)
    assert np.allclose(sc.log_scale[:, 0] - sc.log_scale[:, 1], np.log(0.1))
    assert np.allclose(sc.log_scale[:, 1], sc.log_scale[:, 2])
    assert np.allclose(sc.opacity, 0.8)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(shape="cube s=1", n_gaussians=5, n_cameras=2), "unknown shape"),
        (dict(shape="sphere r=1", n_gaussians=5, n_cameras=1), "n_cameras"),
        (dict(shape="sphere r=1", n_gaussians=0, n_cameras=2), "n_gaussians"),
    ],
)
def test_constructor_errors(kwargs, match):
    with pytest.raises(ValueError, match=match):
        make_synthetic_scene(seed=0, resolution=16, **kwargs)


def test_cameras_see_the_centroid():
    data, _ = make_synthetic_scene("torus R=1 r=0.3", 10, 16, 0, resolution=16, n_gt_samples=100)
    lo, hi = data.bbox
    c = 0.5 * (lo + hi)
    assert all(cam.in_frustum(c[None])[0] for cam in data.cameras)


def test_ground_truth_samples_on_surface():
    for spec in ("sphere r=1.5", "torus R=1 r=0.3", "union: sphere r=1 | sphere r=1 c=1.5,0,0"):
        shape = parse_shape(spec)
        p = ground_truth_samples(shape, 0, 2000)
        assert np.max(np.abs(shape.sdf(p))) < 1e-9


def test_torus_samples_are_area_uniform():
    # the outer half (cos theta > 0) carries (pi R + 2 r) / (2 pi R) of the area
    t = Torus(1.0, 0.3)
    p = t.sample_surface(np.random.default_rng(0), 200_000)
    outer = np.hypot(p[:, 0], p[:, 1]) > 1.0
    expected = (np.pi + 2 * 0.3) / (2 * np.pi)
    assert abs(outer.mean() - expected) < 0.005


def test_farthest_point_subset_spreads_points(rng):
    pts = rng.random((500, 3))
    sub = farthest_point_subset(pts, 20)
    rand = pts[:20]
    d = lambda q: np.min(np.linalg.norm(q[:, None] - q[None], axis=2) + np.eye(len(q)) * 9, axis=1).min()
    assert d(sub) > d(rand)
    assert np.array_equal(sub[0], pts[0])


# ---------------------------------------------------------------- shapes and tracing


@pytest.mark.parametrize("spec", ["sphere r=2 c=0.5,0,-1", "torus R=1.5 r=0.25", "union: sphere r=1 | torus R=2 r=0.5"])
def test_shape_spec_round_trip(spec):
    shape = parse_shape(spec)
    assert parse_shape(shape_to_spec(shape)) == shape


def test_shape_spec_errors():
    for bad in ("", "sphere radius", "sphere q=1", "union: sphere r=1"):
        with pytest.raises(ValueError):
            parse_shape(bad)


def test_trace_matches_analytic_sphere_depth():
    cam = look_at([0, 0, -4], [0, 0, 0], 32, 32)
    hit, z, _ = trace_shape(Sphere(1.0), cam)
    d = cam.ray_dirs()
    dn = d / np.linalg.norm(d, axis=2, keepdims=True)
    c = cam.t  # sphere center in the camera frame
    b = dn @ c
    disc = b**2 - (c @ c - 1.0)
    expect = np.where(disc > 0, (b - np.sqrt(np.maximum(disc, 0))) * dn[..., 2], np.inf)
    assert np.mean(hit != (disc > 0)) < 0.01
    both = hit & (disc > 0)
    assert np.max(np.abs(z[both] - expect[both])) < 1e-6


# ---------------------------------------------------------------- covariance


@given(st.integers(0, 2**31 - 1))
def test_covariances_are_spd(seed):
    sc = random_scene(np.random.default_rng(seed), 8)
    cov = sc.covariances()
    assert np.allclose(cov, np.swapaxes(cov, 1, 2))
    np.linalg.cholesky(cov)


# ---------------------------------------------------------------- serialization


def test_scene_round_trip(tmp_path, rng):
    sc = random_scene(rng, 10)
    save_scene(sc, tmp_path / "s.bin")
    back = load_scene(tmp_path / "s.bin")
    for k in GaussianScene.PARAMS:
        assert np.array_equal(getattr(sc, k), getattr(back, k))


@given(st.integers(0, 2**31 - 1), st.integers(0, 20))
def test_scene_round_trip_is_bit_exact(seed, n):
    import tempfile
    from pathlib import Path

    sc = random_scene(np.random.default_rng(seed), n)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "s.bin"
        save_scene(sc, p)
        assert load_scene(p).to_records().tobytes() == sc.to_records().tobytes()


def test_scene_file_size_matches_layout(tmp_path):
    n = 100_000
    sc = GaussianScene.empty(n)
    save_scene(sc, tmp_path / "big.bin")
    # 8-byte magic + u64 count, then 23 float64 per Gaussian
    assert (tmp_path / "big.bin").stat().st_size == 16 + n * 23 * 8
    assert HEADER_BYTES == 16 and RECORD_BYTES == 184


def test_scene_file_errors(tmp_path, rng):
    sc = random_scene(rng, 3)
    p = tmp_path / "s.bin"
    save_scene(sc, p)
    raw = p.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(SceneFormatError, match="magic"):
        load_scene(tmp_path / "magic.bin")
    (tmp_path / "trunc.bin").write_bytes(raw[:-8])
    with pytest.raises(SceneFormatError, match="expected"):
        load_scene(tmp_path / "trunc.bin")
    (tmp_path / "head.bin").write_bytes(raw[:10])
    with pytest.raises(SceneFormatError, match="truncated"):
        load_scene(tmp_path / "head.bin")
    with pytest.raises(OSError):
        load_scene(tmp_path / "missing.bin")


def test_camera_json_round_trip(tmp_path):
    cams = [look_at([3, 1, 2], [0, 0, 0], 32, 24), look_at([0, -3, 0], [0, 0, 0], 16, 16)]
    save_cameras(cams, tmp_path / "c.json", extra={"shape": "sphere r=1"})
    back, extra = load_cameras(tmp_path / "c.json")
    assert extra == {"shape": "sphere r=1"}
    for a, b in zip(cams, back):
        assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_camera_validation():
    with pytest.raises(ValueError, match="rotation"):
        Camera(10, 10, 8, 8, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 16, 16)
    with pytest.raises(ValueError, match="resolution"):
        Camera(10, 10, 2, 2, np.eye(3), np.zeros(3), 4, 4)


def test_projection_pixel_center_convention():
    cam = Camera(10.0, 10.0, 8.0, 8.0, np.eye(3), np.zeros(3), 16, 16)
    u, v, z = cam.project(np.array([[0.0, 0.0, 2.0], [0.2, -0.4, 2.0]]))
    assert np.allclose(u, [8.0, 9.0]) and np.allclose(v, [8.0, 6.0]) and np.allclose(z, 2.0)
    d = cam.ray_dirs()
    assert np.allclose(d[0, 0], [(0.5 - 8) / 10, (0.5 - 8) / 10, 1.0])
