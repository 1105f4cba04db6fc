import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from meshsplat.pivots import (
    UNIT_OFFSETS,
    compute_importance,
    pivot_backward,
    pivot_jacobian,
    sample_pivots,
    select_pivot_gaussians,
)
from meshsplat.rotation import quat_to_rotmat, quat_to_rotmat_backward, random_quats, rotmat_jacobian
from meshsplat.scene import Camera, GaussianScene


def one_gaussian(mu=(0.0, 0.0, 0.0), quat=(1.0, 0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0)):
    sc = GaussianScene.empty(1)
    sc.mu[0] = mu
    sc.quat[0] = quat
    sc.log_scale[0] = np.log(scale)
    return sc


def random_scene(rng, n):
    sc = GaussianScene.empty(n)
    sc.mu[:] = rng.normal(size=(n, 3))
    sc.quat[:] = rng.normal(size=(n, 4))
    sc.log_scale[:] = rng.normal(-1, 0.5, (n, 3))
    return sc


# ---------------------------------------------------------------- rotations


def explicit_rotmat(q):
    """Rotation matrix by conjugating basis vectors with Hamilton products."""

    def mul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ]
        )

    q = np.asarray(q) / np.linalg.norm(q)
    qc = q * np.array([1, -1, -1, -1])
    cols = [mul(mul(q, np.r_[0.0, e]), qc)[1:] for e in np.eye(3)]
    return np.stack(cols, axis=1)


@given(st.integers(0, 2**31 - 1))
def test_rotmat_matches_hamilton_product_oracle(seed):
    q = np.random.default_rng(seed).normal(size=4)
    assert np.max(np.abs(quat_to_rotmat(q) - explicit_rotmat(q))) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_rotmat_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    num = central_difference(lambda x: np.sum(quat_to_rotmat(x) * G), q, 1e-6)
    assert relative_error(quat_to_rotmat_backward(q, G), num) < 1e-7
    assert rotmat_jacobian(q).shape == (4, 3, 3)


def test_random_quats_are_unit(rng):
    q = random_quats(rng, 1000)
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0)
    R = quat_to_rotmat(q)
    assert np.allclose(np.linalg.det(R), 1.0)


# ---------------------------------------------------------------- sites


def test_identity_gaussian_gives_unit_cube_corners():
    p = sample_pivots(one_gaussian())
    assert len(p) == 9
    assert np.array_equal(p.sites[0], [0, 0, 0])
    corners = {tuple(x) for x in p.sites[1:]}
    assert corners == {(a, b, c) for a in (-1.0, 1.0) for b in (-1.0, 1.0) for c in (-1.0, 1.0)}


def test_scaled_corner_is_componentwise():
    p = sample_pivots(one_gaussian(mu=(1, 2, 3), scale=(2, 1, 1)))
    i = next(i for i in range(9) if np.array_equal(UNIT_OFFSETS[i], [1, 1, 1]))
    assert np.allclose(p.sites[i], [3, 3, 4], atol=1e-15)


def test_sites_match_explicit_rotation_oracle():
    rng = np.random.default_rng(3)
    q = random_quats(rng, 1)[0]
    sc = one_gaussian(mu=rng.normal(size=3), quat=q, scale=rng.uniform(0.5, 2, 3))
    p = sample_pivots(sc)
    R = explicit_rotmat(q)
    s = np.exp(sc.log_scale[0])
    expect = sc.mu[0] + (UNIT_OFFSETS * s) @ R.T
    assert np.max(np.abs(p.sites - expect)) < 1e-12


def test_corner_multiplier_scales_offsets():
    p1 = sample_pivots(one_gaussian(mu=(1, 1, 1)), corner_mult=1.0)
    p3 = sample_pivots(one_gaussian(mu=(1, 1, 1)), corner_mult=3.0)
    assert np.allclose(p3.sites[1:] - 1, 3 * (p1.sites[1:] - 1))
    assert np.array_equal(p3.sites[0], p1.sites[0])
    with pytest.raises(ValueError):
        sample_pivots(one_gaussian(), corner_mult=0.0)


@given(st.integers(0, 2**31 - 1))
def test_corners_form_parallelepiped_about_center(seed):
    sc = random_scene(np.random.default_rng(seed), 4)
    mu = sc.mu.copy()
    sc.mu[:] = 0.0
    off = sample_pivots(sc).sites.reshape(-1, 9, 3)
    sc.mu[:] = mu
    s9 = sample_pivots(sc).sites.reshape(-1, 9, 3)
    for i in range(1, 9):
        j = next(j for j in range(1, 9) if np.array_equal(UNIT_OFFSETS[j], -UNIT_OFFSETS[i]))
        # antipodal offsets cancel exactly; adding mu back costs at most rounding
        assert np.array_equal(off[:, i], -off[:, j])
        assert np.allclose(s9[:, i] + s9[:, j], 2 * s9[:, 0], rtol=0, atol=1e-14)


def test_selected_subset_and_errors():
    sc = random_scene(np.random.default_rng(0), 5)
    p = sample_pivots(sc, [3, 1])
    assert np.array_equal(p.selected, [1, 3])
    assert np.array_equal(p.gaussian, np.repeat([1, 3], 9))
    assert np.array_equal(p.center_sites(), [0, 9])
    with pytest.raises(IndexError):
        sample_pivots(sc, [5])
    with pytest.raises(ValueError):
        sample_pivots(sc, [])


@pytest.mark.parametrize("corner_mult", [1.0, 2.5])
@pytest.mark.parametrize("seed", range(5))
def test_pivot_jacobian_matches_finite_differences(seed, corner_mult):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 3)
    sel = np.array([0, 2])
    G = rng.normal(size=(18, 3))
    grads = pivot_backward(sc, sample_pivots(sc, sel, corner_mult), G)
    J = pivot_jacobian(sc, sample_pivots(sc, sel, corner_mult))
    for name in ("mu", "quat", "log_scale"):

        def f(x):
            s = sc.copy()
            setattr(s, name, x)
            return np.sum(sample_pivots(s, sel, corner_mult).sites * G)

        num = central_difference(f, getattr(sc, name), 1e-5)
        assert relative_error(grads[name], num) < 1e-6
        assert np.all(grads[name][1] == 0)
        # the Jacobian blocks contract to the same gradient
        per_site = np.einsum("ma,mab->mb", G, J[name])
        acc = np.zeros_like(grads[name])
        np.add.at(acc, np.repeat(sel, 9), per_site)
        assert np.allclose(acc, grads[name], atol=1e-12)


# ---------------------------------------------------------------- importance


def _front_camera(size=16):
    return Camera(size, size, size / 2, size / 2, np.eye(3), np.zeros(3), size, size)


def _disc(sc, i, z, scale=20.0, logit=20.0):
    sc.mu[i] = (0.0, 0.0, z)
    sc.log_scale[i] = np.log([scale, scale, 0.01 * scale])
    sc.logit_opacity[i] = logit


def test_sole_opaque_gaussian_has_positive_score():
    sc = GaussianScene.empty(1)
    _disc(sc, 0, 2.0)
    s = compute_importance(sc, [_front_camera()])
    assert s.shape == (1,) and s[0] > 0


def test_occluded_gaussian_scores_near_zero():
    sc = GaussianScene.empty(2)
    _disc(sc, 0, 2.0)
    _disc(sc, 1, 4.0, logit=0.0)
    s = compute_importance(sc, [_front_camera()])
    # interior pixels: front weight 0.999 (alpha clamp), back weight 0.001 * 0.5;
    # image-border pixels where the front footprint falls off add a little
    assert s[1] < 1e-3 * s[0]
    assert s[1] / s[0] == pytest.approx(0.001 * 0.5 / 0.999, rel=0.2)


def test_scores_scale_with_pixel_count():
    sc = GaussianScene.empty(2)
    _disc(sc, 0, 3.0, scale=0.4, logit=0.0)
    _disc(sc, 1, 4.0, scale=0.6, logit=0.5)
    sc.mu[1, 0] = 0.3
    s1 = compute_importance(sc, [_front_camera(32)])
    s2 = compute_importance(sc, [_front_camera(64)])
    assert np.all(np.abs(s2 / s1 - 4.0) < 0.4)


def test_importance_needs_a_camera():
    with pytest.raises(ValueError):
        compute_importance(GaussianScene.empty(1), [])


# ---------------------------------------------------------------- selection


def test_full_budget_selects_everything():
    s = np.random.default_rng(0).uniform(0.1, 1, 10)
    assert np.array_equal(select_pivot_gaussians(s, 10), np.arange(10))


def test_degenerate_scores_pick_the_positive_one():
    for seed in range(50):
        assert np.array_equal(select_pivot_gaussians([1.0, 0.0, 0.0], 1, seed=seed), [0])


def test_selection_frequency_follows_scores():
    # P(first draw = 0) = 3 / (3 + 1) for weighted sampling without replacement
    hits = sum(select_pivot_gaussians([3.0, 1.0], 1, seed=s)[0] == 0 for s in range(100_000))
    assert 0.74 <= hits / 100_000 <= 0.76


def test_second_draw_matches_sequential_sampling():
    # scores (3, 2, 1), budget 2: P({0, 1}) = 3/6 * 2/3 + 2/6 * 3/4 = 7/12
    n = 40_000
    hits = sum(np.array_equal(select_pivot_gaussians([3.0, 2.0, 1.0], 2, seed=s), [0, 1]) for s in range(n))
    assert abs(hits / n - 7 / 12) < 0.01


@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_selection_is_reproducible(seed, budget):
    s = np.random.default_rng(seed).random(30)
    a = select_pivot_gaussians(s, budget, "dense", seed)
    b = select_pivot_gaussians(s, budget, "dense", seed)
    assert a.tobytes() == b.tobytes()
    assert len(np.unique(a)) == budget and np.all(np.diff(a) > 0)


@pytest.mark.parametrize(
    "scores, budget, mode",
    [([1.0, 2.0], 0, "base"), ([1.0, 2.0], 3, "base"), ([1.0, -1.0], 1, "base"), ([1.0, np.nan], 1, "base"), ([1.0], 1, "x")],
)
def test_selection_errors(scores, budget, mode):
    with pytest.raises(ValueError):
        select_pivot_gaussians(scores, budget, mode)
