import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gausstr.errors import DataError, DomainError
from gausstr.gaussians import (S_MAX, S_MIN, Gaussian, GaussianSet, apply_refinement, density_at,
                               init_from_depth, stratified_pixels)
from gausstr.geometry import Camera, assemble_covariance, quat_to_rotmat


def _cam(E=None):
    K = np.array([[100.0, 0, 50], [0, 100.0, 40], [0, 0, 1]])
    return Camera(K, np.eye(4) if E is None else E, 100, 80)


def _gaussian(mu=(0, 0, 0), scale=(1, 1, 1), rot=(1, 0, 0, 0)):
    return Gaussian(np.array(mu, float), np.array(scale, float), np.array(rot, float), 0.5, np.zeros(2))


def _random_set(rng, m=6, C=3):
    q = rng.normal(size=(m, 4))
    return GaussianSet(rng.normal(size=(m, 3)), rng.uniform(0.1, 1, (m, 3)),
                       q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0, 1, m),
                       rng.normal(size=(m, C)), np.repeat([0, 1], m // 2))


def test_init_principal_point():
    depth = np.full((80, 100), 4.0)
    mu, S0, R0, active = init_from_depth([[50.0, 40.0]], depth, _cam(), s0_factor=0.05)
    np.testing.assert_allclose(mu, [[0, 0, 4]], atol=1e-15)
    np.testing.assert_allclose(S0, [[0.2, 0.2, 0.2]], rtol=1e-15)
    np.testing.assert_array_equal(R0, [[1, 0, 0, 0]])
    assert active.all()


def test_init_scale_proportional_to_depth():
    px = np.array([[10.3, 20.7], [70.1, 5.5]])
    _, s1, _, _ = init_from_depth(px, np.full((80, 100), 1.5), _cam())
    _, s2, _, _ = init_from_depth(px, np.full((80, 100), 3.0), _cam())
    np.testing.assert_allclose(s2, 2 * s1, rtol=1e-15)


def test_init_rotation_is_camera_to_world():
    cam = Camera.look_at([2, 1, 3], [0, 0, 0], 50, 50, 64, 48)
    _, _, R0, _ = init_from_depth([[3.0, 4.0]], np.ones((48, 64)), cam)
    np.testing.assert_allclose(quat_to_rotmat(R0[0]), cam.rotation.T, atol=1e-12)


def test_init_marks_bad_depth_inactive():
    depth = np.full((80, 100), 2.0)
    depth[0, 0], depth[79, 99] = 0.0, np.nan
    _, _, _, active = init_from_depth([[0.5, 0.5], [99.5, 79.5], [50, 40]], depth, _cam())
    assert active.tolist() == [False, False, True]


def test_init_samples_nearest_pixel_of_coarse_map():
    depth = np.arange(1.0, 7.0).reshape(2, 3)  # 2x3 map over a 100x80 image
    mu, _, _, _ = init_from_depth([[90.0, 70.0]], depth, _cam())
    assert mu[0, 2] == 6.0


def test_stratified_pixels_cover_image():
    rng = np.random.default_rng(0)
    px = stratified_pixels(300, 64, 48, rng)
    assert px.shape == (300, 2)
    assert (px >= 0).all() and (px[:, 0] < 64).all() and (px[:, 1] < 48).all()
    counts, _, _ = np.histogram2d(px[:, 0], px[:, 1], bins=[4, 4], range=[[0, 64], [0, 48]])
    assert counts.min() > 0


def test_zero_deltas_leave_gaussian_unchanged():
    g = _gaussian((1, 2, 3), (0.5, 0.2, 0.1), (0.5, 0.5, 0.5, 0.5))
    out = apply_refinement(g, {})
    np.testing.assert_allclose(out.mu3d, g.mu3d, atol=0)
    np.testing.assert_allclose(out.scale, g.scale, atol=0)
    np.testing.assert_allclose(out.rot, g.rot, atol=1e-15)


def test_refinement_examples():
    g = _gaussian((1, 2, 3), (0.5, 0.2, 0.1))
    np.testing.assert_allclose(apply_refinement(g, {"dmu": [1, 0, 0]}).mu3d, [2, 2, 3])
    np.testing.assert_allclose(apply_refinement(g, {"dscale": np.full(3, np.log(2))}).scale,
                               [1.0, 0.4, 0.2], rtol=1e-14)


def test_refinement_clamps_scale():
    g = _gaussian(scale=(1, 1, 1))
    out = apply_refinement(g, {"dscale": [100.0, -100.0, 0.0]})
    np.testing.assert_allclose(out.scale, [S_MAX, S_MIN, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_refinement_sequence_preserves_invariants(seed, steps):
    rng = np.random.default_rng(seed)
    g = _gaussian(rng.normal(size=3), rng.uniform(0.05, 2, 3), rng.normal(size=4))
    g = apply_refinement(g, {})
    for _ in range(steps):
        g = apply_refinement(g, {"dmu": rng.normal(size=3), "drot": rng.normal(size=4) * 0.5,
                                 "dscale": rng.normal(size=3) * 3})
    assert np.all(np.isfinite(g.mu3d))
    assert abs(np.linalg.norm(g.rot) - 1) < 1e-12
    assert np.all((g.scale >= S_MIN) & (g.scale <= S_MAX))


def test_density_examples():
    g = _gaussian((1, 1, 1))
    assert density_at(g, [1, 1, 1]) == 1.0
    assert abs(density_at(g, [2, 1, 1]) - np.exp(-0.5)) < 1e-15
    v = np.array([0.3, -0.2, 0.7])
    assert density_at(g, g.mu3d + v) == pytest.approx(density_at(g, g.mu3d - v), abs=1e-15)


def test_density_matches_explicit_inverse():
    rng = np.random.default_rng(4)
    for _ in range(100):
        g = _gaussian(rng.normal(size=3), rng.uniform(0.05, 2, 3), rng.normal(size=4))
        x = g.mu3d + rng.normal(size=(20, 3))
        cov = assemble_covariance(g.scale, g.rot)
        off = x - g.mu3d
        ref = np.exp(-0.5 * np.einsum("ni,ij,nj->n", off, np.linalg.inv(cov), off))
        assert np.abs(density_at(g, x) - ref).max() < 1e-10


def test_density_decreases_along_rays():
    rng = np.random.default_rng(5)
    g = _gaussian(rng.normal(size=3), [0.3, 1.0, 2.0], rng.normal(size=4))
    for _ in range(20):
        ray = g.mu3d + np.linspace(0, 5, 50)[:, None] * rng.normal(size=3)
        assert np.all(np.diff(density_at(g, ray)) <= 0)


def test_validate_catches_violations():
    gs = _random_set(np.random.default_rng(0))
    gs.validate(n_per_view=3)
    with pytest.raises(DomainError):
        gs.validate(n_per_view=4)
    gs.alpha[0] = 1.5
    with pytest.raises(DomainError):
        gs.validate()


def test_set_save_load_round_trip(tmp_path):
    gs = _random_set(np.random.default_rng(1))
    gs.active[2] = False
    gs.save(tmp_path / "g", config_hash="abc")
    back = GaussianSet.load(tmp_path / "g")
    for name in ("mu3d", "scale", "rot", "alpha", "feat", "view", "active"):
        assert np.array_equal(getattr(back, name), getattr(gs, name))
    assert back.meta["config_hash"] == "abc"


def test_load_missing_sidecar(tmp_path):
    with pytest.raises(DataError):
        GaussianSet.load(tmp_path)
