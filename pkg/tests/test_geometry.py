import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gausstr.errors import DimensionError, DomainError
from gausstr.geometry import (Camera, assemble_covariance, normalize_quat, pixel_centers, project,
                              quat_to_rotmat, rotmat_to_quat, unproject)

RZ90 = np.array([np.sqrt(0.5), 0, 0, np.sqrt(0.5)])


def _intrinsics(f, cx, cy):
    return np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])


def _random_camera(rng):
    eye = rng.uniform(-3, 3, size=3) + np.array([0, 0, 4.0])
    target = rng.uniform(-0.5, 0.5, size=3)
    w, h = int(rng.integers(16, 80)), int(rng.integers(16, 80))
    return Camera.look_at(eye, target, rng.uniform(20, 90), rng.uniform(20, 90), w, h)


def test_principal_point_lifts_onto_optical_axis():
    cam = Camera(_intrinsics(100, 50, 40), np.eye(4), 100, 80)
    np.testing.assert_allclose(unproject([[50, 40]], [4.0], cam), [[0, 0, 4]], atol=1e-15)


def test_pinhole_arithmetic():
    cam = Camera(_intrinsics(100, 50, 50), np.eye(4), 200, 100)
    np.testing.assert_allclose(unproject([[150, 50]], [2.0], cam), [[2, 0, 2]], atol=1e-14)


def test_project_on_axis_and_behind_camera():
    cam = Camera(_intrinsics(100, 50, 40), np.eye(4), 100, 80)
    uv, z, ok = project(np.array([[0, 0, 4.0], [0, 0, -1.0], [0, 0, 0.05]]), cam)
    np.testing.assert_allclose(uv[0], [50, 40])
    assert z[0] == 4.0
    assert ok.tolist() == [True, False, False]
    assert np.isnan(uv[1:]).all()


@pytest.mark.parametrize("seed", range(5))
def test_project_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = _random_camera(rng)
    p = rng.uniform(0, 1, size=(1000, 2)) * [cam.width, cam.height]
    d = rng.uniform(0.2, 10.0, size=1000)
    uv, z, ok = project(unproject(p, d, cam), cam)
    assert ok.all()
    assert np.abs(uv - p).max() < 1e-9
    np.testing.assert_allclose(z, d, rtol=1e-12)


def test_unproject_rejects_non_positive_depth():
    cam = Camera(_intrinsics(10, 5, 5), np.eye(4), 10, 10)
    with pytest.raises(DomainError):
        unproject([[1, 1], [2, 2]], [1.0, 0.0], cam)


def test_extrinsics_are_invertible():
    cam = _random_camera(np.random.default_rng(7))
    np.testing.assert_allclose(cam.E @ cam.inverse_extrinsics(), np.eye(4), atol=1e-12)


def test_camera_rejects_bad_parameters():
    with pytest.raises(DomainError):
        Camera(_intrinsics(-1, 5, 5), np.eye(4), 10, 10)
    reflect = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(DomainError):
        Camera(_intrinsics(10, 5, 5), reflect, 10, 10)
    with pytest.raises(DimensionError):
        Camera(np.eye(2), np.eye(4), 10, 10)


def test_camera_serialization_round_trip():
    cam = _random_camera(np.random.default_rng(3))
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.K, cam.K) and np.array_equal(back.E, cam.E)
    assert (back.width, back.height) == (cam.width, cam.height)


def test_pixel_centers_row_major():
    c = pixel_centers(3, 2)
    assert c.shape == (6, 2)
    np.testing.assert_array_equal(c[:4], [[0.5, 0.5], [1.5, 0.5], [2.5, 0.5], [0.5, 1.5]])


def test_quaternion_examples():
    np.testing.assert_array_equal(quat_to_rotmat([1, 0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(quat_to_rotmat(RZ90), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_zero_quaternion_rejected():
    with pytest.raises(DomainError):
        normalize_quat([0, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotation_is_orthonormal_and_sign_free(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    np.testing.assert_allclose(quat_to_rotmat(-np.asarray(q)), R, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotmat_quaternion_round_trip(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-12)
    assert rotmat_to_quat(R)[0] >= 0


def test_covariance_examples():
    np.testing.assert_allclose(assemble_covariance([1, 2, 3], [1, 0, 0, 0]), np.diag([1, 4, 9]), atol=1e-9)
    np.testing.assert_allclose(assemble_covariance([2, 1, 1], RZ90), np.diag([1, 4, 1]), atol=1e-9)


@pytest.mark.parametrize("S", [[0, 1, 1], [1, -2, 1]])
def test_covariance_rejects_non_positive_scale(S):
    with pytest.raises(DomainError):
        assemble_covariance(S, [1, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
       st.lists(st.floats(0.01, 3), min_size=3, max_size=3))
def test_covariance_spectrum_and_symmetry(q, S):
    cov = assemble_covariance(S, q)
    assert np.abs(cov - cov.T).max() <= 1e-12
    np.linalg.cholesky(cov)
    S = np.asarray(S)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(S**2), atol=1e-9)
    assert abs(np.trace(cov) - (S**2).sum()) < 1e-12 * max(1.0, (S**2).sum())


def test_covariance_batched_matches_single():
    rng = np.random.default_rng(1)
    q, S = rng.normal(size=(6, 4)), rng.uniform(0.1, 2, size=(6, 3))
    batch = assemble_covariance(S, q)
    for i in range(6):
        np.testing.assert_allclose(batch[i], assemble_covariance(S[i], q[i]), atol=1e-15)
