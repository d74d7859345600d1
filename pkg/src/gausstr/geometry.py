"""Pinhole cameras, quaternions and covariance assembly.

Camera space follows the OpenCV convention (x right, y down, z forward) and
depth is always camera-space z.  Pixel coordinates are continuous: the
center of pixel (row i, col j) sits at (j + 0.5, i + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

Z_NEAR = 0.05


@dataclass(frozen=True)
class Camera:
    K: np.ndarray  # 3x3 intrinsics
    E: np.ndarray  # 4x4 world -> camera
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise DimensionError("Camera needs K 3x3 and E 4x4")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DomainError("focal lengths must be positive")
        R = E[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise DomainError("extrinsic rotation block must be a proper rotation")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    @property
    def rotation(self):
        return self.E[:3, :3]

    @property
    def translation(self):
        return self.E[:3, 3]

    def inverse_extrinsics(self):
        """Camera -> world transform, built from the rigid structure of E."""
        R, t = self.rotation, self.translation
        inv = np.eye(4)
        inv[:3, :3] = R.T
        inv[:3, 3] = -R.T @ t
        return inv

    def center(self):
        return -self.rotation.T @ self.translation

    def scaled(self, factor):
        """Same pose, image resampled by 1/factor (e.g. factor=16 for render size)."""
        K = self.K.copy()
        K[:2] /= factor
        return Camera(K, self.E, int(round(self.width / factor)), int(round(self.height / factor)))

    def resized(self, width, height):
        K = self.K.copy()
        K[0] *= width / self.width
        K[1] *= height / self.height
        return Camera(K, self.E, int(width), int(height))

    def to_dict(self):
        return {"K": self.K.tolist(), "E": self.E.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["K"]), np.array(d["E"]), int(d["width"]), int(d["height"]))

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0), cx=None, cy=None):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            raise DomainError("look_at: up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ eye
        K = np.array([[fx, 0.0, width / 2 if cx is None else cx],
                      [0.0, fy, height / 2 if cy is None else cy],
                      [0.0, 0.0, 1.0]])
        return cls(K, E, int(width), int(height))


def pixel_centers(width, height):
    """(H*W)x2 array of pixel-center coordinates in row-major order."""
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([jj.ravel(), ii.ravel()], axis=1)


def unproject(mu2d, d, cam):
    """Lift pixels with z-depth ``d`` to world points: E^-1 K^-1 (d * [u, v, 1])."""
    mu2d = np.atleast_2d(np.asarray(mu2d, dtype=np.float64))
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    if np.any(d <= 0):
        raise DomainError("unproject: depth must be positive")
    homo = np.concatenate([mu2d, np.ones((len(mu2d), 1))], axis=1) * d[:, None]
    cam_pts = np.linalg.solve(cam.K, homo.T).T
    inv = cam.inverse_extrinsics()
    return cam_pts @ inv[:3, :3].T + inv[:3, 3]


def world_to_camera(points, cam):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return points @ cam.rotation.T + cam.translation


def project(points, cam, z_near=Z_NEAR):
    """World points -> (pixel coords Nx2, z-depth N, in_front N bool).

    Points with z <= z_near are flagged and their pixel coordinates are NaN.
    """
    pc = world_to_camera(points, cam)
    z = pc[:, 2]
    ok = z > z_near
    safe = np.where(ok, z, 1.0)
    u = cam.fx * pc[:, 0] / safe + cam.cx
    v = cam.fy * pc[:, 1] / safe + cam.cy
    uv = np.stack([u, v], axis=1)
    uv[~ok] = np.nan
    return uv, z, ok


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DomainError("zero quaternion")
    return q / n


def quat_to_rotmat(q):
    """(w, x, y, z) quaternion(s) -> rotation matrix(es); normalizes first."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def assemble_covariance(S, q):
    """Sigma = R diag(S) diag(S) R^T for one or many Gaussians."""
    S = np.asarray(S, dtype=np.float64)
    if np.any(S <= 0):
        raise DomainError("scales must be positive")
    M = quat_to_rotmat(q) * S[..., None, :]
    return M @ np.swapaxes(M, -1, -2)
