"""Gaussian scene representation, depth-based initialization and refinement."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DomainError
from .geometry import assemble_covariance, normalize_quat, rotmat_to_quat, unproject
from .tensor_io import load_tensor, save_tensor

S_MIN = 0.01
S_MAX = 10.0


@dataclass
class Gaussian:
    mu3d: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    alpha: float
    feat: np.ndarray

    def covariance(self):
        return assemble_covariance(self.scale, self.rot)


@dataclass
class GaussianSet:
    """Struct-of-arrays snapshot of N*V Gaussians (view-major order)."""

    mu3d: np.ndarray  # (M, 3)
    scale: np.ndarray  # (M, 3)
    rot: np.ndarray  # (M, 4) w,x,y,z
    alpha: np.ndarray  # (M,)
    feat: np.ndarray  # (M, C)
    view: np.ndarray  # (M,) source view index
    active: np.ndarray = None  # (M,) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = len(self.mu3d)
        if self.active is None:
            self.active = np.ones(m, dtype=bool)
        self.view = np.asarray(self.view, dtype=np.int64)
        self.active = np.asarray(self.active, dtype=bool)

    def __len__(self):
        return len(self.mu3d)

    @property
    def C(self):
        return self.feat.shape[1]

    @property
    def n_views(self):
        return int(self.view.max()) + 1 if len(self.view) else 0

    def __getitem__(self, i):
        return Gaussian(self.mu3d[i], self.scale[i], self.rot[i], float(self.alpha[i]), self.feat[i])

    @classmethod
    def empty(cls, C):
        return cls(np.zeros((0, 3)), np.ones((0, 3)), np.tile([1.0, 0, 0, 0], (0, 1)),
                   np.zeros(0), np.zeros((0, C)), np.zeros(0, dtype=np.int64))

    def validate(self, n_per_view=None):
        """Raise DomainError if any representation invariant is violated."""
        arrays = (self.mu3d, self.scale, self.rot, self.alpha, self.feat)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DomainError("non-finite Gaussian parameter")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise DomainError("opacity outside [0, 1]")
        if np.any(self.scale <= 0):
            raise DomainError("non-positive scale")
        if len(self) and not np.allclose(np.linalg.norm(self.rot, axis=1), 1.0, atol=1e-9):
            raise DomainError("rotation quaternion not unit-norm")
        if n_per_view is not None and len(self):
            counts = np.bincount(self.view)
            if np.any(counts != n_per_view):
                raise DomainError(f"per-view counts {counts.tolist()} != {n_per_view}")

    def save(self, directory, config_hash=""):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("mu3d", "scale", "rot", "alpha", "feat", "view", "active"):
            save_tensor(d / f"{name}.gtsr", np.asarray(getattr(self, name), dtype=np.float64))
        n_views = self.n_views
        sidecar = {"N": len(self) // n_views if n_views else 0, "V": n_views, "C": self.C,
                   "config_hash": config_hash, **self.meta}
        (d / "gaussians.json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        try:
            meta = json.loads((d / "gaussians.json").read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read Gaussian sidecar in {d}: {exc}") from exc
        arr = {n: load_tensor(d / f"{n}.gtsr")
               for n in ("mu3d", "scale", "rot", "alpha", "feat", "view", "active")}
        gs = cls(arr["mu3d"], arr["scale"], arr["rot"], arr["alpha"],
                 arr["feat"].reshape(-1, meta["C"]), arr["view"].astype(np.int64),
                 arr["active"] > 0.5, meta={k: v for k, v in meta.items() if k not in ("N", "V", "C")})
        if len(gs) != meta["N"] * meta["V"]:
            raise DataError(f"{d}: sidecar N*V does not match stored Gaussians")
        return gs


def stratified_pixels(n, width, height, rng):
    """n jittered pixel positions, one per cell of a near-square grid over the image."""
    cols = max(1, int(np.ceil(np.sqrt(n * width / height))))
    rows = int(np.ceil(n / cols))
    cells = np.round(np.linspace(0, rows * cols - 1, n)).astype(int)
    r, c = np.divmod(cells, cols)
    jitter = rng.uniform(0.0, 1.0, size=(n, 2))
    u = (c + jitter[:, 0]) * (width / cols)
    v = (r + jitter[:, 1]) * (height / rows)
    return np.stack([np.clip(u, 0, width - 1e-6), np.clip(v, 0, height - 1e-6)], axis=1)


def sample_depth_nearest(depth_map, mu2d, cam):
    h, w = depth_map.shape
    j = np.clip((mu2d[:, 0] * w / cam.width).astype(int), 0, w - 1)
    i = np.clip((mu2d[:, 1] * h / cam.height).astype(int), 0, h - 1)
    return depth_map[i, j]


def init_from_depth(mu2d, depth_map, cam, s0_factor=0.05, fallback_depth=1.0):
    """Unproject query pixels with sampled depth.

    Returns (mu3d, S0, R0, active).  Queries whose depth is missing or
    non-positive are inactive and get ``fallback_depth`` as a placeholder.
    """
    mu2d = np.asarray(mu2d, dtype=np.float64)
    d = sample_depth_nearest(np.asarray(depth_map), mu2d, cam)
    active = np.isfinite(d) & (d > 0)
    d = np.where(active, d, fallback_depth)
    mu3d = unproject(mu2d, d, cam)
    S0 = s0_factor * d[:, None] * np.ones((1, 3))
    R0 = np.tile(rotmat_to_quat(cam.rotation.T), (len(mu2d), 1))
    return mu3d, S0, R0, active


def refine(mu, rot, scale, dmu, drot, dscale, s_min=S_MIN, s_max=S_MAX):
    """Differentiable update: mean shift, additive quaternion, log-space scale."""
    mu = ad.add(mu, dmu)
    rot = ad.normalize_rows(ad.add(rot, drot))
    scale = ad.clip(ad.mul(scale, ad.exp(dscale)), s_min, s_max)
    return mu, rot, scale


def apply_refinement(g, deltas, s_min=S_MIN, s_max=S_MAX):
    """Apply predicted deltas {'dmu', 'drot', 'dscale'} to a single Gaussian."""
    mu, rot, scale = refine(
        ad.Tensor(np.reshape(g.mu3d, (1, 3))), ad.Tensor(np.reshape(g.rot, (1, 4))),
        ad.Tensor(np.reshape(g.scale, (1, 3))),
        ad.Tensor(np.reshape(deltas.get("dmu", np.zeros(3)), (1, 3))),
        ad.Tensor(np.reshape(deltas.get("drot", np.zeros(4)), (1, 4))),
        ad.Tensor(np.reshape(deltas.get("dscale", np.zeros(3)), (1, 3))),
        s_min, s_max)
    return Gaussian(mu.data[0].copy(), scale.data[0].copy(), rot.data[0].copy(), g.alpha, g.feat)


def density_at(g, x):
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)) for one Gaussian at point(s) x."""
    cov = assemble_covariance(g.scale, normalize_quat(g.rot))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("singular covariance") from exc
    off = np.atleast_2d(np.asarray(x, dtype=np.float64)) - g.mu3d
    y = np.linalg.solve(L, off.T)
    out = np.exp(-0.5 * np.sum(y * y, axis=0))
    return out[0] if np.ndim(x) == 1 else out
