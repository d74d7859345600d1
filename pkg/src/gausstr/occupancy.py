"""Open-vocabulary voxelization of Gaussian sets and occupancy metrics."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import autodiff as ad
from .errors import DataError, DimensionError
from .geometry import assemble_covariance

EMPTY = 255
GOCC_MAGIC = b"GOCC"
GOCC_VERSION = 1
TAU_OCC = 0.1
# Gaussians are truncated at Mahalanobis distance 3 (squared: 9)
MAHAL_SQ_MAX = 9.0


@dataclass(frozen=True)
class GridSpec:
    lo: tuple = (-8.0, -8.0, 0.0)
    hi: tuple = (8.0, 8.0, 3.2)
    voxel: float = 0.4

    @property
    def dims(self):
        ext = np.asarray(self.hi) - np.asarray(self.lo)
        return tuple(int(d) for d in np.round(ext / self.voxel))

    def centers(self):
        """(X, Y, Z, 3) voxel-center coordinates."""
        axes = [self.lo[k] + (np.arange(n) + 0.5) * self.voxel for k, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center_of(self, idx):
        return np.asarray(self.lo) + (np.asarray(idx) + 0.5) * self.voxel

    def index_of(self, points):
        idx = np.floor((np.asarray(points) - np.asarray(self.lo)) / self.voxel).astype(np.int64)
        return idx

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "voxel": self.voxel}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lo"]), tuple(d["hi"]), float(d["voxel"]))


@dataclass
class OccupancyGrid:
    spec: GridSpec
    classes: np.ndarray  # (X, Y, Z) uint8, EMPTY for free space
    n_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.shape != self.spec.dims:
            raise DimensionError(f"grid shape {self.classes.shape} != spec dims {self.spec.dims}")
        bad = (self.classes != EMPTY) & (self.classes >= self.n_classes)
        if np.any(bad):
            raise DataError("occupied cell with class id >= n_classes")

    @property
    def occupied(self):
        return self.classes != EMPTY

    def save(self, path, config_hash="", extra=None):
        s = self.spec
        header = GOCC_MAGIC + struct.pack("<I", GOCC_VERSION)
        header += struct.pack("<6d", *s.lo, *s.hi) + struct.pack("<d", s.voxel)
        header += struct.pack("<I", self.n_classes)
        payload = np.ascontiguousarray(self.classes.transpose(2, 1, 0)).tobytes()
        Path(path).write_bytes(header + payload)
        side = {"config_hash": config_hash, "dims": list(s.dims), **(extra or {})}
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2))

    @classmethod
    def load(cls, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read occupancy grid {path}: {exc}") from exc
        if raw[:4] != GOCC_MAGIC or len(raw) < 68:
            raise DataError(f"{path}: not a GOCC file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != GOCC_VERSION:
            raise DataError(f"{path}: unsupported GOCC version {version}")
        ext = struct.unpack_from("<6d", raw, 8)
        (voxel,) = struct.unpack_from("<d", raw, 56)
        (n_classes,) = struct.unpack_from("<I", raw, 64)
        spec = GridSpec(tuple(ext[:3]), tuple(ext[3:]), voxel)
        X, Y, Z = spec.dims
        payload = np.frombuffer(raw, dtype=np.uint8, offset=68)
        if payload.size != X * Y * Z:
            raise DataError(f"{path}: payload size {payload.size} != {X * Y * Z}")
        return cls(spec, payload.reshape(Z, Y, X).transpose(2, 1, 0).copy(), n_classes)


def read_sidecar(path):
    p = Path(str(path) + ".json")
    if not p.exists():
        return {}
    return json.loads(p.read_text())


@dataclass
class TextPrototypes:
    f_T: np.ndarray  # (N_C, C) unit rows
    names: list

    def __post_init__(self):
        self.f_T = np.asarray(self.f_T, dtype=np.float64)
        if len(self.names) != len(self.f_T):
            raise DimensionError("one name per prototype row")
        if not np.allclose(np.linalg.norm(self.f_T, axis=1), 1.0, atol=1e-9):
            raise DimensionError("text prototypes must be unit-norm")

    def with_novel(self, name, vector):
        """Append an extra category (open-vocabulary query)."""
        v = np.asarray(vector, dtype=np.float64)
        v = v / np.linalg.norm(v)
        return TextPrototypes(np.vstack([self.f_T, v]), list(self.names) + [name])


def semantic_logits(f_G, prototypes):
    """Row-softmax of Gaussian-to-prototype similarities."""
    f_T = prototypes.f_T if isinstance(prototypes, TextPrototypes) else np.asarray(prototypes)
    f = f_G.data if isinstance(f_G, ad.Tensor) else np.asarray(f_G, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != f_T.shape[1]:
        raise DimensionError(f"feature dim {f.shape} does not match prototypes {f_T.shape}")
    return ad.softmax(ad.Tensor(f) @ ad.Tensor(f_T.T), axis=-1).data


@njit(cache=True)
def _pair_weight(x, y, z, g, mu, inv_cov, opac):
    dx = x - mu[g, 0]
    dy = y - mu[g, 1]
    dz = z - mu[g, 2]
    m = (inv_cov[g, 0, 0] * dx * dx + inv_cov[g, 1, 1] * dy * dy + inv_cov[g, 2, 2] * dz * dz
         + 2.0 * (inv_cov[g, 0, 1] * dx * dy + inv_cov[g, 0, 2] * dx * dz + inv_cov[g, 1, 2] * dy * dz))
    if m > MAHAL_SQ_MAX:
        return -1.0
    return opac[g] * np.exp(-0.5 * m)


@njit(parallel=True, cache=True)
def _vox_accel(lo, vs, X, Y, Z, mu, inv_cov, opac, sims, rect, W, S):
    M = mu.shape[0]
    K = sims.shape[1]
    for ix in prange(X):
        x = lo[0] + (ix + 0.5) * vs
        for g in range(M):
            if ix < rect[g, 0] or ix >= rect[g, 1]:
                continue
            for iy in range(rect[g, 2], rect[g, 3]):
                y = lo[1] + (iy + 0.5) * vs
                for iz in range(rect[g, 4], rect[g, 5]):
                    z = lo[2] + (iz + 0.5) * vs
                    w = _pair_weight(x, y, z, g, mu, inv_cov, opac)
                    if w < 0.0:
                        continue
                    W[ix, iy, iz] += w
                    for k in range(K):
                        S[ix, iy, iz, k] += w * sims[g, k]


@njit(cache=True)
def _vox_brute(lo, vs, X, Y, Z, mu, inv_cov, opac, sims, W, S):
    M = mu.shape[0]
    K = sims.shape[1]
    for ix in range(X):
        x = lo[0] + (ix + 0.5) * vs
        for iy in range(Y):
            y = lo[1] + (iy + 0.5) * vs
            for iz in range(Z):
                z = lo[2] + (iz + 0.5) * vs
                for g in range(M):
                    w = _pair_weight(x, y, z, g, mu, inv_cov, opac)
                    if w < 0.0:
                        continue
                    W[ix, iy, iz] += w
                    for k in range(K):
                        S[ix, iy, iz, k] += w * sims[g, k]


def _prepare(gset, prototypes, feat=None):
    f = gset.feat if feat is None else np.asarray(feat, dtype=np.float64)
    f_T = prototypes.f_T if isinstance(prototypes, TextPrototypes) else np.asarray(prototypes)
    if f.shape[1] != f_T.shape[1]:
        raise DimensionError(f"Gaussian feature dim {f.shape[1]} != prototype dim {f_T.shape[1]}")
    cov = assemble_covariance(gset.scale, gset.rot)
    inv_cov = np.ascontiguousarray(np.linalg.inv(cov))
    opac = np.ascontiguousarray(np.where(gset.active, gset.alpha, 0.0), dtype=np.float64)
    # class scores are linear in the blended feature, so blend similarities directly
    sims = np.ascontiguousarray(f @ f_T.T)
    return cov, inv_cov, opac, sims, f_T.shape[0]


def _finish(spec, W, S, n_classes, tau):
    occ = W >= tau
    classes = np.full(spec.dims, EMPTY, dtype=np.uint8)
    if np.any(occ):
        logits = S[occ] / W[occ][:, None]
        probs = ad.softmax(ad.Tensor(logits), axis=-1).data
        classes[occ] = np.argmax(probs, axis=1).astype(np.uint8)
    return OccupancyGrid(spec, classes, n_classes)


def voxelize(gset, prototypes, spec, tau_occ=TAU_OCC, feat=None, return_weights=False):
    """Density-weighted voxelization, visiting only voxels in each Gaussian's 3-sigma box.

    A voxel is occupied when sum_i alpha_i G_i(center) >= tau_occ; its class is
    the argmax of the semantic logits of the density-weighted mean feature.
    """
    X, Y, Z = spec.dims
    n_proto = (prototypes.f_T if isinstance(prototypes, TextPrototypes) else np.asarray(prototypes)).shape[0]
    W = np.zeros((X, Y, Z))
    S = np.zeros((X, Y, Z, n_proto))
    if len(gset):
        cov, inv_cov, opac, sims, n_proto = _prepare(gset, prototypes, feat)
        half = 3.0 * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
        lo = np.asarray(spec.lo)
        first = np.ceil((gset.mu3d - half - lo) / spec.voxel - 0.5) - 1
        last = np.floor((gset.mu3d + half - lo) / spec.voxel - 0.5) + 2
        dims = np.array([X, Y, Z])
        first = np.clip(first, 0, dims).astype(np.int64)
        last = np.clip(last, 0, dims).astype(np.int64)
        rect = np.ascontiguousarray(np.stack([first[:, 0], last[:, 0], first[:, 1], last[:, 1],
                                              first[:, 2], last[:, 2]], axis=1))
        _vox_accel(lo, float(spec.voxel), X, Y, Z, np.ascontiguousarray(gset.mu3d),
                   inv_cov, opac, sims, rect, W, S)
    grid = _finish(spec, W, S, n_proto, tau_occ)
    return (grid, W) if return_weights else grid


def voxelize_bruteforce(gset, prototypes, spec, tau_occ=TAU_OCC, feat=None):
    """Reference voxelizer: every voxel against every Gaussian."""
    X, Y, Z = spec.dims
    n_proto = (prototypes.f_T if isinstance(prototypes, TextPrototypes) else np.asarray(prototypes)).shape[0]
    W = np.zeros((X, Y, Z))
    S = np.zeros((X, Y, Z, n_proto))
    if len(gset):
        _, inv_cov, opac, sims, n_proto = _prepare(gset, prototypes, feat)
        _vox_brute(np.asarray(spec.lo, dtype=np.float64), float(spec.voxel), X, Y, Z,
                   np.ascontiguousarray(gset.mu3d), inv_cov, opac, sims, W, S)
    return _finish(spec, W, S, n_proto, tau_occ)


def iou(pred, gt, names=None):
    """Binary IoU, per-class IoU and mIoU over classes present in either grid."""
    if pred.spec != gt.spec:
        raise DimensionError("prediction and ground truth use different grid specs")
    po, go = pred.occupied, gt.occupied
    union = np.count_nonzero(po | go)
    binary = np.count_nonzero(po & go) / union if union else 1.0
    n = max(pred.n_classes, gt.n_classes)
    names = list(names) if names is not None else [str(c) for c in range(n)]
    per_class = {}
    for c in range(n):
        pc, gc = pred.classes == c, gt.classes == c
        u = np.count_nonzero(pc | gc)
        if u == 0:
            continue
        per_class[names[c] if c < len(names) else str(c)] = np.count_nonzero(pc & gc) / u
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return {"binary_iou": float(binary), "per_class": per_class, "miou": miou}
