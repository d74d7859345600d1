"""PCA feature reduction and the self-supervised loss terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, RankError

BETA = 0.2
IGNORE = 255


@dataclass
class PcaBasis:
    V_k: np.ndarray  # (C_R, C), orthonormal rows
    mean: np.ndarray  # (C,)

    @property
    def C_R(self):
        return self.V_k.shape[0]


def pca_fit(F, C_R):
    """Top principal directions of the centered sample covariance.

    Each row's largest-magnitude entry is made positive so the basis is
    deterministic.
    """
    F = np.asarray(F, dtype=np.float64)
    M, C = F.shape
    if M < C_R:
        raise RankError(f"need at least C_R={C_R} samples, got {M}")
    if C_R > C:
        raise RankError(f"C_R={C_R} exceeds feature dim C={C}")
    mean = F.mean(axis=0)
    X = F - mean
    cov = X.T @ X / M
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:C_R]
    V = evecs[:, order].T
    pivot = np.argmax(np.abs(V), axis=1)
    V *= np.sign(V[np.arange(C_R), pivot])[:, None]
    return PcaBasis(V, mean)


def pca_project(f, basis):
    """(f - mean) V_k^T for arrays or Tensors (differentiable in f)."""
    C = basis.V_k.shape[1]
    if np.shape(f.data if isinstance(f, ad.Tensor) else f)[-1] != C:
        raise DimensionError(f"feature dim does not match basis dim {C}")
    if isinstance(f, ad.Tensor):
        return ad.matmul(ad.sub(f, basis.mean[None, :]), ad.Tensor(basis.V_k.T))
    return (np.asarray(f) - basis.mean) @ basis.V_k.T


def feat_loss(F_target, F_hat):
    """Mean over pixels of 1 - cos(F', F_hat); a zero vector counts as cos = 0."""
    F_target = np.asarray(F_target, dtype=np.float64)
    F_hat = ad.as_tensor(F_hat)
    if F_target.shape != F_hat.shape:
        raise DimensionError(f"{F_target.shape} vs {F_hat.shape}")
    P = F_target.shape[0]
    if P == 0:
        return ad.Tensor(0.0)
    n_t = np.linalg.norm(F_target, axis=1, keepdims=True)
    unit_t = np.divide(F_target, n_t, out=np.zeros_like(F_target), where=n_t > 0)
    dot = ad.tsum(ad.mul(F_hat, unit_t), axis=1, keepdims=True)
    n_hat = ad.sqrt(ad.add(ad.tsum(ad.mul(F_hat, F_hat), axis=1, keepdims=True), 1e-30))
    cos = ad.div(dot, n_hat)
    return ad.sub(1.0, ad.mean(cos)).reshape(())


@dataclass
class DepthTerms:
    total: ad.Tensor
    silog: ad.Tensor
    l1: ad.Tensor


def depth_loss(D, D_hat, beta=BETA):
    """SILog + beta * L1 over pixels where both depths are positive."""
    D = np.asarray(D, dtype=np.float64).ravel()
    D_hat = ad.as_tensor(D_hat).reshape(-1)
    valid = (D > 0) & (D_hat.data > 0)
    T = int(np.count_nonzero(valid))
    if T == 0:
        zero = ad.Tensor(0.0)
        return DepthTerms(zero, zero, zero)
    idx = np.flatnonzero(valid)
    d_hat = ad.index(D_hat, idx)
    delta = ad.sub(np.log(D[idx]), ad.log(d_hat))
    mean_sq = ad.mean(ad.mul(delta, delta))
    m = ad.mean(delta)
    silog = ad.sub(mean_sq, ad.mul(m, m))
    l1 = ad.mean(ad.absolute(ad.sub(D[idx], d_hat)))
    return DepthTerms(ad.add(silog, ad.mul(l1, beta)), silog, l1)


def seg_loss(labels, logits, ignore_index=IGNORE):
    """Pixelwise cross-entropy; pixels labelled ``ignore_index`` are skipped."""
    labels = np.asarray(labels).ravel()
    logits = ad.as_tensor(logits)
    keep = np.flatnonzero(labels != ignore_index)
    if keep.size == 0:
        return ad.Tensor(0.0)
    logp = ad.log_softmax(ad.index(logits, keep), axis=-1)
    picked = ad.index(logp, (np.arange(keep.size), labels[keep].astype(np.int64)))
    return ad.neg(ad.mean(picked))
