"""Differentiable tile-based splatting of Gaussian features and depth.

Projection uses the local-affine (EWA) approximation
``cov2d = J W Sigma W^T J^T + eps I``.  Gaussians are globally depth-sorted
per view, binned into 16x16 tiles by their 3-sigma extent, and composited
front to back.  Each Gaussian's contribution is truncated at Mahalanobis
distance 3, which is what makes tiled and brute-force rendering identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import _raster
from . import autodiff as ad
from .geometry import Z_NEAR, normalize_quat, quat_to_rotmat

COV_EPS = 0.3  # px^2
DEFAULT_DOWNSAMPLE = 16
_BIN_MARGIN = 1.0  # px of slack around the 3-sigma disk


def set_threads(n):
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class ProjectedGaussian:
    mu2d: np.ndarray
    cov2d: np.ndarray
    z: float
    radius: float


@dataclass
class RenderedView:
    feat: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W)
    trans: np.ndarray  # (H, W)


def render_camera(cam, render_size=None, downsample=DEFAULT_DOWNSAMPLE):
    if render_size is None:
        render_size = (int(round(cam.height / downsample)), int(round(cam.width / downsample)))
    h, w = render_size
    return cam.resized(w, h)


def project_all(mu, scale, rot, cam, eps=COV_EPS, z_near=Z_NEAR):
    """Vectorized EWA projection.  Returns a dict of per-Gaussian arrays.

    ``visible`` is False for Gaussians behind z_near or whose 3-sigma disk
    misses the image; those are never rasterized.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    m = len(mu)
    Rw, tw = cam.rotation, cam.translation
    t = mu @ Rw.T + tw
    z = t[:, 2]
    valid = z > z_near
    zs = np.where(valid, z, 1.0)
    fx, fy = cam.fx, cam.fy
    uv = np.stack([fx * t[:, 0] / zs + cam.cx, fy * t[:, 1] / zs + cam.cy], axis=1)

    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t[:, 0] / zs ** 2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t[:, 1] / zs ** 2
    Tm = J @ Rw

    qn = normalize_quat(np.asarray(rot, dtype=np.float64).reshape(-1, 4))
    Rq = quat_to_rotmat(qn)
    S = np.asarray(scale, dtype=np.float64).reshape(-1, 3)
    M = Rq * S[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    cov = Tm @ sigma @ np.swapaxes(Tm, 1, 2)
    cov[:, 0, 0] += eps
    cov[:, 1, 1] += eps
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    reach = radius + _BIN_MARGIN
    on_image = ((uv[:, 0] + reach > 0) & (uv[:, 0] - reach < cam.width)
                & (uv[:, 1] + reach > 0) & (uv[:, 1] - reach < cam.height))
    visible = valid & on_image
    return dict(t=t, z=z, uv=uv, J=J, Tm=Tm, qn=qn, Rq=Rq, M=M, sigma=sigma, S=S,
                cov=cov, conic=conic, radius=radius, valid=valid, visible=visible,
                rot_norm=np.linalg.norm(np.asarray(rot, dtype=np.float64).reshape(-1, 4), axis=1))


def project_gaussian(g, cam, eps=COV_EPS, z_near=Z_NEAR):
    """Project one Gaussian; None when culled."""
    p = project_all(np.reshape(g.mu3d, (1, 3)), np.reshape(g.scale, (1, 3)),
                    np.reshape(g.rot, (1, 4)), cam, eps, z_near)
    if not p["visible"][0]:
        return None
    return ProjectedGaussian(p["uv"][0], p["cov"][0], float(p["z"][0]), float(p["radius"][0]))


def depth_order(proj):
    """Indices of visible Gaussians sorted by camera z, ties broken by index."""
    idx = np.flatnonzero(proj["visible"])
    return idx[np.argsort(proj["z"][idx], kind="stable")]


def _tile_rects(proj, tiles_x, tiles_y):
    reach = proj["radius"] + _BIN_MARGIN
    uv = np.where(proj["visible"][:, None], proj["uv"], 0.0)
    T = _raster.TILE
    x0 = np.clip(np.floor((uv[:, 0] - reach) / T), 0, tiles_x)
    x1 = np.clip(np.floor((uv[:, 0] + reach) / T) + 1, 0, tiles_x)
    y0 = np.clip(np.floor((uv[:, 1] - reach) / T), 0, tiles_y)
    y1 = np.clip(np.floor((uv[:, 1] + reach) / T) + 1, 0, tiles_y)
    return np.stack([x0, y0, x1, y1], axis=1).astype(np.int64)


class RasterState:
    """Everything the backward pass needs from a forward render."""

    def __init__(self, proj, cam, opac, feat, H, W, ptr, ids, tiles_x, T, last, w_acc, depth,
                 raw_depth):
        self.proj, self.cam = proj, cam
        self.opac, self.feat = opac, feat
        self.H, self.W = H, W
        self.ptr, self.ids, self.tiles_x = ptr, ids, tiles_x
        self.T, self.last = T, last
        self.w_acc, self.depth, self.raw_depth = w_acc, depth, raw_depth


def _with_weight_channel(feat, n):
    # a constant channel makes the kernel also accumulate sum(w)
    feat = np.asarray(feat, dtype=np.float64).reshape(n, -1)
    return np.ascontiguousarray(np.concatenate([feat, np.ones((n, 1))], axis=1))


def _normalize_depth(out_f, out_d):
    """Split off the weight channel; depth becomes the weight-normalized blend."""
    w_acc = out_f[..., -1].copy()
    depth = np.divide(out_d, w_acc, out=np.zeros_like(out_d), where=w_acc > 0)
    return np.ascontiguousarray(out_f[..., :-1]), depth, w_acc


def _rasterize(mu, scale, rot, opac, feat, cam, eps=COV_EPS, z_near=Z_NEAR):
    """Forward render in ``cam``'s own pixel grid; returns (RenderedView, RasterState)."""
    H, W = cam.height, cam.width
    opac = np.ascontiguousarray(np.asarray(opac, dtype=np.float64).ravel())
    feat = _with_weight_channel(feat, len(opac))
    C = feat.shape[1]
    proj = project_all(mu, scale, rot, cam, eps, z_near)
    tiles_x = -(-W // _raster.TILE)
    tiles_y = -(-H // _raster.TILE)
    order = depth_order(proj)
    ptr, ids = _raster.bin_tiles(order, _tile_rects(proj, tiles_x, tiles_y), tiles_x * tiles_y, tiles_x)
    out_f = np.zeros((H, W, C))
    out_d = np.zeros((H, W))
    out_T = np.ones((H, W))
    last = np.full((H, W), -1, dtype=np.int64)
    _raster.raster_tiled(H, W, tiles_x, ptr, ids, np.ascontiguousarray(proj["uv"]),
                         np.ascontiguousarray(proj["conic"]), opac, feat,
                         np.ascontiguousarray(proj["z"]), out_f, out_d, out_T, last)
    f, depth, w_acc = _normalize_depth(out_f, out_d)
    state = RasterState(proj, cam, opac, feat, H, W, ptr, ids, tiles_x, out_T, last, w_acc, depth,
                        out_d)
    return RenderedView(f, depth, out_T), state


def render_bruteforce(mu, scale, rot, opac, feat, cam, eps=COV_EPS, z_near=Z_NEAR):
    """Reference renderer: every pixel walks the full depth-sorted list."""
    H, W = cam.height, cam.width
    opac = np.ascontiguousarray(np.asarray(opac, dtype=np.float64).ravel())
    feat = _with_weight_channel(feat, len(opac))
    proj = project_all(mu, scale, rot, cam, eps, z_near)
    order = depth_order(proj).astype(np.int64)
    out_f = np.zeros((H, W, feat.shape[1]))
    out_d = np.zeros((H, W))
    out_T = np.ones((H, W))
    _raster.raster_brute(H, W, order, np.ascontiguousarray(proj["uv"]),
                         np.ascontiguousarray(proj["conic"]), opac, feat,
                         np.ascontiguousarray(proj["z"]), out_f, out_d, out_T)
    f, depth, _ = _normalize_depth(out_f, out_d)
    return RenderedView(f, depth, out_T)


def render(gset, cam, render_size=None, feat=None, downsample=DEFAULT_DOWNSAMPLE):
    """Render a GaussianSet into ``cam`` at ``render_size`` (default: image / 16).

    ``feat`` overrides the per-Gaussian features (e.g. PCA-reduced ones).
    """
    cam_r = render_camera(cam, render_size, downsample)
    f = gset.feat if feat is None else feat
    if len(gset) == 0:
        C = np.shape(f)[1] if np.ndim(f) == 2 else 0
        return RenderedView(np.zeros((cam_r.height, cam_r.width, C)),
                            np.zeros((cam_r.height, cam_r.width)),
                            np.ones((cam_r.height, cam_r.width)))
    opac = np.where(gset.active, gset.alpha, 0.0)
    view, _ = _rasterize(gset.mu3d, gset.scale, gset.rot, opac, f, cam_r)
    return view


def _quat_backward(qn, gR):
    w, x, y, z = qn.T
    g = gR.reshape(-1, 9).T
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = g
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=1)


def projection_backward(proj, cam, g_uv, g_conic, g_z):
    """Chain screen-space gradients back to (mu3d, scale, rot)."""
    t, zs = proj["t"], np.where(proj["valid"], proj["z"], 1.0)
    fx, fy = cam.fx, cam.fy
    conic = proj["conic"]
    Q = np.stack([np.stack([conic[:, 0], conic[:, 1]], 1),
                  np.stack([conic[:, 1], conic[:, 2]], 1)], 1)
    Gq = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], 1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], 1)], 1)
    g_cov = -Q @ Gq @ Q
    Tm, sigma = proj["Tm"], proj["sigma"]
    g_sigma = np.swapaxes(Tm, 1, 2) @ g_cov @ Tm
    g_Tm = 2.0 * g_cov @ Tm @ sigma
    g_J = g_Tm @ cam.rotation.T

    tx, ty = t[:, 0], t[:, 1]
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_J[:, 0, 2] * (-fx / zs ** 2) + g_uv[:, 0] * fx / zs
    g_t[:, 1] = g_J[:, 1, 2] * (-fy / zs ** 2) + g_uv[:, 1] * fy / zs
    g_t[:, 2] = (g_J[:, 0, 0] * (-fx / zs ** 2) + g_J[:, 0, 2] * (2 * fx * tx / zs ** 3)
                 + g_J[:, 1, 1] * (-fy / zs ** 2) + g_J[:, 1, 2] * (2 * fy * ty / zs ** 3)
                 - g_uv[:, 0] * fx * tx / zs ** 2 - g_uv[:, 1] * fy * ty / zs ** 2
                 + g_z)
    g_mu = g_t @ cam.rotation

    M, Rq, S = proj["M"], proj["Rq"], proj["S"]
    g_M = 2.0 * g_sigma @ M
    g_S = np.sum(g_M * Rq, axis=1)
    g_qn = _quat_backward(proj["qn"], g_M * S[:, None, :])
    qn = proj["qn"]
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / proj["rot_norm"][:, None]

    dead = ~proj["visible"]
    for g in (g_mu, g_S, g_q):
        g[dead] = 0.0
    return g_mu, g_S, g_q


def render_backward(state, g_feat, g_depth, normalized=True):
    """Analytic gradients of a forward render.

    ``g_depth`` is the gradient w.r.t. the weight-normalized depth, or w.r.t.
    the raw blend sum(z w) when ``normalized`` is False.  Returns a dict with
    keys mu3d, scale, rot, alpha, feat (same layouts as the forward inputs).
    Culled Gaussians receive zeros.
    """
    m, C = state.feat.shape
    g_depth = np.asarray(g_depth, dtype=np.float64)
    g_w = np.zeros_like(g_depth)
    if normalized:
        w = state.w_acc
        pos = w > 0
        g_depth = np.divide(g_depth, w, out=np.zeros_like(g_depth), where=pos)
        g_w = np.where(pos, -g_depth * state.depth, 0.0)
    g_feat = np.concatenate([np.asarray(g_feat, dtype=np.float64), g_w[..., None]], axis=2)
    n_tiles = len(state.ptr) - 1
    buf_uv = np.zeros((n_tiles, m, 2))
    buf_conic = np.zeros((n_tiles, m, 3))
    buf_opac = np.zeros((n_tiles, m))
    buf_feat = np.zeros((n_tiles, m, C))
    buf_depth = np.zeros((n_tiles, m))
    proj = state.proj
    _raster.raster_backward(
        state.H, state.W, state.tiles_x, state.ptr, state.ids,
        np.ascontiguousarray(proj["uv"]), np.ascontiguousarray(proj["conic"]),
        state.opac, state.feat, np.ascontiguousarray(proj["z"]), state.T, state.last,
        np.ascontiguousarray(g_feat, dtype=np.float64), np.ascontiguousarray(g_depth, dtype=np.float64),
        buf_uv, buf_conic, buf_opac, buf_feat, buf_depth)

    def reduce(buf):
        out = np.zeros(buf.shape[1:])
        for b in buf:  # fixed tile order
            out += b
        return out

    g_uv, g_conic, g_depth_z = reduce(buf_uv), reduce(buf_conic), reduce(buf_depth)
    g_mu, g_S, g_q = projection_backward(proj, state.cam, g_uv, g_conic, g_depth_z)
    return {"mu3d": g_mu, "scale": g_S, "rot": g_q,
            "alpha": reduce(buf_opac), "feat": reduce(buf_feat)[:, :-1]}


def render_op(mu, scale, rot, alpha, feat, cam, normalized_depth=True):
    """Tape-recorded render in ``cam``'s pixel grid.

    Inputs are Tensors: mu (M,3), scale (M,3), rot (M,4), alpha (M,1),
    feat (M,C).  Returns (packed, trans) where packed is an (H, W, C+1)
    Tensor holding the blended features followed by depth (normalized, or
    the raw blend), and trans is a plain array (no gradient flows through
    transmittance).
    """
    mu, scale, rot, alpha, feat = (ad.as_tensor(x) for x in (mu, scale, rot, alpha, feat))
    view, state = _rasterize(mu.data, scale.data, rot.data, alpha.data, feat.data, cam)
    C = feat.shape[1]
    depth = view.depth if normalized_depth else state.raw_depth
    packed = np.concatenate([view.feat, depth[..., None]], axis=2)

    def bw(g):
        grads = render_backward(state, g[..., :C], g[..., C], normalized_depth)
        return (grads["mu3d"], grads["scale"], grads["rot"],
                grads["alpha"].reshape(alpha.shape), grads["feat"])

    out = ad.record_op("render", (mu, scale, rot, alpha, feat), packed, bw)
    return out, view.trans
