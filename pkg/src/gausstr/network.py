"""GaussTR transformer: deformable cross-attention, 3D-aware self-attention and
an MLP Gaussian head, stacked L times over a set of Gaussian queries."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError
from .gaussians import GaussianSet, init_from_depth, refine, stratified_pixels
from .tensor_io import load_tensor, save_tensor


@dataclass(frozen=True)
class NetConfig:
    C: int = 256
    queries_per_view: int = 300
    layers: int = 3
    heads: int = 4
    levels: int = 2
    points: int = 4
    delta_mu_max: float = 2.0
    s0_factor: float = 0.05
    s_min: float = 0.01
    s_max: float = 10.0
    alpha_bias: float = 2.0
    feat_init_std: float = 0.02
    zero_init_head: bool = False
    bounds: tuple = ((-8.0, 8.0), (-8.0, 8.0), (0.0, 3.2))
    seed: int = 0

    def __post_init__(self):
        if self.C % self.heads:
            raise DimensionError(f"C={self.C} must be divisible by heads={self.heads}")


def _linear_init(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(cfg):
    """Seeded parameter dictionary {name: Tensor(requires_grad=True)}."""
    rng = np.random.default_rng(cfg.seed)
    C, H, L, K = cfg.C, cfg.heads, cfg.levels, cfg.points
    p = {}

    def lin(name, fan_in, fan_out, zero=False, bias=None):
        p[f"{name}.W"] = np.zeros((fan_in, fan_out)) if zero else _linear_init(rng, fan_in, fan_out)
        p[f"{name}.b"] = np.zeros((1, fan_out)) if bias is None else np.asarray(bias).reshape(1, fan_out)

    def norm(name):
        p[f"{name}.gamma"] = np.ones((1, C))
        p[f"{name}.beta"] = np.zeros((1, C))

    p["query_embed"] = rng.normal(0.0, 1.0, size=(cfg.queries_per_view, C))
    # ring pattern for sampling offsets; weights start at zero
    theta = np.arange(H) * (2.0 * np.pi / H)
    ring = np.stack([np.cos(theta), np.sin(theta)], -1)
    ring = ring / np.abs(ring).max(-1, keepdims=True)
    off_bias = np.tile(ring[:, None, None, :], (1, L, K, 1)) * np.arange(1, K + 1)[None, None, :, None]
    for i in range(cfg.layers):
        pre = f"layers.{i}"
        lin(f"{pre}.deform.offset", C, H * L * K * 2, zero=True, bias=off_bias.ravel())
        lin(f"{pre}.deform.attn", C, H * L * K, zero=True)
        lin(f"{pre}.deform.value", C, C)
        lin(f"{pre}.deform.out", C, C)
        norm(f"{pre}.deform.norm")
        for n in ("q", "k", "v", "out"):
            lin(f"{pre}.self.{n}", C, C)
        norm(f"{pre}.self.norm")
        lin(f"{pre}.head.fc1", C, C)
        lin(f"{pre}.head.fc2", C, C)
        z = cfg.zero_init_head
        lin(f"{pre}.head.dmu", C, 3, zero=True)
        lin(f"{pre}.head.drot", C, 4, zero=True)
        lin(f"{pre}.head.dscale", C, 3, zero=True)
        lin(f"{pre}.head.alpha", C, 1, zero=True, bias=None if z else [cfg.alpha_bias])
        p[f"{pre}.head.feat.W"] = (np.zeros((C, C)) if z
                                   else rng.normal(0.0, cfg.feat_init_std, size=(C, C)))
        p[f"{pre}.head.feat.b"] = np.zeros((1, C))
    return {k: ad.Tensor(v, requires_grad=True) for k, v in p.items()}


def linear(x, params, name):
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def build_pyramid(feat, levels=2):
    """Level 0 is the map itself; each further level is 2x2 average pooled."""
    out = [np.asarray(feat, dtype=np.float64)]
    for _ in range(levels - 1):
        f = out[-1]
        h, w = (f.shape[0] // 2) * 2, (f.shape[1] // 2) * 2
        f = f[:h, :w]
        out.append(0.25 * (f[0::2, 0::2] + f[1::2, 0::2] + f[0::2, 1::2] + f[1::2, 1::2]))
    return out


def bilinear_gather(value, loc):
    """Sample value[Hl, Wl, nH, D] at loc[P, nH, K, 2] (level pixel coords, x first).

    Pixel centers sit at integer + 0.5; samples outside the map read zeros.
    Returns a (P, nH, K, D) Tensor, differentiable in both value and loc.
    """
    value, loc = ad.as_tensor(value), ad.as_tensor(loc)
    Hl, Wl, nH, D = value.shape
    x = loc.data[..., 0] - 0.5
    y = loc.data[..., 1] - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx, wy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    head = np.arange(nH)[None, :, None]

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < Wl) & (yi >= 0) & (yi < Hl)
            xc, yc = np.clip(xi, 0, Wl - 1), np.clip(yi, 0, Hl - 1)
            v = value.data[yc, xc, np.broadcast_to(head, xc.shape)] * ok[..., None]
            corners.append((dy, dx, xc, yc, ok, v))
    (_, _, _, _, _, v00), (_, _, _, _, _, v01), (_, _, _, _, _, v10), (_, _, _, _, _, v11) = corners
    wxe, wye = wx[..., None], wy[..., None]
    out = (1 - wye) * ((1 - wxe) * v00 + wxe * v01) + wye * ((1 - wxe) * v10 + wxe * v11)

    def bw(g):
        g_val = np.zeros(value.shape)
        for dy, dx, xc, yc, ok, _ in corners:
            wgt = (wy if dy else 1 - wy) * (wx if dx else 1 - wx) * ok
            np.add.at(g_val, (yc, xc, np.broadcast_to(head, xc.shape)), g * wgt[..., None])
        gx = np.sum(g * ((1 - wye) * (v01 - v00) + wye * (v11 - v10)), axis=-1)
        gy = np.sum(g * ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01)), axis=-1)
        return g_val, np.stack([gx, gy], axis=-1)

    return ad.record_op("bilinear_gather", (value, loc), out, bw)


def deform_attn(q, params, prefix, cfg, ref_norm, pyramids, n_per_view):
    """Deformable cross-attention of queries over each query's own view.

    ``ref_norm`` holds (M, 2) reference positions in [0,1]^2, ``pyramids`` one
    list of (Hl, Wl, C) arrays per view.  Queries are view-major.
    """
    C, nH, L, K = cfg.C, cfg.heads, cfg.levels, cfg.points
    Dh = C // nH
    M = q.shape[0]
    off = linear(q, params, f"{prefix}.offset").reshape(M, nH, L, K, 2)
    att = ad.softmax(linear(q, params, f"{prefix}.attn").reshape(M, nH, L * K), axis=-1)
    att = att.reshape(M, nH, L, K, 1)
    per_view = []
    for v, pyramid in enumerate(pyramids):
        rows = slice(v * n_per_view, (v + 1) * n_per_view)
        acc = None
        for l, level in enumerate(pyramid):
            Hl, Wl = level.shape[:2]
            value = linear(ad.Tensor(level.reshape(Hl * Wl, C)), params, f"{prefix}.value")
            value = value.reshape(Hl, Wl, nH, Dh)
            base = ref_norm[rows] * np.array([Wl, Hl])
            loc = ad.add(off[rows, :, l], base[:, None, None, :])
            samp = bilinear_gather(value, loc)
            part = ad.tsum(ad.mul(samp, att[rows, :, l]), axis=2)
            acc = part if acc is None else ad.add(acc, part)
        per_view.append(acc)
    mixed = ad.concat(per_view, axis=0).reshape(M, C)
    out = linear(mixed, params, f"{prefix}.out")
    return ad.layer_norm(ad.add(q, out), params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])


def positional_encoding(mu3d, C, bounds):
    """Per-axis sin/cos features of scene-normalized coordinates, truncated to C.

    Accepts an array or a Tensor and returns a Tensor, so gradients reach the
    Gaussian means that produced it.  Coordinates outside ``bounds`` clamp.
    """
    mu = ad.as_tensor(mu3d)
    mu = mu.reshape(-1, 3)
    n = mu.shape[0]
    lo = np.array([[b[0] for b in bounds]])
    hi = np.array([[b[1] for b in bounds]])
    x = ad.clip(ad.mul(ad.sub(mu, lo), 1.0 / (hi - lo)), 0.0, 1.0)
    per_axis = -(-C // 3)
    n_freq = -(-C // 6)
    freqs = ((2.0 ** np.arange(n_freq)) * np.pi).reshape(1, 1, n_freq)
    ang = ad.mul(x.reshape(n, 3, 1), freqs)
    enc = ad.concat([ad.sin(ang).reshape(n, 3, n_freq, 1), ad.cos(ang).reshape(n, 3, n_freq, 1)], axis=3)
    enc = enc.reshape(n, 3, 2 * n_freq)[:, :, :per_axis]
    return enc.reshape(n, 3 * per_axis)[:, :C]


def self_attn_3d(q, params, prefix, cfg, pe):
    """Multi-head attention over all queries; PE enters queries and keys only."""
    M, C = q.shape
    nH = cfg.heads
    Dh = C // nH
    x = ad.add(q, pe)

    def heads(t):
        return ad.transpose(t.reshape(M, nH, Dh), (1, 0, 2))

    Q = heads(linear(x, params, f"{prefix}.q"))
    Kt = heads(linear(x, params, f"{prefix}.k"))
    V = heads(linear(q, params, f"{prefix}.v"))
    scores = ad.mul(ad.matmul(Q, ad.transpose(Kt, (0, 2, 1))), 1.0 / np.sqrt(Dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), V)
    ctx = ad.transpose(ctx, (1, 0, 2)).reshape(M, C)
    out = linear(ctx, params, f"{prefix}.out")
    return ad.layer_norm(ad.add(q, out), params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])


def gaussian_head(q, params, prefix, cfg):
    """Returns dict dmu (M,3), drot (M,4), dscale (M,3), alpha (M,1), feat (M,C)."""
    h = ad.relu(linear(q, params, f"{prefix}.fc1"))
    h = ad.relu(linear(h, params, f"{prefix}.fc2"))
    return {
        "dmu": ad.mul(ad.tanh(linear(h, params, f"{prefix}.dmu")), cfg.delta_mu_max),
        "drot": linear(h, params, f"{prefix}.drot"),
        "dscale": linear(h, params, f"{prefix}.dscale"),
        "alpha": ad.sigmoid(linear(h, params, f"{prefix}.alpha")),
        "feat": linear(h, params, f"{prefix}.feat"),
    }


def snap_to_grid(ref_norm, grid_shape=None):
    """Move normalized positions to the centers of an (h, w) pixel grid.

    Snapped queries read their depth exactly where it was measured.
    """
    if grid_shape is None:
        return ref_norm
    size = np.array([grid_shape[1], grid_shape[0]], dtype=np.float64)
    return (np.floor(np.clip(ref_norm, 0.0, 1.0 - 1e-12) * size) + 0.5) / size


@dataclass
class NetOutput:
    mu: ad.Tensor
    rot: ad.Tensor
    scale: ad.Tensor
    alpha: ad.Tensor  # (M, 1), zero for inactive queries
    feat: ad.Tensor
    active: np.ndarray
    view: np.ndarray
    init_mu: np.ndarray

    def to_gaussian_set(self):
        return GaussianSet(self.mu.data.copy(), self.scale.data.copy(), self.rot.data.copy(),
                           self.alpha.data[:, 0].copy(), self.feat.data.copy(),
                           self.view.copy(), self.active.copy())


class GaussTR:
    """Parameters plus the forward pass; gradients come from the active tape."""

    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        rng = np.random.default_rng(cfg.seed + 7919)
        # fixed reference positions, shared by all views, in [0,1]^2
        self.ref_norm = stratified_pixels(cfg.queries_per_view, 1.0, 1.0, rng)

    def query_pixels(self, cam, grid_shape=None):
        """Query pixels in ``cam``; with ``grid_shape`` (h, w) they snap to that grid's centers."""
        return snap_to_grid(self.ref_norm, grid_shape) * np.array([cam.width, cam.height])

    def forward(self, features, depths, cams):
        """features/depths: per-view (Hf, Wf, C) / (Hd, Wd) arrays; cams at image resolution."""
        cfg = self.cfg
        if not (len(features) == len(depths) == len(cams)) or not cams:
            raise DimensionError("features, depths and cams must list the same non-empty set of views")
        N, V = cfg.queries_per_view, len(cams)
        for f in features:
            if f is None or np.shape(f)[-1] != cfg.C:
                raise DimensionError(f"feature maps must have C={cfg.C} channels")
        mus, scales, rots, actives = [], [], [], []
        for cam, depth in zip(cams, depths):
            mu, S0, R0, act = init_from_depth(self.query_pixels(cam, np.shape(depth)), depth, cam,
                                              cfg.s0_factor)
            mus.append(mu)
            scales.append(np.clip(S0, cfg.s_min, cfg.s_max))
            rots.append(R0)
            actives.append(act)
        init_mu = np.concatenate(mus)
        mu = ad.Tensor(init_mu)
        scale = ad.Tensor(np.concatenate(scales))
        rot = ad.Tensor(np.concatenate(rots))
        active = np.concatenate(actives)
        ref = np.concatenate([snap_to_grid(self.ref_norm, np.shape(d)) for d in depths])
        pyramids = [build_pyramid(f, cfg.levels) for f in features]
        q = ad.index(self.params["query_embed"], np.tile(np.arange(N), V))
        alpha = feat = None
        for i in range(cfg.layers):
            pre = f"layers.{i}"
            q = deform_attn(q, self.params, f"{pre}.deform", cfg, ref, pyramids, N)
            q = self_attn_3d(q, self.params, f"{pre}.self", cfg,
                             positional_encoding(mu, cfg.C, cfg.bounds))
            out = gaussian_head(q, self.params, f"{pre}.head", cfg)
            mu, rot, scale = refine(mu, rot, scale, out["dmu"], out["drot"], out["dscale"],
                                    cfg.s_min, cfg.s_max)
            alpha, feat = out["alpha"], out["feat"]
        alpha = ad.mul(alpha, active[:, None].astype(np.float64))
        view = np.repeat(np.arange(V), N)
        return NetOutput(mu, rot, scale, alpha, feat, active, view, init_mu)

    def predict(self, features, depths, cams):
        return self.forward(features, depths, cams).to_gaussian_set()

    # --- checkpoints ------------------------------------------------------

    def save(self, directory, config_hash=""):
        d = Path(directory)
        (d / "tensors").mkdir(parents=True, exist_ok=True)
        files = {}
        for name, t in self.params.items():
            fname = f"tensors/{name}.gtsr"
            save_tensor(d / fname, t.data)
            files[name] = fname
        save_tensor(d / "tensors/ref_norm.gtsr", self.ref_norm)
        cfg = asdict(self.cfg)
        manifest = {"config_hash": config_hash, "net_config": cfg, "tensors": files,
                    "buffers": {"ref_norm": "tensors/ref_norm.gtsr"},
                    "net_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint manifest in {d}: {exc}") from exc
        raw = manifest["net_config"]
        raw["bounds"] = tuple(tuple(b) for b in raw["bounds"])
        cfg = NetConfig(**raw)
        params = {n: ad.Tensor(load_tensor(d / f), requires_grad=True)
                  for n, f in manifest["tensors"].items()}
        expected = init_params(cfg)
        for n, t in expected.items():
            if n not in params or params[n].shape != t.shape:
                raise DataError(f"checkpoint tensor {n} missing or mis-shaped")
        net = cls(cfg, params)
        net.ref_norm = load_tensor(d / manifest["buffers"]["ref_norm"])
        net.manifest = manifest
        return net
