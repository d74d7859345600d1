"""Self-supervised training loop: render predicted Gaussians into the source
views and align them with oracle features and depth."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import NumericalAbort
from .gaussians import GaussianSet
from .losses import PcaBasis, depth_loss, feat_loss, pca_fit, pca_project, seg_loss
from .network import GaussTR, NetConfig, linear
from .renderer import render_op
from .synthetic import make_scene, render_views
from .occupancy import GridSpec
from .tensor_io import save_tensor

log = logging.getLogger(__name__)


@dataclass
class LossReport:
    step: int
    total: float
    feat: float
    depth: float
    silog: float
    l1: float
    seg: float

    CSV_FIELDS = ("step", "total", "feat", "silog", "l1", "seg")

    def row(self):
        return [self.step, self.total, self.feat, self.silog, self.l1, self.seg]


@dataclass
class SceneData:
    scene: object
    features: list
    depths: list
    labels: list


def net_config(cfg):
    return NetConfig(
        C=cfg.C, queries_per_view=cfg.queries_per_view, layers=cfg.layers, heads=cfg.heads,
        levels=cfg.levels, points=cfg.points, delta_mu_max=cfg.delta_mu_max,
        s0_factor=cfg.s0_factor, s_min=cfg.s_min, s_max=cfg.s_max, alpha_bias=cfg.alpha_bias,
        feat_init_std=cfg.feat_init_std, zero_init_head=cfg.zero_init_head,
        bounds=tuple(zip(cfg.grid_min, cfg.grid_max)), seed=cfg.seed)


def grid_spec(cfg):
    return GridSpec(tuple(cfg.grid_min), tuple(cfg.grid_max), cfg.voxel_size)


def build_dataset(cfg):
    out = []
    for i in range(cfg.n_scenes):
        scene = make_scene(seed=cfg.seed * 1000 + i, C=cfg.C, n_views=cfg.n_views,
                           image_size=(cfg.image_height, cfg.image_width), grid=grid_spec(cfg),
                           noise_sigma=cfg.noise_sigma, feature_downsample=cfg.render_downsample)
        views = render_views(scene, seed=cfg.seed * 1000 + i)
        out.append(SceneData(scene, [v[0] for v in views], [v[1] for v in views],
                             [v[2] for v in views]))
    return out


def fit_feature_basis(dataset, C_R, n_samples=10000, seed=0):
    """PCA over a fixed random subsample of oracle feature pixels."""
    pix = np.concatenate([f.reshape(-1, f.shape[-1]) for d in dataset for f in d.features])
    rng = np.random.default_rng(seed)
    if len(pix) > n_samples:
        pix = pix[np.sort(rng.choice(len(pix), n_samples, replace=False))]
    return pca_fit(pix, C_R)


def init_seg_head(cfg, n_classes):
    rng = np.random.default_rng(cfg.seed + 31)
    lim1 = np.sqrt(6.0 / (cfg.C_R + cfg.seg_hidden))
    lim2 = np.sqrt(6.0 / (cfg.seg_hidden + n_classes))
    p = {"seg.fc1.W": rng.uniform(-lim1, lim1, (cfg.C_R, cfg.seg_hidden)),
         "seg.fc1.b": np.zeros((1, cfg.seg_hidden)),
         "seg.fc2.W": rng.uniform(-lim2, lim2, (cfg.seg_hidden, n_classes)),
         "seg.fc2.b": np.zeros((1, n_classes))}
    return {k: ad.Tensor(v, requires_grad=True) for k, v in p.items()}


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape) for k, t in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            self.params[k] = ad.Tensor(self.params[k].data - upd, requires_grad=True)


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


class Trainer:
    """Holds the network, PCA basis, optional segmentation head and optimizer."""

    def __init__(self, cfg, dataset=None, basis=None):
        self.cfg = cfg
        self.dataset = build_dataset(cfg) if dataset is None else dataset
        self.basis = basis or fit_feature_basis(self.dataset, cfg.C_R, cfg.pca_samples, cfg.seed)
        self.net = GaussTR(net_config(cfg))
        n_classes = self.dataset[0].scene.n_classes
        self.seg = init_seg_head(cfg, n_classes) if cfg.seg_aug else {}
        self.opt = Adam(self.all_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.history = []
        self.step_count = 0

    def all_params(self):
        return {**self.net.params, **self.seg}

    def _sync(self):
        for k in self.net.params:
            self.net.params[k] = self.opt.params[k]
        for k in self.seg:
            self.seg[k] = self.opt.params[k]

    def scene_loss(self, data, seg_enabled=None):
        """Build the loss for one scene on the active tape.

        Returns (total, feat, depth, silog, l1, seg) Tensors, averaged over views.
        """
        cfg = self.cfg
        seg_on = cfg.seg_aug if seg_enabled is None else seg_enabled
        scene = data.scene
        out = self.net.forward(data.features, data.depths, scene.cameras)
        # NaN Gaussians are culled by the renderer and would otherwise look like a zero loss
        self._outputs_finite = all(np.all(np.isfinite(t.data))
                                   for t in (out.mu, out.scale, out.rot, out.alpha, out.feat))
        f_red = pca_project(out.feat, self.basis)
        terms = {k: [] for k in ("feat", "depth", "silog", "l1", "seg")}
        for v in range(len(scene.cameras)):
            cam_r = scene.feature_camera(v)
            packed, trans = render_op(out.mu, out.scale, out.rot, out.alpha, f_red, cam_r,
                                     cfg.normalized_depth)
            H, W = trans.shape
            covered = np.flatnonzero(trans.ravel() < cfg.cover_threshold)
            flat = packed.reshape(H * W, cfg.C_R + 1)
            target = pca_project(data.features[v].reshape(H * W, -1), self.basis)
            F_hat = ad.index(flat, (covered, slice(0, cfg.C_R)))
            terms["feat"].append(feat_loss(target[covered], F_hat))
            d = depth_loss(data.depths[v].ravel()[covered], ad.index(flat, (covered, cfg.C_R)), cfg.beta)
            terms["depth"].append(d.total)
            terms["silog"].append(d.silog)
            terms["l1"].append(d.l1)
            if seg_on and self.seg:
                h = ad.relu(linear(F_hat, self.seg, "seg.fc1"))
                logits = linear(h, self.seg, "seg.fc2")
                terms["seg"].append(seg_loss(data.labels[v].ravel()[covered], logits))
            else:
                terms["seg"].append(ad.Tensor(0.0))
        inv_v = 1.0 / len(scene.cameras)
        avg = {k: ad.mul(_sum(ts), inv_v) for k, ts in terms.items()}
        total = ad.add(ad.add(avg["feat"], avg["depth"]), avg["seg"])
        return total, avg

    def compute(self, indices, seg_enabled=None):
        """Loss and gradients summed over ``indices`` (fixed order), then averaged."""
        params = self.all_params()
        grads = {k: np.zeros(t.shape) for k, t in params.items()}
        sums = dict(total=0.0, feat=0.0, depth=0.0, silog=0.0, l1=0.0, seg=0.0)
        last = None
        for i in indices:
            with ad.Tape() as tape:
                total, avg = self.scene_loss(self.dataset[i], seg_enabled)
            last = (total, avg)
            if not (np.isfinite(total.item()) and self._outputs_finite):
                raise NumericalAbort(f"non-finite loss or Gaussians at step {self.step_count}",
                                     dump_path=self._dump(total, avg))
            if total._tracked:
                g = ad.backward(tape, total)
                for k, t in params.items():
                    if t in g:
                        grads[k] += g[t]
                if not all(np.all(np.isfinite(v)) for v in grads.values()):
                    raise NumericalAbort(f"non-finite gradient at step {self.step_count}",
                                         dump_path=self._dump(total, avg))
            sums["total"] += total.item()
            for k, t in avg.items():
                sums[k] += t.item()
        n = len(indices)
        grads = {k: g / n for k, g in grads.items()}
        report = {k: v / n for k, v in sums.items()}
        if n == 1:
            report["total"] = last[0].item()
        return report, grads

    def batch_indices(self, step):
        n, b = len(self.dataset), self.cfg.batch
        return [(step * b + j) % n for j in range(b)]

    def step(self):
        report, grads = self.compute(self.batch_indices(self.step_count))
        grads, gnorm = clip_grad_norm(grads, self.cfg.clip_norm)
        rep = LossReport(self.step_count, report["total"], report["feat"], report["depth"],
                         report["silog"], report["l1"], report["seg"])
        self.opt.step(grads)
        self._sync()
        self.history.append(rep)
        self.step_count += 1
        return rep

    def run(self, steps=None, csv_path=None, config_hash=""):
        steps = self.cfg.steps if steps is None else steps
        writer = fh = None
        if csv_path is not None:
            fh = open(csv_path, "w", newline="")
            fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(LossReport.CSV_FIELDS)
        try:
            for _ in range(steps):
                rep = self.step()
                if writer:
                    writer.writerow(rep.row())
                if self.cfg.log_every and rep.step % self.cfg.log_every == 0:
                    log.info("step %d total %.4f feat %.4f silog %.4f l1 %.4f seg %.4f",
                             rep.step, rep.total, rep.feat, rep.silog, rep.l1, rep.seg)
        finally:
            if fh:
                fh.close()
        return self.history

    def predict(self, data):
        """Inference-time Gaussians (segmentation head unused)."""
        return self.net.predict(data.features, data.depths, data.scene.cameras)

    def _dump(self, total, avg):
        d = Path("nan_dump")
        d.mkdir(exist_ok=True)
        for k, t in self.all_params().items():
            save_tensor(d / f"{k}.gtsr", t.data)
        (d / "losses.txt").write_text("\n".join(f"{k} {t.item()!r}" for k, t in avg.items()))
        return str(d)


def _sum(ts):
    acc = ts[0]
    for t in ts[1:]:
        acc = ad.add(acc, t)
    return acc


def reconstructed_features(gset, basis):
    """Gaussian features restricted to the supervised PCA subspace."""
    return basis.mean + pca_project(gset.feat, basis) @ basis.V_k


def train(cfg, csv_path=None, config_hash="", dataset=None):
    """Train from scratch; returns (trainer, loss history)."""
    trainer = Trainer(cfg, dataset)
    history = trainer.run(csv_path=csv_path, config_hash=config_hash)
    return trainer, history


def save_basis(directory, basis):
    d = Path(directory)
    save_tensor(d / "pca_V_k.gtsr", basis.V_k)
    save_tensor(d / "pca_mean.gtsr", basis.mean)


def load_basis(directory):
    from .tensor_io import load_tensor

    d = Path(directory)
    return PcaBasis(load_tensor(d / "pca_V_k.gtsr"), load_tensor(d / "pca_mean.gtsr"))


__all__ = ["Adam", "GaussianSet", "LossReport", "Trainer", "train", "reconstructed_features"]
