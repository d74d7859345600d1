"""Release gate: one test per acceptance criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import json
import time
import zlib

import numpy as np
import pytest

from conftest import check_grad, micro_trainer, network_fd_error
from gausstr import autodiff as ad
from gausstr.ablation import QUERY_SWEEP, query_sweep, seg_aug_sweep
from gausstr.config import RunConfig
from gausstr.gaussians import GaussianSet
from gausstr.geometry import Camera, assemble_covariance, project, quat_to_rotmat, unproject
from gausstr.losses import depth_loss, feat_loss, seg_loss
from gausstr.network import GaussTR
from gausstr.occupancy import iou, voxelize, voxelize_bruteforce
from gausstr.renderer import _rasterize, render, render_bruteforce
from gausstr.synthetic import ground_truth_grid
from gausstr.training import Trainer, net_config, reconstructed_features
from test_autodiff import OPS, _shape
from test_occupancy import SPEC16, _protos, _random_set
from test_renderer import _cam, _fd_case, _scene


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    for name, (sample, op) in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(100):
            arrays = sample(rng, _shape(rng))
            w = rng.normal(size=op(*[ad.Tensor(a) for a in arrays]).data.shape)
            err = check_grad(lambda *t: ad.tsum(ad.mul(op(*t), w)), arrays)
            assert err < 1e-6, f"{name}: {err:.2e}"
    rng = np.random.default_rng(7)
    for normalized in (True, False):
        for _ in range(10):
            assert _fd_case(rng, normalized) < 1e-4
    tr = micro_trainer()
    assert network_fd_error(tr, sorted(tr.all_params()), max_entries=4) < 1e-3
    assert time.perf_counter() - t0 < 120


def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        size = int(rng.integers(20, 50))
        cam = _cam(size, rng.uniform(10, 40))
        args = _scene(rng, int(rng.integers(1, 40)), size)
        tiled, _ = _rasterize(*args, cam)
        brute = render_bruteforce(*args, cam)
        for a, b in ((tiled.feat, brute.feat), (tiled.depth, brute.depth), (tiled.trans, brute.trans)):
            assert np.array_equal(a, b)
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        gs, protos, tau = _random_set(rng, 10), _protos(seed=seed), rng.uniform(0.01, 0.3)
        assert np.array_equal(voxelize(gs, protos, SPEC16, tau).classes,
                              voxelize_bruteforce(gs, protos, SPEC16, tau).classes)
    assert time.perf_counter() - t0 < 120


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(0)
    for _ in range(200):
        D, D_hat, c = rng.uniform(0.5, 20, 30), rng.uniform(0.5, 20, 30), rng.uniform(0.1, 10)
        base = depth_loss(D, ad.Tensor(D_hat)).silog.item()
        assert abs(depth_loss(D, ad.Tensor(c * D_hat)).silog.item() - base) <= 1e-12
    assert abs(depth_loss([2.0, 4.0], ad.Tensor(np.array([3.0, 3.0])), beta=0.2).total.item() - 0.3201) <= 1e-4
    F = rng.normal(size=(10, 6))
    assert abs(feat_loss(F, ad.Tensor(F.copy())).item()) <= 1e-12
    assert feat_loss([[1.0, 0.0]], ad.Tensor(np.array([[0.0, 1.0]]))).item() == 1.0
    for n_c in (2, 3, 7):
        assert abs(seg_loss(np.arange(4) % n_c, ad.Tensor(np.zeros((4, n_c)))).item() - np.log(n_c)) <= 1e-9


def test_criterion_4_geometry():
    rng = np.random.default_rng(0)
    for _ in range(5):
        f = rng.uniform(100, 800)
        K = np.array([[f, 0, rng.uniform(100, 300)], [0, f * rng.uniform(0.9, 1.1), rng.uniform(100, 200)], [0, 0, 1]])
        q = rng.normal(size=4)
        E = np.eye(4)
        E[:3, :3], E[:3, 3] = quat_to_rotmat(q), rng.normal(size=3)
        cam = Camera(K, E, 400, 300)
        p = rng.uniform(0, 1, (1000, 2)) * [400, 300]
        uv, _, ok = project(unproject(p, rng.uniform(0.2, 10, 1000), cam), cam)
        assert ok.all() and np.abs(uv - p).max() < 1e-9
    assert np.abs(assemble_covariance([1, 2, 3], [1, 0, 0, 0]) - np.diag([1, 4, 9])).max() <= 1e-9
    rz90 = [np.sqrt(0.5), 0, 0, np.sqrt(0.5)]
    assert np.abs(assemble_covariance([2, 1, 1], rz90) - np.diag([1, 4, 1])).max() <= 1e-9
    for q in rng.normal(size=(1000, 4)) * rng.uniform(1e-2, 1e2, (1000, 1)):
        R = quat_to_rotmat(q)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12 and abs(np.linalg.det(R) - 1) < 1e-12


def test_criterion_5_synthetic_overfit():
    cfg = RunConfig(queries_per_view=64, n_views=2, C=32, C_R=16, steps=2000, lr=2e-4, log_every=0)
    t0 = time.perf_counter()
    tr = Trainer(cfg)
    tr.run()
    data = tr.dataset[0]
    gt = ground_truth_grid(data.scene)
    gs = tr.predict(data)
    pred = voxelize(gs, data.scene.text_prototypes(), gt.spec, cfg.tau_occ,
                    feat=reconstructed_features(gs, tr.basis))
    m = iou(pred, gt, data.scene.class_names)
    print(f"binary IoU {m['binary_iou']:.4f}  mIoU {m['miou']:.4f}  {time.perf_counter() - t0:.0f}s")
    assert time.perf_counter() - t0 < 15 * 60
    assert m["binary_iou"] >= 0.5, m
    assert m["miou"] >= 0.5, m


SWEEP_KEYS = {"binary_iou", "per_class", "miou", "config_hash", "data_hash", "forced", "overrides"}


def _check_sweep(summary, out, names):
    assert [r["variant"] for r in summary["variants"]] == names
    for row in summary["variants"]:
        m = json.loads((out / row["variant"] / "metrics.json").read_text())
        assert set(m) == SWEEP_KEYS and m["data_hash"] == summary["data_hash"] and not m["forced"]
        assert 0.0 <= m["binary_iou"] <= 1.0 and 0.0 <= m["miou"] <= 1.0
    assert len({r["config_hash"] for r in summary["variants"]}) == len(names)


def test_criterion_6_ablation_harness(tmp_path):
    small = dict(C=16, C_R=8, layers=1, image_height=96, image_width=160, render_downsample=8, steps=2)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(small))
    out = tmp_path / "queries"
    summary = query_sweep(out, config=cfg)
    _check_sweep(summary, out, [f"queries_{n}" for n in QUERY_SWEEP])
    from gausstr.store import load_dataset

    data = load_dataset(out / "data")[0][0]
    counts = [len(GaussTR.load(out / f"queries_{n}" / "run" / "checkpoint")
                  .predict(data.features, data.depths, data.scene.cameras)) for n in QUERY_SWEEP]
    assert counts == list(QUERY_SWEEP)
    out = tmp_path / "seg"
    summary = seg_aug_sweep(out, config=cfg)
    _check_sweep(summary, out, ["seg_aug_off", "seg_aug_on"])
    cols = [(out / v / "run" / "loss.csv").read_text().splitlines()[1] for v in ("seg_aug_off", "seg_aug_on")]
    assert cols[0] == cols[1] and "seg" in cols[0]


def test_criterion_7_zero_init_identity():
    tr = Trainer(RunConfig(C=32, C_R=8, queries_per_view=64, image_height=96, image_width=160,
                           render_downsample=8, steps=0))
    data = tr.dataset[0]
    out = GaussTR(net_config(tr.cfg)).forward(data.features, data.depths, data.scene.cameras)
    assert np.array_equal(out.mu.data, out.init_mu)
    cam = Camera(np.array([[16.0, 0, 8], [0, 16.0, 8], [0, 0, 1]]), np.eye(4), 16, 16)
    rng = np.random.default_rng(0)
    for _ in range(20):
        col, row, z = int(rng.integers(0, 16)), int(rng.integers(0, 16)), rng.uniform(0.5, 30)
        mu = np.array([(col + 0.5 - 8) * z / 16, (row + 0.5 - 8) * z / 16, z])
        gs = GaussianSet(mu[None], np.full((1, 3), 1e-3 * z), np.array([[1.0, 0, 0, 0]]), np.ones(1),
                         np.ones((1, 2)), np.zeros(1, dtype=np.int64))
        view = render(gs, cam, downsample=1)
        assert abs(view.depth[row, col] - z) <= 1e-9
