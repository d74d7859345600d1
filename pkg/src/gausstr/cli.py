"""Command-line entry point: synth, train, render, voxelize, eval.

Config keys can be given in a JSON/TOML file (``--config``) and overridden
per key with ``--key=value``.  Each output records the hash of the config
that produced it and, for derived outputs, the hash of the dataset it was
computed from (``data_hash``); ``eval`` refuses to compare grids from
different datasets unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, parse_override
from .errors import ConfigError, DataError, GaussTRError, NumericalAbort

log = logging.getLogger("gausstr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _build_parser():
    p = argparse.ArgumentParser(prog="gausstr", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (fallback: $GAUSSTR_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON or TOML config file")
        sp.add_argument("--threads", type=int, default=None, dest="sub_threads")
        return sp

    sp = add("synth", "generate synthetic scenes, oracle views and GT grids")
    sp.add_argument("--out", required=True, help="dataset directory")

    sp = add("train", "train on a dataset; writes checkpoint, PCA basis and loss CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="run directory")

    sp = add("render", "render predicted Gaussians into every view")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", help="run directory from `train`")
    sp.add_argument("--gaussians", help="saved GaussianSet directory (instead of --run)")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("voxelize", "voxelize predicted Gaussians into a GOCC grid")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", help="run directory from `train`")
    sp.add_argument("--gaussians", help="saved GaussianSet directory (instead of --run)")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--out", required=True, help="output .gocc path")

    sp = add("eval", "compare a predicted grid against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="metrics JSON path")
    sp.add_argument("--force", action="store_true", help="ignore dataset hash mismatch")
    return p


def _split_overrides(extra):
    """Turn leftover ``--key=value`` / ``--key value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 1
        key = key.replace("-", "_")
        out[key] = parse_override(key, value)
        i += 1
    return out


def resolve_config(args, overrides, base=None):
    """base (dataset config or defaults) <- --config file <- --key=value flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    return cfg.replace(**overrides) if overrides else cfg


def _threads(args):
    for n in (args.sub_threads, args.threads, os.environ.get("GAUSSTR_THREADS")):
        if n is not None:
            break
    else:
        return None
    try:
        n = int(n)
    except ValueError as exc:
        raise ConfigError(f"bad thread count {n!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


# --- commands ---------------------------------------------------------------

def cmd_synth(cfg, args):
    from .store import save_dataset
    from .training import build_dataset

    dirs = save_dataset(build_dataset(cfg), args.out, cfg)
    log.info("wrote %d scene(s) to %s (config %s)", len(dirs), args.out, cfg.config_hash())
    return EXIT_OK


def _load_data(args):
    from .store import load_dataset, load_dataset_config

    dataset, manifest = load_dataset(args.data)
    return dataset, manifest["config_hash"], load_dataset_config(args.data)


def cmd_train(cfg, args, dataset, data_hash):
    from .store import write_manifest
    from .training import Trainer, save_basis

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    trainer = Trainer(cfg, dataset)
    trainer.run(csv_path=out / "loss.csv", config_hash=h)
    trainer.net.save(out / "checkpoint", config_hash=h)
    save_basis(out, trainer.basis)
    write_manifest(out, h, data_hash=data_hash, steps=trainer.step_count)
    last = trainer.history[-1] if trainer.history else None
    if last:
        log.info("trained %d steps, final loss %.4f", trainer.step_count, last.total)
    return EXIT_OK


def _gaussians_for(args, data):
    """(GaussianSet, PcaBasis or None, producer hash)."""
    from .gaussians import GaussianSet
    from .network import GaussTR
    from .store import read_manifest
    from .training import load_basis

    if args.gaussians:
        gs = GaussianSet.load(args.gaussians)
        return gs, None, gs.meta.get("config_hash", "")
    if not args.run:
        raise ConfigError("need --run or --gaussians")
    run = Path(args.run)
    manifest = read_manifest(run)
    try:
        net = GaussTR.load(run / "checkpoint")
    except KeyError as exc:
        raise DataError(f"corrupt checkpoint manifest in {run}: missing {exc}") from exc
    gs = net.predict(data.features, data.depths, data.scene.cameras)
    return gs, load_basis(run), manifest["config_hash"]


def _pick_scene(dataset, i):
    if not 0 <= i < len(dataset):
        raise DataError(f"scene index {i} out of range (dataset has {len(dataset)})")
    return dataset[i]


def cmd_render(cfg, args, dataset, data_hash):
    from .losses import pca_project
    from .renderer import render
    from .store import write_manifest
    from .tensor_io import features_to_rgb, save_depth_pgm, save_ppm, save_tensor

    data = _pick_scene(dataset, args.scene)
    gs, basis, h = _gaussians_for(args, data)
    feat = pca_project(gs.feat, basis) if (basis is not None and len(gs)) else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"config_hash={h}"
    for v, cam in enumerate(data.scene.cameras):
        view = render(gs, cam, feat=feat, downsample=data.scene.feature_downsample)
        save_ppm(out / f"view_{v}_feat.ppm", features_to_rgb(view.feat), comment=tag)
        save_depth_pgm(out / f"view_{v}_depth.pgm", view.depth, comment=tag)
        save_tensor(out / f"view_{v}_feat.gtsr", view.feat)
        save_tensor(out / f"view_{v}_depth.gtsr", view.depth)
        save_tensor(out / f"view_{v}_trans.gtsr", view.trans)
    write_manifest(out, h, data_hash=data_hash, scene=args.scene, n_views=len(data.scene.cameras))
    return EXIT_OK


def cmd_voxelize(cfg, args, dataset, data_hash):
    from .occupancy import voxelize
    from .training import reconstructed_features

    data = _pick_scene(dataset, args.scene)
    gs, basis, h = _gaussians_for(args, data)
    feat = reconstructed_features(gs, basis) if (basis is not None and len(gs)) else None
    grid = voxelize(gs, data.scene.text_prototypes(), data.scene.grid, cfg.tau_occ, feat=feat)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    grid.save(args.out, config_hash=h,
              extra={"data_hash": data_hash, "class_names": data.scene.class_names,
                     "tau_occ": cfg.tau_occ})
    log.info("%d occupied voxels", int(grid.occupied.sum()))
    return EXIT_OK


def cmd_eval(args):
    from .occupancy import OccupancyGrid, iou, read_sidecar

    pred, gt = OccupancyGrid.load(args.pred), OccupancyGrid.load(args.gt)
    sp, sg = read_sidecar(args.pred), read_sidecar(args.gt)
    hp = sp.get("data_hash", sp.get("config_hash"))
    hg = sg.get("data_hash", sg.get("config_hash"))
    if hp != hg and not args.force:
        raise DataError(f"dataset hash mismatch: pred {hp!r} vs gt {hg!r} (use --force to compare anyway)")
    if pred.spec != gt.spec:
        raise DataError("prediction and ground truth use different grid specs")
    metrics = iou(pred, gt, sg.get("class_names") or sp.get("class_names"))
    report = {**metrics, "config_hash": sp.get("config_hash", ""), "data_hash": hg,
              "forced": bool(args.force and hp != hg)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2))
    log.info("binary IoU %.4f  mIoU %.4f", metrics["binary_iou"], metrics["miou"])
    return EXIT_OK


def run(argv=None):
    """Parse ``argv`` and run a command; returns the process exit code."""
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = _split_overrides(extra)
        n = _threads(args)
        if n is not None:
            from .renderer import set_threads

            set_threads(n)
        if args.command == "eval":
            if overrides or args.config:
                raise ConfigError("eval takes no config keys")
            return cmd_eval(args)
        if args.command == "synth":
            return cmd_synth(resolve_config(args, overrides), args)
        dataset, data_hash, data_cfg = _load_data(args)
        cfg = resolve_config(args, overrides, base=data_cfg)
        handler = {"train": cmd_train, "render": cmd_render, "voxelize": cmd_voxelize}[args.command]
        return handler(cfg, args, dataset, data_hash)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GaussTRError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
