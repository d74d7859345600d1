"""On-disk layout for datasets and runs.

A dataset directory holds ``config.json`` plus one ``scene_NNN`` folder per
scene with the scene JSON, per-view oracle tensors and the ground-truth
grid.  Every directory carries a ``manifest.json`` naming the config hash of
the run that wrote it.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import from_dict
from .errors import DataError
from .synthetic import SyntheticScene, ground_truth_grid
from .tensor_io import load_tensor, save_tensor
from .training import SceneData


def write_manifest(directory, config_hash, **extra):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps({"config_hash": config_hash, **extra}, indent=2))


def read_manifest(directory):
    p = Path(directory) / "manifest.json"
    try:
        return json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {p}: {exc}") from exc


def scene_dir(root, i):
    return Path(root) / f"scene_{i:03d}"


def save_dataset(dataset, root, cfg):
    """Write scenes, oracle views and GT grids; returns the list of scene dirs."""
    root = Path(root)
    h = cfg.config_hash()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    out = []
    for i, data in enumerate(dataset):
        d = scene_dir(root, i)
        d.mkdir(exist_ok=True)
        data.scene.save(d / "scene.json")
        for v in range(len(data.features)):
            save_tensor(d / f"view_{v}_feat.gtsr", data.features[v])
            save_tensor(d / f"view_{v}_depth.gtsr", data.depths[v])
            save_tensor(d / f"view_{v}_labels.gtsr", data.labels[v])
        ground_truth_grid(data.scene).save(d / "gt.gocc", config_hash=h,
                                           extra={"data_hash": h, "class_names": data.scene.class_names})
        write_manifest(d, h, n_views=len(data.features))
        out.append(d)
    write_manifest(root, h, n_scenes=len(dataset))
    return out


def load_dataset_config(root):
    p = Path(root) / "config.json"
    try:
        return from_dict(json.loads(p.read_text()))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset config {p}: {exc}") from exc


def load_scene(d):
    d = Path(d)
    try:
        scene = SyntheticScene.load(d / "scene.json")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read scene in {d}: {exc}") from exc
    n = len(scene.cameras)
    feats = [load_tensor(d / f"view_{v}_feat.gtsr") for v in range(n)]
    depths = [load_tensor(d / f"view_{v}_depth.gtsr") for v in range(n)]
    labels = [load_tensor(d / f"view_{v}_labels.gtsr").astype(np.int64) for v in range(n)]
    for f, dep in zip(feats, depths):
        if f.ndim != 3 or f.shape[:2] != dep.shape:
            raise DataError(f"{d}: feature and depth maps disagree in shape")
    return SceneData(scene, feats, depths, labels)


def load_dataset(root):
    """All scenes under ``root`` in index order, plus the dataset manifest."""
    root = Path(root)
    manifest = read_manifest(root)
    n = int(manifest.get("n_scenes", 0))
    if n < 1:
        raise DataError(f"{root}: dataset manifest lists no scenes")
    return [load_scene(scene_dir(root, i)) for i in range(n)], manifest
