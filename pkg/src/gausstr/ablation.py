"""Ablation sweeps driven through the command-line pipeline.

Every variant is trained, voxelized and evaluated against the same synthetic
dataset, so the per-variant metrics files share one ``data_hash`` and one key
set.  The summary lists variants in sweep order.
"""
from __future__ import annotations

import json
from pathlib import Path

from .cli import EXIT_OK, run
from .errors import GaussTRError

QUERY_SWEEP = (100, 200, 300, 400)


class AblationFailed(GaussTRError):
    pass


def _call(argv):
    code = run(argv)
    if code != EXIT_OK:
        raise AblationFailed(f"`gausstr {' '.join(argv)}` exited with {code}")


def _flags(overrides):
    return [f"--{k}={v}" for k, v in sorted(overrides.items())]


def run_variant(data, out, overrides, config=None):
    """train -> voxelize -> eval for one variant; returns its metrics dict."""
    out = Path(out)
    cfg = ["--config", str(config)] if config else []
    flags = _flags(overrides)
    _call(["train", "--data", str(data), "--out", str(out / "run"), *cfg, *flags])
    _call(["voxelize", "--data", str(data), "--run", str(out / "run"), "--out", str(out / "pred.gocc"), *cfg, *flags])
    _call(["eval", "--pred", str(out / "pred.gocc"), "--gt", str(Path(data) / "scene_000" / "gt.gocc"),
           "--out", str(out / "metrics.json")])
    metrics = json.loads((out / "metrics.json").read_text())
    metrics["overrides"] = overrides
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics


def sweep(out, variants, config=None, synth_overrides=None):
    """Run named variants over one shared dataset and write ``summary.json``.

    ``variants`` maps a name to the config overrides for that run.
    """
    out = Path(out)
    data = out / "data"
    cfg = ["--config", str(config)] if config else []
    _call(["synth", "--out", str(data), *cfg, *_flags(synth_overrides or {})])
    rows = []
    for name, overrides in variants.items():
        m = run_variant(data, out / name, overrides, config)
        rows.append({"variant": name, **m})
    summary = {"data_hash": rows[0]["data_hash"] if rows else None, "variants": rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def query_sweep(out, config=None, counts=QUERY_SWEEP, **common):
    """Query-count sweep; ``counts`` are totals split evenly across the views."""
    n_views = common.pop("n_views", 2)
    variants = {f"queries_{n}": {**common, "queries_per_view": n // n_views} for n in counts}
    return sweep(out, variants, config, {"n_views": n_views})


def seg_aug_sweep(out, config=None, **common):
    variants = {"seg_aug_off": {**common, "seg_aug": False}, "seg_aug_on": {**common, "seg_aug": True}}
    return sweep(out, variants, config)
