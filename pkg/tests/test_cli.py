import json
import time
from pathlib import Path

import numpy as np
import pytest

from gausstr.cli import run
from gausstr.gaussians import GaussianSet
from gausstr.occupancy import EMPTY, OccupancyGrid
from gausstr.synthetic import SyntheticScene
from gausstr.tensor_io import load_ppm, load_tensor

SMALL = {"C": 16, "C_R": 8, "queries_per_view": 8, "layers": 1, "image_height": 64, "image_width": 96,
         "render_downsample": 4, "steps": 3, "log_every": 0}


def _files(d):
    d = Path(d)
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture()
def dataset(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert run(["synth", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


def test_synth_is_deterministic(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--config", str(cfg_file), "--out", str(a)]) == 0
    assert run(["synth", "--config", str(cfg_file), "--out", str(b)]) == 0
    assert _files(a) == _files(b)


def test_synth_layout(dataset):
    scene_dir = dataset / "scene_000"
    names = {p.name for p in scene_dir.iterdir()}
    assert sum(n.endswith("_feat.gtsr") for n in names) == 2
    assert sum(n.endswith("_depth.gtsr") for n in names) == 2
    assert {"scene.json", "gt.gocc", "gt.gocc.json", "manifest.json"} <= names
    h = json.loads((dataset / "manifest.json").read_text())["config_hash"]
    assert json.loads((scene_dir / "gt.gocc.json").read_text())["config_hash"] == h


def test_synth_ground_truth_matches_box_overlap(dataset):
    scene = SyntheticScene.load(dataset / "scene_000" / "scene.json")
    gt = OccupancyGrid.load(dataset / "scene_000" / "gt.gocc")
    spec = scene.grid
    expect = np.full(spec.dims, EMPTY, dtype=np.uint8)
    for box in scene.boxes:
        for idx in np.ndindex(*spec.dims):
            lo = np.asarray(spec.lo) + np.asarray(idx) * spec.voxel
            frac = 1.0
            for k in range(3):
                frac *= max(0.0, min(lo[k] + spec.voxel, box.hi[k]) - max(lo[k], box.lo[k])) / spec.voxel
            if frac >= 0.5 - 1e-9:
                expect[idx] = box.cls
    assert np.array_equal(gt.classes, expect)


def test_eval_of_ground_truth_against_itself(tmp_path, dataset):
    gt = dataset / "scene_000" / "gt.gocc"
    assert run(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["miou"] == 1.0 and m["binary_iou"] == 1.0 and m["forced"] is False


def test_render_zero_gaussians(tmp_path, dataset):
    GaussianSet.empty(16).save(tmp_path / "g")
    out = tmp_path / "r"
    assert run(["render", "--data", str(dataset), "--gaussians", str(tmp_path / "g"), "--out", str(out)]) == 0
    for v in range(2):
        assert not load_ppm(out / f"view_{v}_feat.ppm").any()
        assert np.all(load_tensor(out / f"view_{v}_trans.gtsr") == 1.0)


def test_exit_codes(tmp_path, cfg_file, dataset, capsys):
    assert run(["synth", "--out", str(tmp_path / "x"), "--bogus_key=1"]) == 2
    assert run(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 2
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 3
    assert run(["synth", "--out", str(tmp_path / "x"), "--threads", "0"]) == 2
    assert run(["eval", "--pred", str(tmp_path / "a.gocc"), "--gt", str(tmp_path / "b.gocc"),
                "--out", str(tmp_path / "m.json")]) == 3
    assert run(["render", "--data", str(dataset), "--out", str(tmp_path / "r")]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(tmp_path, dataset, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["train", "--data", str(dataset), "--out", str(tmp_path / "run"), "--lr=1e30",
                "--steps=3", "--clip_norm=1e300"]) == 4
    assert (tmp_path / "nan_dump" / "losses.txt").exists()


def test_eval_refuses_foreign_dataset_unless_forced(tmp_path, cfg_file, dataset):
    other = tmp_path / "other"
    assert run(["synth", "--config", str(cfg_file), "--out", str(other), "--seed=5"]) == 0
    a, b = dataset / "scene_000" / "gt.gocc", other / "scene_000" / "gt.gocc"
    out = tmp_path / "m.json"
    assert run(["eval", "--pred", str(a), "--gt", str(b), "--out", str(out)]) == 3
    assert not out.exists()
    assert run(["eval", "--pred", str(a), "--gt", str(b), "--out", str(out), "--force"]) == 0
    assert json.loads(out.read_text())["forced"] is True


def test_threads_env_fallback(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("GAUSSTR_THREADS", "zero")
    assert run(["synth", "--config", str(cfg_file), "--out", str(tmp_path / "d")]) == 2
    monkeypatch.setenv("GAUSSTR_THREADS", "1")
    assert run(["synth", "--config", str(cfg_file), "--out", str(tmp_path / "d")]) == 0


def test_train_render_voxelize_outputs_carry_hashes(tmp_path, dataset):
    run_dir, rend, vox = tmp_path / "run", tmp_path / "rend", tmp_path / "p.gocc"
    assert run(["train", "--data", str(dataset), "--out", str(run_dir), "--steps", "2"]) == 0
    h = json.loads((run_dir / "manifest.json").read_text())["config_hash"]
    assert json.loads((run_dir / "checkpoint" / "manifest.json").read_text())["config_hash"] == h
    assert (run_dir / "loss.csv").read_text().startswith(f"# config_hash={h}")
    assert run(["render", "--data", str(dataset), "--run", str(run_dir), "--out", str(rend)]) == 0
    assert f"config_hash={h}".encode() in (rend / "view_0_feat.ppm").read_bytes()
    assert f"config_hash={h}".encode() in (rend / "view_1_depth.pgm").read_bytes()
    assert json.loads((rend / "manifest.json").read_text())["config_hash"] == h
    assert run(["voxelize", "--data", str(dataset), "--run", str(run_dir), "--out", str(vox)]) == 0
    side = json.loads(Path(str(vox) + ".json").read_text())
    assert side["config_hash"] == h
    assert side["data_hash"] == json.loads((dataset / "manifest.json").read_text())["config_hash"]


def test_commands_are_deterministic(tmp_path, dataset):
    outs = []
    for tag in ("a", "b"):
        r = tmp_path / tag
        assert run(["train", "--data", str(dataset), "--out", str(r / "run")]) == 0
        assert run(["voxelize", "--data", str(dataset), "--run", str(r / "run"), "--out", str(r / "p.gocc")]) == 0
        assert run(["render", "--data", str(dataset), "--run", str(r / "run"), "--out", str(r / "rend")]) == 0
        outs.append(_files(r))
    assert outs[0] == outs[1]


def test_smoke_pipeline(tmp_path):
    cfg = {**SMALL, "C": 32, "C_R": 16, "queries_per_view": 64, "layers": 3, "image_height": 384,
           "image_width": 640, "render_downsample": 16, "steps": 200}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    d, r = tmp_path / "data", tmp_path / "run"
    t0 = time.perf_counter()
    assert run(["synth", "--config", str(tmp_path / "c.json"), "--out", str(d)]) == 0
    assert run(["train", "--data", str(d), "--out", str(r)]) == 0
    assert run(["voxelize", "--data", str(d), "--run", str(r), "--out", str(tmp_path / "p.gocc")]) == 0
    assert run(["eval", "--pred", str(tmp_path / "p.gocc"), "--gt", str(d / "scene_000" / "gt.gocc"),
                "--out", str(tmp_path / "m.json")]) == 0
    assert time.perf_counter() - t0 < 300
    m = json.loads((tmp_path / "m.json").read_text())
    assert set(m["per_class"]) <= {"ground", "block", "pillar"} and 0 <= m["miou"] <= 1
    assert len((r / "loss.csv").read_text().splitlines()) == 202
