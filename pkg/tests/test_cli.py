import json
from pathlib import Path

import pytest

from sis3d.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main

SMALL = {"resolution": [48, 48], "width_divisor": 16, "color_channels": 4, "n_scan_views": 4}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    data = root / "data"
    assert main(["--config", str(cfg), "synth", "--out", str(data), "--n-scenes", "2"]) == EXIT_OK
    assert main(["--config", str(cfg), "fuse", "--data", str(data)]) == EXIT_OK
    return root, cfg, data


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file() and not p.name.endswith("manifest.json")}


def test_synth_is_byte_identical(tmp_path, workspace):
    _, cfg, _ = workspace
    for name in ("a", "b"):
        assert main(["--config", str(cfg), "--seed", "4", "synth", "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a and a == b
    assert (tmp_path / "a" / "synth.manifest.json").exists()


def test_usage_errors(capsys, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--bogus"]) == EXIT_USAGE
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "--bogus" in err[0]
    assert main([]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["--config", str(bad), "synth", "--out", str(tmp_path)]) == EXIT_USAGE


def test_data_errors(tmp_path, capsys):
    assert main(["fuse", "--data", str(tmp_path / "missing")]) == EXIT_DATA
    scene = tmp_path / "scene_0000"
    scene.mkdir()
    (scene / "scene.json").write_text("{}")
    (scene / "tsdf.vgrd").write_bytes(b"NOPE")
    assert main(["eval", "--data", str(tmp_path), "--predictions", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_end_to_end(workspace):
    root, cfg, data = workspace
    model = root / "model" / "m.sisw"
    base = ["--config", str(cfg), "--deterministic"]
    assert main(base + ["train", "--data", str(data), "--out", str(model), "--steps", "3", "2", "2"]) == EXIT_OK
    for suffix in ("", ".json", ".losses.csv", ".manifest.json"):
        assert Path(str(model) + suffix).exists()
    manifest = json.loads(Path(str(model) + ".manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0 and "train" in manifest["timings"]
    assert len(Path(str(model) + ".losses.csv").read_text().splitlines()) == 1 + 7

    preds = root / "preds.txt"
    assert main(base + ["infer", "--data", str(data), "--model", str(model), "--out", str(preds)]) == EXIT_OK
    first = preds.read_bytes()
    assert main(base + ["infer", "--data", str(data), "--model", str(model), "--out", str(preds)]) == EXIT_OK
    assert preds.read_bytes() == first

    metrics = root / "metrics.csv"
    assert main(base + ["eval", "--data", str(data), "--predictions", str(preds), "--out", str(metrics)]) == EXIT_OK
    lines = metrics.read_text().splitlines()
    assert lines[0] == "metric,iou,class_0,class_1,class_2,avg" and len(lines) == 5

    out = root / "export"
    assert main(base + ["export", "--data", str(data), "--predictions", str(preds), "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"scene_0000_surface.ply", "scene_0000_boxes.ply", "scene_0001_masks.ply", "metrics.csv"} <= names


def test_training_is_reproducible(tmp_path, workspace):
    _, cfg, data = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "m.sisw"
        assert main(["--config", str(cfg), "--deterministic", "train", "--data", str(data), "--out", str(out),
                     "--steps", "2", "2", "2"]) == EXIT_OK
        outs.append(files(tmp_path / name))
    assert outs[0] == outs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, workspace, capsys):
    _, cfg, data = workspace
    code = main(["--config", str(cfg), "train", "--data", str(data), "--out", str(tmp_path / "m.sisw"),
                 "--steps", "50", "0", "0", "--lr", "1e12"])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
