import json

import numpy as np
import pytest

from lapinst.cli import OVERLAY_COLOURS, latency_summary, main
from lapinst.core import BoundingBox, LabeledBox, ToolClass
from lapinst.dataset import read_mask, read_rgb
from lapinst.evaluation import match_detection
from lapinst.modelfile import load_model

SMALL_CFG = """\
seg.trees = 8
seg.depth = 8
seg.pixels_per_frame = 600
cascade.trees = 40
cascade.depth = 6
bow.k = 24
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", str(root / "data"), "--seed", "2", "--frames", "36", "--surgeries", "3"]) == 0
    assert main(["synth", str(root / "scene"), "--seed", "12", "--frames", "20", "--surgeries", "1"]) == 0
    (root / "small.cfg").write_text(SMALL_CFG)
    assert main(["train", str(root / "data"), str(root / "model.lsc"), "--config", str(root / "small.cfg"),
                 "--seed", "4", "--jobs", "1"]) == 0
    return root


def test_synth_prints_seed(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "d"), "--seed", "9", "--frames", "3", "--surgeries", "1"]) == 0
    out = capsys.readouterr().out
    assert "seed: 9" in out and (tmp_path / "d" / "manifest.json").exists()


def test_train_is_deterministic_across_jobs(workspace, tmp_path):
    assert main(["train", str(workspace / "data"), str(tmp_path / "m2.lsc"), "--config",
                 str(workspace / "small.cfg"), "--seed", "4", "--jobs", "3"]) == 0
    assert (tmp_path / "m2.lsc").read_bytes() == (workspace / "model.lsc").read_bytes()


def test_config_override_reaches_model(workspace):
    assert load_model(workspace / "model.lsc").vocabulary.k == 24


def test_detect_jsonl_overlay_and_masks(workspace, tmp_path, capsys):
    frames = workspace / "scene" / "surgery01" / "frames"
    out = tmp_path / "det.jsonl"
    assert main(["detect", str(workspace / "model.lsc"), str(frames), str(out), "--overlay",
                 str(tmp_path / "ov"), "--masks", str(tmp_path / "masks"), "--jobs", "2"]) == 0
    text = capsys.readouterr().out
    assert "detect" in text and "identify" in text and "p99" in text
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert records
    for rec in records:
        assert set(rec) == {"surgery", "frame", "box", "label", "p", "t_detect_ms", "t_identify_ms"}
        assert rec["p"] is None or (len(rec["p"]) == 5 and abs(sum(rec["p"]) - 1) < 1e-9)
        img = read_rgb(tmp_path / "ov" / f"{rec['frame']}.png")
        b = rec["box"]
        colour = OVERLAY_COLOURS[rec["label"]]
        assert tuple(img[b["y"], b["x"]]) == colour
        assert tuple(img[b["y"] + b["h"] - 1, b["x"] + b["w"] - 1]) == colour
    for f in frames.iterdir():
        m = read_mask(tmp_path / "masks" / f.name)
        assert m.shape == read_rgb(f).shape[:2]


def test_detect_matches_manifest_labels(workspace, tmp_path):
    out = tmp_path / "det.jsonl"
    frames = workspace / "scene" / "surgery01" / "frames"
    assert main(["detect", str(workspace / "model.lsc"), str(frames), str(out), "--jobs", "1"]) == 0
    by_frame = {}
    for line in out.read_text().splitlines():
        rec = json.loads(line)
        by_frame.setdefault(rec["frame"], []).append(rec)
    manifest = json.loads((workspace / "scene" / "manifest.json").read_text())
    tools = hits = 0
    for fr in manifest["frames"]:
        truth = [LabeledBox(BoundingBox(**{k: b[k] for k in "xywh"}), ToolClass.parse(b["label"]))
                 for b in fr["boxes"] if b["label"] not in ("no_instrument", "unknown")]
        for lb in truth:
            tools += 1
            hits += any(match_detection(BoundingBox(**r["box"]), [lb]) is lb.label
                        and r["label"] == lb.label.label for r in by_frame.get(fr["frame"], []))
    assert tools > 0 and hits / tools >= 0.9


def test_detect_empty_dir(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    out = tmp_path / "det.jsonl"
    assert main(["detect", str(workspace / "model.lsc"), str(tmp_path / "empty"), str(out)]) == 0
    assert out.read_text() == ""


def test_eval_writes_reports_and_is_reproducible(workspace, tmp_path, capsys):
    args = ["eval", str(workspace / "data"), None, "--config", str(workspace / "small.cfg"), "--repeats", "2",
            "--seed", "5", "--jobs", "1"]
    args[2] = str(tmp_path / "a")
    assert main(args) == 0
    assert "seed: 5" in capsys.readouterr().out
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(report["folds"]) == 6
    agg = report["aggregate"]["set1"]
    assert "manual" in agg and "automatic" in agg
    for name in ("confusion_set1_manual.csv", "confusion_set1_auto.csv", "metrics.csv", "runtime.json"):
        assert (tmp_path / "a" / name).exists()
    args[2] = str(tmp_path / "b")
    args[-1] = "2"
    assert main(args) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_invalid_inputs_create_nothing(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bow.kay = 3\n")
    assert main(["train", str(workspace / "data"), str(tmp_path / "m.lsc"), "--config", str(bad)]) == 2
    assert not (tmp_path / "m.lsc").exists()
    assert main(["eval", str(workspace / "data"), str(tmp_path / "ev"), "--config", str(bad)]) == 2
    assert not (tmp_path / "ev").exists()
    assert main(["eval", str(workspace / "data"), str(tmp_path / "ev"), "--repeats", "0"]) == 2
    assert main(["train", str(tmp_path / "missing"), str(tmp_path / "m.lsc")]) == 2
    assert main(["detect", str(tmp_path / "nomodel"), str(tmp_path), str(tmp_path / "o.jsonl")]) == 2
    assert not (tmp_path / "o.jsonl").exists()
    assert main(["train", str(workspace / "data"), str(tmp_path / "m.lsc"), "--jobs", "0"]) == 2
    assert "error" in capsys.readouterr().err


def test_eval_single_surgery_fails_cleanly(workspace, tmp_path):
    one = workspace / "scene"
    assert main(["eval", str(one), str(tmp_path / "ev")]) == 2
    assert not (tmp_path / "ev").exists()


def test_latency_summary():
    assert latency_summary([]) == {"mean": None, "p50": None, "p90": None, "p99": None}
    s = latency_summary(list(range(1, 101)))
    assert s["mean"] == 50.5 and s["p50"] == 50.5
