import json
import random
import shutil

import numpy as np
import pytest

import lapinst.dataset as dsmod
from lapinst.core import ToolClass
from lapinst.dataset import load_dataset, write_gray, write_rgb
from lapinst.errors import DimensionMismatch, MissingAnnotation, UnknownLabelString
from lapinst.synth import SynthParams, write_dataset


def _frame(root, sid="s1", fid="f1", size=(20, 24)):
    px = np.random.default_rng(0).integers(0, 255, size + (3,), dtype=np.uint8)
    write_rgb(root / sid / "frames" / f"{fid}.png", px)
    return px


def test_empty_directory(tmp_path):
    assert len(load_dataset(tmp_path)) == 0


def test_rgb_round_trip_and_box_parsing(tmp_path):
    px = _frame(tmp_path)
    (tmp_path / "s1" / "boxes").mkdir()
    (tmp_path / "s1" / "boxes" / "f1.json").write_text(
        json.dumps({"boxes": [{"x": 1, "y": 2, "w": 3, "h": 4, "label": "aspirator"}]}))
    ds = load_dataset(tmp_path)
    sample = ds.groups["s1"][0]
    assert np.array_equal(sample.frame.pixels, px)
    assert sample.annotation.pixel_mask is None
    (lb,) = sample.annotation.boxes
    assert (lb.box.x, lb.box.y, lb.box.w, lb.box.h, lb.label) == (1, 2, 3, 4, ToolClass.ASPIRATOR)


def test_small_mask_is_dimension_mismatch(tmp_path):
    _frame(tmp_path)
    write_gray(tmp_path / "s1" / "masks" / "f1.png", np.zeros((10, 10), np.uint8))
    with pytest.raises(DimensionMismatch):
        load_dataset(tmp_path)


def test_missing_annotation(tmp_path):
    _frame(tmp_path)
    with pytest.raises(MissingAnnotation):
        load_dataset(tmp_path)


def test_unknown_label_string(tmp_path):
    _frame(tmp_path)
    (tmp_path / "s1" / "boxes").mkdir()
    (tmp_path / "s1" / "boxes" / "f1.json").write_text(
        json.dumps({"boxes": [{"x": 1, "y": 2, "w": 3, "h": 4, "label": "forceps"}]}))
    with pytest.raises(UnknownLabelString):
        load_dataset(tmp_path)


def test_mask_threshold(tmp_path):
    _frame(tmp_path)
    m = np.zeros((20, 24), np.uint8)
    m[3:5, 4:9] = 255
    write_gray(tmp_path / "s1" / "masks" / "f1.png", m)
    mask = load_dataset(tmp_path).groups["s1"][0].annotation.pixel_mask
    assert np.array_equal(mask, m == 255)


def test_synthetic_class_counts_match_manifest(tmp_path):
    manifest = write_dataset(SynthParams(seed=2, frames=9), tmp_path)
    ds = load_dataset(tmp_path)
    expected = {c: 0 for c in ToolClass}
    for rec in manifest["frames"]:
        for b in rec["boxes"]:
            expected[ToolClass.parse(b["label"])] += 1
    assert ds.class_counts() == expected
    assert len(ds) == manifest["frame_count"] == 9


def test_loading_is_order_independent(tmp_path, monkeypatch):
    write_dataset(SynthParams(seed=4, frames=6, surgeries=2), tmp_path)
    reference = load_dataset(tmp_path)

    real_sorted = sorted

    def shuffled(it, *a, **k):
        items = list(real_sorted(it, *a, **k))
        random.Random(7).shuffle(items)
        return items

    monkeypatch.setattr(dsmod, "sorted", shuffled, raising=False)
    again = load_dataset(tmp_path)
    assert again.surgeries == reference.surgeries
    for a, b in zip(again, reference):
        assert a.frame.key == b.frame.key
        assert np.array_equal(a.frame.pixels, b.frame.pixels)
        assert a.annotation.boxes == b.annotation.boxes
