import numpy as np
import pytest
from hypothesis import given, strategies as st

from lapinst.core import (CLASSIFIER_CLASSES, Annotation, BoundingBox, Dataset, Frame, LabeledBox,
                          Sample, ToolClass)
from lapinst.errors import DimensionMismatch, UnknownLabelString

LABELS = ["no_instrument", "ligasure", "atraumatic_grasper", "aspirator", "clip_applier", "unknown"]


def test_label_strings_are_a_bijection():
    assert [c.label for c in ToolClass] == LABELS
    for text in LABELS:
        assert ToolClass.parse(text).label == text
    assert len({ToolClass.parse(t) for t in LABELS}) == len(LABELS)


def test_unknown_label_string_rejected():
    with pytest.raises(UnknownLabelString):
        ToolClass.parse("scalpel")


def test_classifier_classes_exclude_unknown():
    assert ToolClass.UNKNOWN not in CLASSIFIER_CLASSES
    assert len(CLASSIFIER_CLASSES) == 5
    assert not ToolClass.NO_INSTRUMENT.is_instrument and ToolClass.ASPIRATOR.is_instrument


def test_frame_validation_and_immutability():
    px = np.zeros((16, 20, 3), np.uint8)
    f = Frame("s", "f", px)
    assert (f.width, f.height) == (20, 16)
    px[0, 0] = 9
    assert f.pixels[0, 0, 0] == 0
    with pytest.raises(ValueError):
        f.pixels[0, 0, 0] = 1
    with pytest.raises(ValueError):
        Frame("s", "f", np.zeros((15, 20, 3), np.uint8))
    with pytest.raises(ValueError):
        Frame("s", "f", np.zeros((16, 16), np.uint8))


def test_box_rejects_empty_sides():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 3)


boxes = st.builds(BoundingBox, st.integers(-20, 60), st.integers(-20, 60),
                  st.integers(1, 40), st.integers(1, 40))


@given(boxes, boxes)
def test_intersection_matches_pixel_count(a, b):
    grid = np.zeros((200, 200), dtype=np.int8)
    grid[a.y + 50:a.y2 + 50, a.x + 50:a.x2 + 50] += 1
    grid[b.y + 50:b.y2 + 50, b.x + 50:b.x2 + 50] += 1
    assert a.intersection_area(b) == int((grid == 2).sum()) == b.intersection_area(a)


@given(boxes)
def test_clip_stays_inside(a):
    c = a.clip(50, 40)
    if c is None:
        assert a.x2 <= 0 or a.y2 <= 0 or a.x >= 50 or a.y >= 40
    else:
        assert 0 <= c.x and 0 <= c.y and c.x2 <= 50 and c.y2 <= 40
        assert c.area == a.intersection_area(BoundingBox(0, 0, 50, 40))


def test_annotation_mask_dimension_check():
    frame = Frame("s", "f", np.zeros((16, 16, 3), np.uint8))
    Annotation("f", np.zeros((16, 16), bool)).check_against(frame)
    with pytest.raises(DimensionMismatch):
        Annotation("f", np.zeros((16, 17), bool)).check_against(frame)


def test_dataset_orders_groups_and_counts_classes():
    def sample(sid, fid, labels):
        frame = Frame(sid, fid, np.zeros((16, 16, 3), np.uint8))
        return Sample(frame, Annotation(fid, None, [LabeledBox(BoundingBox(0, 0, 2, 2), l) for l in labels]))

    ds = Dataset({"b": [sample("b", "2", [ToolClass.LIGASURE]), sample("b", "1", [])],
                  "a": [sample("a", "1", [ToolClass.UNKNOWN, ToolClass.LIGASURE])]})
    assert ds.surgeries == ["a", "b"]
    assert [s.frame.frame_id for s in ds.groups["b"]] == ["1", "2"]
    assert len(ds) == 3
    counts = ds.class_counts()
    assert counts[ToolClass.LIGASURE] == 2 and counts[ToolClass.UNKNOWN] == 1
    assert ds.subset(["b"]).surgeries == ["b"]
