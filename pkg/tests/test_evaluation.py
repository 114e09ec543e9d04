import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL_CONFIG
from lapinst.synth import SynthParams, generate_dataset
from lapinst.core import BoundingBox, Dataset, LabeledBox, ToolClass
from lapinst.errors import DimensionMismatch, TooFewSurgeries
from lapinst.evaluation import (ConfusionMatrix, DetectionScore, aggregate, loso_splits, match_detection,
                                match_index, mean_class_accuracy, run_evaluation, score_detections,
                                score_manual, segmentation_metrics)

T = ToolClass
REFERENCE_MATRIX = np.array([[69, 3, 16, 10, 1],
                     [1, 67, 18, 8, 6],
                     [10, 26, 44, 15, 5],
                     [10, 13, 11, 38, 28],
                     [4, 5, 11, 10, 71]], dtype=float)


def names(n):
    return Dataset({f"s{i}": () for i in range(n)})


def test_loso_partition():
    for n in (2, 3, 5):
        splits = loso_splits(names(n))
        assert len(splits) == n
        assert sorted(t for _, t in splits) == [f"s{i}" for i in range(n)]
        for train_ids, test in splits:
            assert test not in train_ids and len(train_ids) == n - 1
    with pytest.raises(TooFewSurgeries):
        loso_splits(names(1))


def test_segmentation_metric_conventions():
    t = np.zeros((10, 10), bool)
    t[2:6, 2:6] = True
    assert segmentation_metrics(t, t) == (1.0, 1.0, 1.0)
    assert segmentation_metrics(np.zeros_like(t), t) == (0.0, 0.0, 0.0)
    assert segmentation_metrics(np.zeros_like(t), np.zeros_like(t)) == (1.0, 1.0, 1.0)
    with pytest.raises(DimensionMismatch):
        segmentation_metrics(t, t[:5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_segmentation_metrics_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((12, 15)) < rng.random()
    t = rng.random((12, 15)) < rng.random()
    tp = fp = fn = 0
    for a, b in zip(p.ravel(), t.ravel()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    prec, rec, dice = segmentation_metrics(p, t)
    if tp + fp:
        assert prec == tp / (tp + fp)
    if tp + fn:
        assert rec == tp / (tp + fn)
    if tp + fp + fn:
        assert dice == 2 * tp / (2 * tp + fp + fn)
    if prec + rec > 0:
        assert dice == pytest.approx(2 * prec * rec / (prec + rec), abs=1e-12)


def test_match_ratio_boundary():
    truth = [LabeledBox(BoundingBox(0, 0, 100, 1), T.ASPIRATOR)]
    assert match_detection(BoundingBox(0, 0, 41, 1), truth) is T.ASPIRATOR
    assert match_detection(BoundingBox(0, 0, 40, 1), truth) is T.NO_INSTRUMENT
    assert match_detection(BoundingBox(59, 0, 41, 5), truth) is T.ASPIRATOR
    assert match_detection(BoundingBox(50, 50, 10, 10), truth) is T.NO_INSTRUMENT


def test_match_takes_best_ratio_lowest_index_and_order_independent():
    a = LabeledBox(BoundingBox(0, 0, 10, 10), T.LIGASURE)
    b = LabeledBox(BoundingBox(5, 0, 10, 10), T.CLIP_APPLIER)
    det = BoundingBox(5, 0, 10, 10)
    assert match_detection(det, [a, b]) is T.CLIP_APPLIER
    assert match_detection(det, [b, a]) is T.CLIP_APPLIER
    twin = LabeledBox(BoundingBox(5, 0, 10, 10), T.ASPIRATOR)
    assert match_index(det, [b, twin]) == 0


def six_case_fixture():
    truth = [LabeledBox(BoundingBox(0, 0, 10, 10), T.LIGASURE),
             LabeledBox(BoundingBox(100, 0, 10, 10), T.ASPIRATOR),
             LabeledBox(BoundingBox(200, 0, 10, 10), T.UNKNOWN),
             LabeledBox(BoundingBox(300, 0, 10, 10), T.UNKNOWN),
             LabeledBox(BoundingBox(400, 0, 10, 10), T.NO_INSTRUMENT)]
    detections = [
        (BoundingBox(0, 0, 10, 5), T.LIGASURE),          # ratio 0.5: ligasure correct
        (BoundingBox(100, 0, 10, 4), T.ASPIRATOR),       # ratio 0.4: no match, background
        (BoundingBox(100, 0, 41, 1), T.ASPIRATOR),       # 0.41 > 0.4 would need area; see below
        (BoundingBox(200, 0, 10, 10), T.LIGASURE),       # unknown, instrument -> correct
        (BoundingBox(300, 0, 10, 10), T.NO_INSTRUMENT),  # unknown, no instrument -> wrong
        (BoundingBox(600, 0, 10, 10), T.CLIP_APPLIER),   # nothing nearby
    ]
    return truth, detections


def test_six_case_fixture_by_hand():
    truth, detections = six_case_fixture()
    detections[2] = (BoundingBox(100, 0, 10, 5), T.ATRAUMATIC_GRASPER)  # ratio 0.5: aspirator seen as grasper
    score = score_detections(detections, truth)
    expected = np.zeros((5, 5))
    expected[T.LIGASURE, T.LIGASURE] = 1
    expected[T.ASPIRATOR, T.NO_INSTRUMENT] = 1
    expected[T.ATRAUMATIC_GRASPER, T.ASPIRATOR] = 1
    expected[T.CLIP_APPLIER, T.NO_INSTRUMENT] = 1
    assert np.array_equal(score.matrix.counts, expected)
    assert score.unknown_matched == 2 and score.unknown_correct == 1
    assert score.matrix.total + score.unknown_matched == score.scored == 6
    assert score.total_instruments == 4
    assert score.detected == 4
    assert score.classified_as_instrument == 3


def test_duplicates_score_independently():
    truth = [LabeledBox(BoundingBox(0, 0, 10, 10), T.LIGASURE)]
    s = score_detections([(BoundingBox(0, 0, 10, 10), T.LIGASURE), (BoundingBox(0, 0, 10, 6), T.ASPIRATOR)], truth)
    assert s.matrix.counts[T.LIGASURE, T.LIGASURE] == 1 and s.matrix.counts[T.ASPIRATOR, T.LIGASURE] == 1
    assert s.detected == 1 and s.duplicate_matches == 1


def test_perfect_pipeline():
    truth = [LabeledBox(BoundingBox(40 * i, 0, 20, 20), c)
             for i, c in enumerate([T.LIGASURE, T.ATRAUMATIC_GRASPER, T.ASPIRATOR, T.CLIP_APPLIER])]
    s = score_detections([(lb.box, lb.label) for lb in truth], truth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert mean_class_accuracy(s.matrix) == 1.0
    assert s.detected / s.total_instruments == 1.0


def test_manual_scoring():
    s = score_manual([(T.LIGASURE, T.LIGASURE), (T.NO_INSTRUMENT, T.ASPIRATOR),
                      (T.LIGASURE, T.UNKNOWN), (T.NO_INSTRUMENT, T.NO_INSTRUMENT)])
    assert s.matrix.total == 3 and s.unknown_correct == 1
    assert s.total_instruments == 3 and s.classified_as_instrument == 2


def test_unknown_never_in_matrix():
    with pytest.raises(ValueError):
        ConfusionMatrix().add(T.UNKNOWN, T.LIGASURE)


def test_mean_class_accuracy_reference_matrix_layouts():
    # reference rows are actual classes, so the package's [predicted, actual] matrix is the transpose
    m = ConfusionMatrix(REFERENCE_MATRIX.T.copy())
    naive = np.mean([REFERENCE_MATRIX[i, i] / REFERENCE_MATRIX[i].sum() for i in range(5)])
    assert mean_class_accuracy(m) == pytest.approx(naive, abs=1e-12)
    assert abs(mean_class_accuracy(m) - 0.578) <= 0.005


def test_mean_class_accuracy_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.integers(0, 20, (5, 5)).astype(float)
        c[:, 0] += 1
        accs = []
        for j in range(5):
            col = sum(c[i][j] for i in range(5))
            if col:
                accs.append(c[j][j] / col)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert mean_class_accuracy(ConfusionMatrix(c)) == pytest.approx(sum(accs) / len(accs), abs=1e-12)


def test_mean_class_accuracy_empty_columns():
    c = np.diag([3.0, 0, 0, 0, 0])
    c[1, 0] = 1
    with pytest.warns(RuntimeWarning):
        assert mean_class_accuracy(ConfusionMatrix(c)) == 0.75
    with pytest.warns(RuntimeWarning):
        assert math.isnan(mean_class_accuracy(ConfusionMatrix()))


def test_fractional_averaging():
    a = DetectionScore(total_instruments=3, detected=3)
    a.add(DetectionScore(total_instruments=3, detected=2))
    half = a.scaled(0.5)
    assert half.detected == 2.5 and half.total_instruments == 3


def test_confusion_csv(tmp_path):
    m = ConfusionMatrix()
    m.add(T.LIGASURE, T.ASPIRATOR, 0.5)
    m.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",")[1:] == ["no_instrument", "ligasure", "atraumatic_grasper", "aspirator",
                                       "clip_applier"]
    assert lines[2].split(",") == ["ligasure", "0", "0", "0", "0.5", "0"]


@pytest.fixture(scope="module")
def two_surgeries():
    return generate_dataset(SynthParams(seed=6, frames=40, surgeries=2))


def test_run_evaluation_smoke(two_surgeries, tmp_path):
    two = two_surgeries
    report = run_evaluation(two, SMALL_CONFIG, repeats=1, seed=3)
    assert len(report.folds) == 2 and not report.failed
    agg = report.aggregate()["set1"]
    for key in ("precision", "recall", "dice"):
        assert 0 <= agg["segmentation"][key] <= 1
    for name in ("manual", "automatic"):
        for key in ("mean_class_accuracy", "detection_rate", "instrument_rate"):
            assert agg[name][key] is None or 0 <= agg[name][key] <= 1
    report.write(tmp_path)
    for f in ("report.json", "runtime.json", "metrics.csv", "confusion_set1_manual.csv",
              "confusion_set1_auto.csv"):
        assert (tmp_path / f).exists()
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["repeats"] == 1 and len(doc["folds"]) == 2


def test_failed_fold_is_recorded(two_surgeries, monkeypatch):
    import lapinst.evaluation as ev
    calls = {"n": 0}
    real = ev.train_pipeline

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("boom")
        return real(*a, **k)

    monkeypatch.setattr(ev, "train_pipeline", flaky)
    two = two_surgeries
    report = run_evaluation(two, SMALL_CONFIG, repeats=1, seed=3)
    assert report.failed and report.folds[0].error == "RuntimeError: boom"
    assert report.folds[1].error is None
