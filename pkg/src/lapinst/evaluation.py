"""Leave-one-surgery-out evaluation: segmentation, detection and identification scores."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cascade import DescriptorCache, classify_box, classify_frame, prepare_frame
from .config import PipelineConfig
from .core import CLASSIFIER_CLASSES, NUM_CLASSES, BoundingBox, Dataset, LabeledBox, ToolClass
from .errors import DimensionMismatch, NoContent, TooFewSurgeries
from .pipeline import train_pipeline

log = logging.getLogger(__name__)

MATCH_RATIO = 0.4
CLASS_LABELS = [c.label for c in CLASSIFIER_CLASSES]


def loso_splits(dataset: Dataset) -> list[tuple[tuple[str, ...], str]]:
    """One (training surgeries, test surgery) fold per surgery."""
    ids = dataset.surgeries
    if len(ids) < 2:
        raise TooFewSurgeries(f"leave-one-surgery-out needs >= 2 surgeries, got {len(ids)}")
    return [(tuple(s for s in ids if s != test), test) for test in ids]


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "PixelCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def rates(self) -> tuple[float, float, float]:
        return _rates(self.tp, self.fp, self.fn)


def _ratio(num, den, both_empty: bool) -> float:
    if den > 0:
        return num / den
    return 1.0 if both_empty else 0.0


def _rates(tp, fp, fn) -> tuple[float, float, float]:
    # a ratio with an empty denominator is 1 only when prediction and truth are both empty
    empty = tp == 0 and fp == 0 and fn == 0
    return (_ratio(tp, tp + fp, empty), _ratio(tp, tp + fn, empty),
            _ratio(2 * tp, 2 * tp + fp + fn, empty))


def pixel_counts(predicted: np.ndarray, truth: np.ndarray) -> PixelCounts:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise DimensionMismatch(f"prediction {p.shape} and truth {t.shape} differ")
    return PixelCounts(int(np.count_nonzero(p & t)), int(np.count_nonzero(p & ~t)),
                       int(np.count_nonzero(~p & t)))


def segmentation_metrics(predicted: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(precision, recall, dice) of a binary map against its truth mask."""
    return pixel_counts(predicted, truth).rates()


# ---------------------------------------------------------------------------
# detection matching and confusion matrices


def match_index(detected: BoundingBox, truth: Sequence[LabeledBox]) -> Optional[int]:
    """Index of the truth box with the largest intersection/truth-area ratio above 0.4."""
    best, best_ratio = None, MATCH_RATIO
    for i, lb in enumerate(truth):
        ratio = detected.intersection_area(lb.box) / lb.box.area
        if ratio > best_ratio:
            best, best_ratio = i, ratio
    return best


def match_detection(detected: BoundingBox, truth: Sequence[LabeledBox]) -> ToolClass:
    i = match_index(detected, truth)
    return ToolClass.NO_INSTRUMENT if i is None else truth[i].label


@dataclass
class ConfusionMatrix:
    """Counts indexed [predicted, actual]; floats so repeat averages stay exact."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES)))

    def add(self, predicted: ToolClass, actual: ToolClass, weight: float = 1.0) -> None:
        if predicted is ToolClass.UNKNOWN or actual is ToolClass.UNKNOWN:
            raise ValueError("Unknown never enters the confusion matrix")
        self.counts[int(predicted), int(actual)] += weight

    def __iadd__(self, other: "ConfusionMatrix"):
        self.counts = self.counts + other.counts
        return self

    def scaled(self, factor: float) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts * factor)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def to_rows(self) -> list[list]:
        return [[float(v) for v in row] for row in self.counts]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["predicted\\actual"] + CLASS_LABELS)
            for label, row in zip(CLASS_LABELS, self.counts):
                w.writerow([label] + [_fmt(v) for v in row])


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def mean_class_accuracy(matrix: ConfusionMatrix) -> float:
    """Macro average over actual classes (columns) of the per-class hit rate."""
    c = np.asarray(matrix.counts, dtype=np.float64)
    col = c.sum(axis=0)
    present = col > 0
    if not present.all():
        missing = [CLASS_LABELS[i] for i in np.flatnonzero(~present)]
        warnings.warn(f"empty confusion columns excluded: {missing}", RuntimeWarning, stacklevel=2)
    if not present.any():
        return float("nan")
    return float(np.mean(np.diag(c)[present] / col[present]))


@dataclass
class DetectionScore:
    matrix: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    scored: float = 0
    unknown_matched: float = 0
    unknown_correct: float = 0
    total_instruments: float = 0
    detected: float = 0
    classified_as_instrument: float = 0
    duplicate_matches: float = 0

    def add(self, other: "DetectionScore") -> None:
        self.matrix += other.matrix
        for name in ("scored", "unknown_matched", "unknown_correct", "total_instruments",
                     "detected", "classified_as_instrument", "duplicate_matches"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def scaled(self, factor: float) -> "DetectionScore":
        out = DetectionScore(self.matrix.scaled(factor))
        for name in ("scored", "unknown_matched", "unknown_correct", "total_instruments",
                     "detected", "classified_as_instrument", "duplicate_matches"):
            setattr(out, name, getattr(self, name) * factor)
        return out

    def summary(self) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mca = mean_class_accuracy(self.matrix)
        ti = self.total_instruments
        return {
            "confusion": self.matrix.to_rows(),
            "mean_class_accuracy": None if math.isnan(mca) else mca,
            "scored": self.scored,
            "unknown_matched": self.unknown_matched,
            "unknown_correct": self.unknown_correct,
            "total_instruments": ti,
            "detected_count": self.detected,
            "classified_as_instrument_count": self.classified_as_instrument,
            "detection_rate": self.detected / ti if ti else None,
            "instrument_rate": self.classified_as_instrument / ti if ti else None,
            "duplicate_matches": self.duplicate_matches,
        }


def score_detections(detections: Sequence[tuple[BoundingBox, ToolClass]],
                     truth: Sequence[LabeledBox]) -> DetectionScore:
    """Score one frame's (box, predicted label) pairs against its truth boxes.

    Only instrument and Unknown truth boxes take part in matching.
    """
    targets = [lb for lb in truth if lb.label is not ToolClass.NO_INSTRUMENT]
    score = DetectionScore(total_instruments=len(targets))
    hit = [False] * len(targets)
    hit_instrument = [False] * len(targets)
    for box, predicted in detections:
        i = match_index(box, targets)
        score.scored += 1
        if i is not None:
            if hit[i]:
                score.duplicate_matches += 1
            hit[i] = True
            hit_instrument[i] |= predicted is not ToolClass.NO_INSTRUMENT
        actual = ToolClass.NO_INSTRUMENT if i is None else targets[i].label
        _accumulate(score, predicted, actual)
    score.detected = sum(hit)
    score.classified_as_instrument = sum(hit_instrument)
    return score


def _accumulate(score: DetectionScore, predicted: ToolClass, actual: ToolClass) -> None:
    if actual is ToolClass.UNKNOWN:
        score.unknown_matched += 1
        score.unknown_correct += predicted is not ToolClass.NO_INSTRUMENT
    else:
        score.matrix.add(predicted, actual)


def score_manual(pairs: Sequence[tuple[ToolClass, ToolClass]]) -> DetectionScore:
    """Score (predicted, actual) pairs from classifying annotated boxes directly."""
    score = DetectionScore()
    for predicted, actual in pairs:
        score.scored += 1
        if actual is not ToolClass.NO_INSTRUMENT:
            score.total_instruments += 1
            score.detected += 1
            score.classified_as_instrument += predicted is not ToolClass.NO_INSTRUMENT
        _accumulate(score, predicted, actual)
    return score


# ---------------------------------------------------------------------------
# protocol


@dataclass
class SetScore:
    """Both experiments on one data set's test frames."""

    manual: DetectionScore = field(default_factory=DetectionScore)
    automatic: DetectionScore = field(default_factory=DetectionScore)
    pixels: PixelCounts = field(default_factory=PixelCounts)
    frames: int = 0

    def add(self, other: "SetScore") -> None:
        self.manual.add(other.manual)
        self.automatic.add(other.automatic)
        self.pixels.add(other.pixels)
        self.frames += other.frames

    def summary(self, pixel_scale: float = 1.0) -> dict:
        tp, fp, fn = (v * pixel_scale for v in (self.pixels.tp, self.pixels.fp, self.pixels.fn))
        p, r, d = _rates(tp, fp, fn)
        return {
            "frames": self.frames,
            "segmentation": {"precision": p, "recall": r, "dice": d, "tp": tp, "fp": fp, "fn": fn},
            "manual": self.manual.summary(),
            "automatic": self.automatic.summary(),
        }


@dataclass
class FoldResult:
    repeat: int
    fold: int
    test_surgery: str
    train_surgeries: tuple[str, ...]
    seed: int
    sets: dict = field(default_factory=dict)  # set name -> SetScore
    t_detect_ms: list = field(default_factory=list)
    t_identify_ms: list = field(default_factory=list)
    train_s: float = 0.0
    error: Optional[str] = None

    def record(self) -> dict:
        return {
            "repeat": self.repeat, "fold": self.fold, "test_surgery": self.test_surgery,
            "train_surgeries": list(self.train_surgeries), "seed": self.seed, "error": self.error,
            "sets": {name: score.summary() for name, score in self.sets.items()},
        }


@dataclass
class EvalReport:
    repeats: int
    seed: int
    config: dict
    folds: list[FoldResult]
    sets: dict  # set name -> SetScore averaged over repeats (pixel counts summed)

    @property
    def failed(self) -> bool:
        return any(f.error for f in self.folds)

    def aggregate(self) -> dict:
        k = 1.0 / self.repeats
        return {name: score.summary(k) for name, score in self.sets.items()}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "repeats": self.repeats, "config": self.config,
            "folds": [f.record() for f in self.folds],
            "aggregate": self.aggregate(),
        }

    def runtime(self) -> dict:
        det = [t for f in self.folds for t in f.t_detect_ms]
        ident = [t for f in self.folds for t in f.t_identify_ms]
        return {
            "mean_detect_ms": float(np.mean(det)) if det else None,
            "mean_identify_ms": float(np.mean(ident)) if ident else None,
            "frames": len(det),
            "train_s": [f.train_s for f in self.folds],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        (out / "runtime.json").write_text(json.dumps(self.runtime(), sort_keys=True, indent=1) + "\n")
        for name, score in self.sets.items():
            score.manual.matrix.write_csv(out / f"confusion_{name}_manual.csv")
            score.automatic.matrix.write_csv(out / f"confusion_{name}_auto.csv")
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "fold", "test_surgery", "set", "frames", "precision", "recall",
                        "dice", "total_instruments", "detected", "classified_as_instrument",
                        "manual_mca", "automatic_mca", "error"])
            for f in self.folds:
                for name, rec in (f.record()["sets"].items() or [(None, None)]):
                    if rec is None:
                        w.writerow([f.repeat, f.fold, f.test_surgery] + [""] * 10 + [f.error or ""])
                        continue
                    seg, auto = rec["segmentation"], rec["automatic"]
                    w.writerow([f.repeat, f.fold, f.test_surgery, name, rec["frames"],
                                seg["precision"], seg["recall"], seg["dice"],
                                auto["total_instruments"], auto["detected_count"],
                                auto["classified_as_instrument_count"],
                                rec["manual"]["mean_class_accuracy"],
                                auto["mean_class_accuracy"], f.error or ""])


def fold_seed(base: int, repeat: int, fold: int) -> int:
    return int(np.random.SeedSequence([base, repeat, fold]).generate_state(1)[0])


def _evaluate_sample(model, sample, cache):
    frame = sample.frame
    truth = sample.annotation.boxes
    manual_pairs = []
    try:
        masked, circle = prepare_frame(frame)
    except NoContent:
        masked = None
    for lb in truth:
        clipped = lb.box.clip(frame.width, frame.height)
        if clipped is None:
            continue
        if masked is None:
            predicted = ToolClass.NO_INSTRUMENT
        else:
            predicted = classify_box(model, masked, circle, clipped, cache).label
        manual_pairs.append((predicted, lb.label))
    result = classify_frame(model, frame, cache, keep_segmentation=True)
    auto = score_detections([(d.box, d.label) for d in result.detections], truth)
    pixels = PixelCounts()
    if sample.annotation.pixel_mask is not None:
        seg = result.segmentation
        if seg is None:
            seg = np.zeros(sample.annotation.pixel_mask.shape, dtype=bool)
        pixels = pixel_counts(seg, sample.annotation.pixel_mask)
    return score_manual(manual_pairs), auto, pixels, result.t_detect_ms, result.t_identify_ms


def evaluate_model(model, samples, cache=None, jobs: int = 1) -> tuple[SetScore, list, list]:
    """Score a trained model on test samples; returns the score and per-frame phase timings."""
    score = SetScore(frames=len(samples))
    det, ident = [], []
    run = lambda s: _evaluate_sample(model, s, cache)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, samples))
    else:
        results = [run(s) for s in samples]
    for m, a, px, td, ti in results:
        score.manual.add(m)
        score.automatic.add(a)
        score.pixels.add(px)
        det.append(td)
        ident.append(ti)
    return score, det, ident


def run_evaluation(dataset: Dataset, config: PipelineConfig = PipelineConfig(), repeats: int = 1,
                   seed: int = 0, jobs: int = 1, test_dataset: Optional[Dataset] = None) -> EvalReport:
    """Repeat the leave-one-surgery-out protocol ``repeats`` times and average at count level.

    Models always train on ``dataset`` ("set1"). Each fold tests on the held-out
    surgery of set1 and, when ``test_dataset`` is given, on the surgery of the
    same id in it ("set2").
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    splits = loso_splits(dataset)
    tests = {"set1": dataset}
    if test_dataset is not None:
        tests["set2"] = test_dataset
    cache = DescriptorCache(config.surf_hessian_threshold)
    folds = []
    for r in range(repeats):
        for f, (train_ids, test_id) in enumerate(splits):
            s = fold_seed(seed, r, f)
            log.info("repeat %d fold %d: test %s (seed %d)", r, f, test_id, s)
            fold = FoldResult(r, f, test_id, train_ids, s)
            try:
                t = time.perf_counter()
                model = train_pipeline(dataset.subset(train_ids), config, s, jobs, cache)
                fold.train_s = time.perf_counter() - t
                for name, data in tests.items():
                    score, det, ident = evaluate_model(model, data.groups.get(test_id, ()), cache, jobs)
                    fold.sets[name] = score
                    fold.t_detect_ms += det
                    fold.t_identify_ms += ident
            except Exception as exc:  # a failed fold is reported, not fatal
                log.exception("fold %d of repeat %d failed", f, r)
                fold.sets = {}
                fold.error = f"{type(exc).__name__}: {exc}"
            folds.append(fold)
    return aggregate(folds, repeats, seed, config, list(tests))


def aggregate(folds: list[FoldResult], repeats: int, seed: int, config: PipelineConfig,
              set_names: Sequence[str] = ("set1",)) -> EvalReport:
    totals = {name: SetScore() for name in set_names}
    for f in folds:
        for name, score in f.sets.items():
            totals[name].add(score)
    k = 1.0 / repeats
    averaged = {}
    for name, score in totals.items():
        # detection counts are averaged over repeats; pixel counts are rescaled in summary()
        averaged[name] = SetScore(score.manual.scaled(k), score.automatic.scaled(k),
                                  score.pixels, score.frames)
    return EvalReport(repeats, seed, config.to_dict(), folds, averaged)
