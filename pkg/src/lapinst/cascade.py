"""Two-stage box classifier: a colour-only instrument gate, then 5-class identification."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .boxes import candidate_boxes
from .core import NUM_CLASSES, BoundingBox, Frame, ToolClass
from .errors import NoContent, SingleClassInput
from .features import (PcaModel, Vocabulary, box_features, detect_describe_surf)
from .forest import ForestConfig, RandomForest, train
from .maskgen import CircleMask, apply_mask, generate_mask
from .modelfile import PipelineModel
from .segment import segment_frame

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.6
STAGE1_DIM = 20
NO_INSTRUMENT = int(ToolClass.NO_INSTRUMENT)

DescriptorSource = Callable[[Frame, BoundingBox], np.ndarray]


@dataclass(frozen=True)
class CascadeConfig:
    stage1: ForestConfig = ForestConfig(num_trees=300, max_depth=8)
    stage2: ForestConfig = ForestConfig(num_trees=300, max_depth=8)
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


class DescriptorCache:
    """Memoises raw SURF descriptors per (surgery, frame, box).

    Descriptors do not depend on any trained component, so repeated
    folds and repeats can share them.
    """

    def __init__(self, hessian_threshold: float):
        self.hessian_threshold = hessian_threshold
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0

    def __call__(self, frame: Frame, box: BoundingBox) -> np.ndarray:
        key = (frame.surgery_id, frame.frame_id, box)
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
        desc = detect_describe_surf(frame, box, self.hessian_threshold)
        desc.flags.writeable = False
        with self._lock:
            return self._store.setdefault(key, desc)

    def __len__(self) -> int:
        return len(self._store)


@dataclass(frozen=True, eq=False)
class Detection:
    box: BoundingBox
    label: ToolClass
    stage2_distribution: Optional[np.ndarray]
    stage1_background_probability: float
    empty_region: bool = False

    def to_dict(self) -> dict:
        p = None if self.stage2_distribution is None else [float(v) for v in self.stage2_distribution]
        return {"box": self.box.to_dict(), "label": self.label.label, "p": p}


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame_key: tuple[str, str]
    detections: tuple[Detection, ...]
    t_detect_ms: float
    t_identify_ms: float
    segmentation: Optional[np.ndarray] = None
    warning: Optional[str] = None


def _descriptors(source: Optional[DescriptorSource], frame: Frame, box: BoundingBox,
                 hessian_threshold: float) -> np.ndarray:
    if source is None:
        return detect_describe_surf(frame, box, hessian_threshold)
    return source(frame, box)


def train_cascade(samples: Sequence[tuple[Frame, object, BoundingBox, ToolClass]],
                  pca: PcaModel, vocabulary: Vocabulary,
                  config: CascadeConfig = CascadeConfig(),
                  hessian_threshold: float = 500.0,
                  descriptor_source: Optional[DescriptorSource] = None,
                  jobs: int = 1) -> tuple[RandomForest, RandomForest]:
    """Fit the gate on every box, then the identifier on the boxes the gate lets through.

    ``samples`` are ``(frame, mask, box, label)``; Unknown labels are rejected.
    Boxes without any in-mask pixel carry no colour evidence and are skipped.
    """
    kept, stage1 = [], []
    for frame, mask, box, label in samples:
        if label is ToolClass.UNKNOWN:
            raise ValueError("Unknown boxes cannot be used for training")
        base = box_features(frame, mask, box, stage=1)
        if base.empty_region:
            continue
        kept.append((frame, mask, box, label, base))
        stage1.append(base.stage1_vector())
    if not kept:
        raise SingleClassInput("no usable training boxes")
    X1 = np.array(stage1)
    labels = np.array([int(k[3]) for k in kept])
    y1 = (labels != NO_INSTRUMENT).astype(np.int64)
    if y1.min() == y1.max():
        raise SingleClassInput("stage 1 needs both no-instrument and instrument boxes")
    gate = train(X1, y1, config.stage1, num_classes=2, jobs=jobs)

    p_bg = gate.predict_proba_batch(X1)[:, NO_INSTRUMENT]
    passing = np.flatnonzero(p_bg < config.beta)
    log.info("cascade: %d boxes, %d pass the gate", len(kept), len(passing))

    def stage2_row(i):
        frame, mask, box, _, base = kept[i]
        desc = _descriptors(descriptor_source, frame, box, hessian_threshold)
        return box_features(frame, mask, box, pca, vocabulary, 2, hessian_threshold,
                            descriptors=desc, base=base).vector()

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(stage2_row, passing))
    else:
        rows = [stage2_row(i) for i in passing]
    y2 = labels[passing]
    if len(np.unique(y2)) < 2:
        raise SingleClassInput("stage 2 needs at least two classes among gated boxes")
    X2 = np.array(rows)
    identifier = train(X2, y2, config.stage2, num_classes=NUM_CLASSES, jobs=jobs)
    return gate, identifier


def classify_box(model: PipelineModel, frame: Frame, mask, box: BoundingBox,
                 descriptor_source: Optional[DescriptorSource] = None) -> Detection:
    """Gate the box on colour; only survivors pay for gradients and SURF."""
    base = box_features(frame, mask, box, stage=1)
    if base.empty_region:
        return Detection(box, ToolClass.NO_INSTRUMENT, None, 1.0, empty_region=True)
    p_bg = float(model.stage1_forest.predict_proba_batch(base.stage1_vector()[None, :])[0, NO_INSTRUMENT])
    if p_bg >= model.beta:
        return Detection(box, ToolClass.NO_INSTRUMENT, None, p_bg)
    hthr = model.params.hessian_threshold
    desc = _descriptors(descriptor_source, frame, box, hthr)
    feats = box_features(frame, mask, box, model.pca, model.vocabulary, 2, hthr,
                         descriptors=desc, base=base)
    dist = model.stage2_forest.predict_proba_batch(feats.vector()[None, :])[0]
    return Detection(box, ToolClass(int(np.argmax(dist))), dist, p_bg)


def prepare_frame(frame: Frame) -> tuple[Frame, CircleMask]:
    """Border mask and the frame with everything outside it zeroed."""
    circle = generate_mask(frame)
    return apply_mask(frame, circle), circle


def detect_boxes(model: PipelineModel, frame: Frame) -> tuple[Frame, CircleMask, np.ndarray, list[BoundingBox]]:
    masked, circle = prepare_frame(frame)
    seg = segment_frame(model.segmentation_forest, masked, circle, model.background_threshold)
    return masked, circle, seg, candidate_boxes(seg, model.params.boxes)


def classify_frame(model: PipelineModel, frame: Frame,
                   descriptor_source: Optional[DescriptorSource] = None,
                   keep_segmentation: bool = False) -> FrameResult:
    t0 = time.perf_counter()
    try:
        masked, circle, seg, boxes = detect_boxes(model, frame)
    except NoContent as exc:
        log.warning("%s/%s: %s", frame.surgery_id, frame.frame_id, exc)
        ms = (time.perf_counter() - t0) * 1e3
        return FrameResult(frame.key, (), ms, 0.0, None, str(exc))
    t1 = time.perf_counter()
    detections = tuple(classify_box(model, masked, circle, b, descriptor_source) for b in boxes)
    t2 = time.perf_counter()
    return FrameResult(frame.key, detections, (t1 - t0) * 1e3, (t2 - t1) * 1e3,
                       seg if keep_segmentation else None)


def detection_record(result: FrameResult, detection: Detection) -> dict:
    """One JSON-lines record."""
    rec = {"surgery": result.frame_key[0], "frame": result.frame_key[1]}
    rec.update(detection.to_dict())
    rec["t_detect_ms"] = round(result.t_detect_ms, 3)
    rec["t_identify_ms"] = round(result.t_identify_ms, 3)
    return rec
