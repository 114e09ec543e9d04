"""End-to-end training of a PipelineModel from an annotated dataset."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cascade import DescriptorCache, DescriptorSource, prepare_frame, train_cascade
from .config import PipelineConfig
from .core import Dataset, ToolClass
from .errors import NoContent
from .features import build_vocabulary, fit_pca, reduce
from .modelfile import PipelineModel
from .segment import train_segmenter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageSeeds:
    segmenter: int
    vocabulary: int
    subsample: int
    stage1: int
    stage2: int

    @classmethod
    def derive(cls, seed: int) -> "StageSeeds":
        state = np.random.SeedSequence(seed).generate_state(5)
        return cls(*(int(s) for s in state))


@dataclass
class TrainStats:
    timings_s: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def training_boxes(dataset: Dataset):
    """(masked frame, circle mask, box, label) for every usable annotated box."""
    out = []
    for sample in dataset:
        boxes = [lb for lb in sample.annotation.boxes if lb.label is not ToolClass.UNKNOWN]
        if not boxes:
            continue
        try:
            masked, circle = prepare_frame(sample.frame)
        except NoContent:
            continue
        for lb in boxes:
            clipped = lb.box.clip(masked.width, masked.height)
            if clipped is not None:
                out.append((masked, circle, clipped, lb.label))
    return out


def train_pipeline(dataset: Dataset, config: PipelineConfig = PipelineConfig(), seed: int = 0,
                   jobs: int = 1, descriptor_source: Optional[DescriptorSource] = None,
                   stats: Optional[TrainStats] = None) -> PipelineModel:
    seeds = StageSeeds.derive(seed)
    stats = stats if stats is not None else TrainStats()
    source = descriptor_source or DescriptorCache(config.surf_hessian_threshold)

    t = time.perf_counter()
    seg = train_segmenter(dataset, config.segmenter(seeds.segmenter), jobs=jobs)
    stats.timings_s["segmentation"] = time.perf_counter() - t

    t = time.perf_counter()
    boxes = training_boxes(dataset)
    descriptors = [source(frame, box) for frame, _, box, _ in boxes]
    pool = np.concatenate([d for d in descriptors if len(d)] or [np.empty((0, 64))])
    if config.bow_max_descriptors and len(pool) > config.bow_max_descriptors:
        rng = np.random.default_rng(seeds.subsample)
        pool = pool[np.sort(rng.choice(len(pool), config.bow_max_descriptors, replace=False))]
    pca = fit_pca(pool, config.pca_alpha)
    vocabulary = build_vocabulary(reduce(pca, pool), config.bow_k, seeds.vocabulary)
    stats.timings_s["vocabulary"] = time.perf_counter() - t
    stats.counts.update(training_boxes=len(boxes), descriptors=len(pool),
                        pca_dim=pca.m_hat, vocabulary_k=vocabulary.k)

    t = time.perf_counter()
    stage1, stage2 = train_cascade(boxes, pca, vocabulary, config.cascade(seeds.stage1, seeds.stage2),
                                   config.surf_hessian_threshold, source, jobs)
    stats.timings_s["cascade"] = time.perf_counter() - t

    model = PipelineModel(seg, stage1, stage2, pca, vocabulary, config.cascade_beta,
                          config.seg_bg_threshold, config.detection_params())
    model.validate()
    return model
