"""Flat ``key = value`` parameter files.

Blank lines and ``#`` comments are ignored. Every key is optional; missing
keys keep their defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .boxes import BoxConfig
from .cascade import CascadeConfig
from .errors import ConfigError
from .forest import ForestConfig
from .modelfile import DetectionParams
from .segment import SegmenterConfig


@dataclass(frozen=True)
class PipelineConfig:
    seg_trees: int = 50
    seg_depth: int = 10
    seg_bg_threshold: float = 0.6
    cascade_trees: int = 300
    cascade_depth: int = 8
    cascade_beta: float = 0.6
    pca_alpha: float = 0.95
    bow_k: int = 100
    boxes_close_kernel: int = 5
    boxes_min_area: int = 100
    boxes_proximity_px: float = 20.0
    boxes_angle_deg: float = 15.0
    surf_hessian_threshold: float = 500.0
    seg_pixels_per_frame: int = 2000
    # cap on descriptors fed to PCA and k-means; 0 keeps all
    bow_max_descriptors: int = 20000

    def __post_init__(self):
        checks = [
            (self.seg_trees >= 1, "seg.trees must be >= 1"),
            (self.seg_depth >= 1, "seg.depth must be >= 1"),
            (0 < self.seg_bg_threshold <= 1, "seg.bg_threshold must lie in (0, 1]"),
            (self.cascade_trees >= 1, "cascade.trees must be >= 1"),
            (self.cascade_depth >= 1, "cascade.depth must be >= 1"),
            (0 < self.cascade_beta < 1, "cascade.beta must lie in (0, 1)"),
            (0 < self.pca_alpha <= 1, "pca.alpha must lie in (0, 1]"),
            (self.bow_k >= 1, "bow.k must be >= 1"),
            (self.boxes_close_kernel >= 1, "boxes.close_kernel must be >= 1"),
            (self.boxes_min_area >= 1, "boxes.min_area must be >= 1"),
            (self.boxes_proximity_px >= 0, "boxes.proximity_px must be >= 0"),
            (0 <= self.boxes_angle_deg <= 90, "boxes.angle_deg must lie in [0, 90]"),
            (self.surf_hessian_threshold >= 0, "surf.hessian_threshold must be >= 0"),
            (self.seg_pixels_per_frame >= 2, "seg.pixels_per_frame must be >= 2"),
            (self.bow_max_descriptors >= 0, "bow.max_descriptors must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def segmenter(self, seed: int) -> SegmenterConfig:
        return SegmenterConfig(ForestConfig(self.seg_trees, self.seg_depth, rng_seed=seed),
                               self.seg_pixels_per_frame)

    def cascade(self, seed1: int, seed2: int) -> CascadeConfig:
        return CascadeConfig(ForestConfig(self.cascade_trees, self.cascade_depth, rng_seed=seed1),
                             ForestConfig(self.cascade_trees, self.cascade_depth, rng_seed=seed2),
                             self.cascade_beta)

    def detection_params(self) -> DetectionParams:
        return DetectionParams(BoxConfig(self.boxes_close_kernel, self.boxes_min_area,
                                         self.boxes_proximity_px, self.boxes_angle_deg),
                               self.surf_hessian_threshold)

    def to_dict(self) -> dict:
        return {_key(f.name): getattr(self, f.name) for f in fields(self)}


def _key(attr: str) -> str:
    return attr.replace("_", ".", 1)


_FIELDS = {_key(f.name): f for f in fields(PipelineConfig)}


def parse_config(text: str, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        f = _FIELDS[key]
        try:
            updates[f.name] = int(value) if f.type in (int, "int") else float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return replace(base, **updates)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text())
