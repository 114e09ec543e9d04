"""Domain types flowing through the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionMismatch, UnknownLabelString

MIN_FRAME_SIDE = 16


class ToolClass(enum.IntEnum):
    """Label alphabet. The integer value doubles as the classifier class index."""

    NO_INSTRUMENT = 0
    LIGASURE = 1
    ATRAUMATIC_GRASPER = 2
    ASPIRATOR = 3
    CLIP_APPLIER = 4
    UNKNOWN = 5

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "ToolClass":
        try:
            return _BY_LABEL[text]
        except KeyError:
            raise UnknownLabelString(f"unknown label string {text!r}") from None

    @property
    def is_instrument(self) -> bool:
        return self is not ToolClass.NO_INSTRUMENT


_LABELS = {
    ToolClass.NO_INSTRUMENT: "no_instrument",
    ToolClass.LIGASURE: "ligasure",
    ToolClass.ATRAUMATIC_GRASPER: "atraumatic_grasper",
    ToolClass.ASPIRATOR: "aspirator",
    ToolClass.CLIP_APPLIER: "clip_applier",
    ToolClass.UNKNOWN: "unknown",
}
_BY_LABEL = {v: k for k, v in _LABELS.items()}

# classes a classifier may output (Unknown is annotation-only)
CLASSIFIER_CLASSES = tuple(c for c in ToolClass if c is not ToolClass.UNKNOWN)
NUM_CLASSES = len(CLASSIFIER_CLASSES)


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB image (H x W x 3, uint8) tagged with its surgery and frame ids."""

    surgery_id: str
    frame_id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DimensionMismatch(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] < MIN_FRAME_SIDE or px.shape[1] < MIN_FRAME_SIDE:
            raise DimensionMismatch(
                f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {px.shape[1]}x{px.shape[0]}"
            )
        if px.flags.writeable or px.dtype != np.uint8 or not px.flags.c_contiguous:
            # private copy so the caller's buffer stays writable and cannot alias
            px = np.array(px, dtype=np.uint8, order="C")
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def key(self) -> tuple[str, str]:
        return (self.surgery_id, self.frame_id)

    def with_pixels(self, pixels: np.ndarray) -> "Frame":
        return Frame(self.surgery_id, self.frame_id, pixels)


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned box; (x, y) is the top-left pixel, w/h are sizes in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> int:
        """Exclusive right edge."""
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersection_area(self, other: "BoundingBox") -> int:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0
        return iw * ih

    def clip(self, width: int, height: int) -> Optional["BoundingBox"]:
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x2, width), min(self.y2, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def pad(self, fraction: float, width: int, height: int) -> "BoundingBox":
        """Grow every side by ``fraction`` of the box side, clipped to the frame."""
        px = int(round(self.w * fraction))
        py = int(round(self.h * fraction))
        grown = BoundingBox(self.x - px, self.y - py, self.w + 2 * px, self.h + 2 * py)
        return grown.clip(width, height)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class LabeledBox:
    box: BoundingBox
    label: ToolClass


@dataclass(frozen=True, eq=False)
class Annotation:
    """Ground truth for one frame: a pixel mask, labeled boxes, or both."""

    frame_id: str
    pixel_mask: Optional[np.ndarray] = None
    boxes: tuple[LabeledBox, ...] = ()

    def __post_init__(self):
        if self.pixel_mask is not None:
            m = np.ascontiguousarray(self.pixel_mask, dtype=bool)
            m.flags.writeable = False
            object.__setattr__(self, "pixel_mask", m)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def check_against(self, frame: Frame) -> None:
        if self.pixel_mask is not None and self.pixel_mask.shape != (frame.height, frame.width):
            raise DimensionMismatch(
                f"mask {self.pixel_mask.shape[::-1]} does not match frame "
                f"{frame.width}x{frame.height} ({frame.surgery_id}/{frame.frame_id})"
            )


@dataclass(frozen=True)
class Sample:
    frame: Frame
    annotation: Annotation


@dataclass(frozen=True)
class Dataset:
    """Frames grouped by surgery. Groups and frames are kept in sorted id order."""

    groups: dict[str, tuple[Sample, ...]] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {
            sid: tuple(sorted(self.groups[sid], key=lambda s: s.frame.frame_id))
            for sid in sorted(self.groups)
        }
        object.__setattr__(self, "groups", ordered)

    @property
    def surgeries(self) -> list[str]:
        return list(self.groups)

    def __len__(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def __iter__(self) -> Iterator[Sample]:
        for samples in self.groups.values():
            yield from samples

    def subset(self, surgeries) -> "Dataset":
        return Dataset({s: self.groups[s] for s in surgeries})

    def class_counts(self) -> dict[ToolClass, int]:
        counts = {c: 0 for c in ToolClass}
        for sample in self:
            for lb in sample.annotation.boxes:
                counts[lb.label] += 1
        return counts
