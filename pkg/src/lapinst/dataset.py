"""On-disk dataset layout.

    <root>/<surgery_id>/frames/<frame_id>.png
    <root>/<surgery_id>/masks/<frame_id>.png    8-bit gray, 0 background, 255 instrument
    <root>/<surgery_id>/boxes/<frame_id>.json   {"boxes": [{"x", "y", "w", "h", "label"}]}
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .core import Annotation, BoundingBox, Dataset, Frame, LabeledBox, Sample, ToolClass
from .errors import DimensionMismatch, MissingAnnotation

FRAME_EXT = ".png"


def read_rgb(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_rgb(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(np.ascontiguousarray(pixels), cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"cannot encode {path}")
    path.write_bytes(buf.tobytes())


def write_gray(path: Path, gray: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(gray, dtype=np.uint8))
    if not ok:
        raise OSError(f"cannot encode {path}")
    path.write_bytes(buf.tobytes())


def read_mask(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise OSError(f"cannot decode mask {path}")
    return img > 127


def parse_boxes(doc: dict) -> tuple[LabeledBox, ...]:
    out = []
    for entry in doc.get("boxes", []):
        box = BoundingBox(int(entry["x"]), int(entry["y"]), int(entry["w"]), int(entry["h"]))
        out.append(LabeledBox(box, ToolClass.parse(entry["label"])))
    return tuple(out)


def boxes_document(boxes) -> dict:
    return {"boxes": [dict(lb.box.to_dict(), label=lb.label.label) for lb in boxes]}


def load_frame(path: Path, surgery_id: str) -> Frame:
    return Frame(surgery_id, path.stem, read_rgb(path))


def load_dataset(root) -> Dataset:
    """Load every surgery under ``root``; frames need a mask, a box file, or both."""
    root = Path(root)
    groups: dict[str, list[Sample]] = {}
    for surgery_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames_dir = surgery_dir / "frames"
        if not frames_dir.is_dir():
            continue
        samples = []
        for frame_path in sorted(frames_dir.glob(f"*{FRAME_EXT}")):
            frame = load_frame(frame_path, surgery_dir.name)
            mask_path = surgery_dir / "masks" / frame_path.name
            box_path = surgery_dir / "boxes" / (frame_path.stem + ".json")
            if not mask_path.exists() and not box_path.exists():
                raise MissingAnnotation(f"no mask or box annotation for {frame_path}")
            mask = read_mask(mask_path) if mask_path.exists() else None
            if mask is not None and mask.shape != (frame.height, frame.width):
                raise DimensionMismatch(
                    f"mask {mask_path} is {mask.shape[1]}x{mask.shape[0]}, "
                    f"frame is {frame.width}x{frame.height}")
            boxes = parse_boxes(json.loads(box_path.read_text())) if box_path.exists() else ()
            ann = Annotation(frame.frame_id, mask, boxes)
            ann.check_against(frame)
            samples.append(Sample(frame, ann))
        if samples:
            groups[surgery_dir.name] = samples
    return Dataset(groups)


def load_frames_dir(directory, surgery_id: str | None = None) -> list[Frame]:
    """Frames of a bare image directory (used by ``detect``)."""
    directory = Path(directory)
    sid = surgery_id or directory.name
    return [load_frame(p, sid) for p in sorted(directory.glob(f"*{FRAME_EXT}"))]
