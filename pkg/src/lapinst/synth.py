"""Deterministic synthetic laparoscopy-like frames with exact annotations.

Each frame has a dark circular scope border, red textured tissue whose tint
and texture scale vary per surgery, and 0 to ``max_tools`` straight-shaft
instruments. Tool archetypes differ in shaft colour and tip geometry. Tool
bounding boxes never come within ``margin`` pixels of each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import Annotation, BoundingBox, Dataset, Frame, LabeledBox, Sample, ToolClass
from .dataset import boxes_document, write_gray, write_rgb


@dataclass(frozen=True)
class Archetype:
    label: ToolClass
    shaft_rgb: tuple[int, int, int]
    tip_rgb: tuple[int, int, int]
    tip: str  # jaw | prongs | round | taper | blunt
    rivet_rgb: tuple[int, int, int] = (15, 15, 15)


ARCHETYPES = (
    Archetype(ToolClass.LIGASURE, (45, 80, 205), (45, 45, 55), "jaw", (235, 235, 235)),
    Archetype(ToolClass.ATRAUMATIC_GRASPER, (50, 175, 70), (30, 110, 45), "prongs"),
    Archetype(ToolClass.ASPIRATOR, (195, 195, 205), (150, 150, 160), "round"),
    Archetype(ToolClass.CLIP_APPLIER, (215, 185, 40), (180, 150, 30), "taper"),
)
UNKNOWN_ARCHETYPE = Archetype(ToolClass.UNKNOWN, (150, 60, 175), (120, 45, 140), "blunt", (235, 235, 235))
# rivets are high-contrast blobs large enough for the smallest detected SURF scale
RIVET_SPACING = 14.0
RIVET_RADIUS = 4


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    frames: int = 210
    surgeries: int = 3
    width: int = 320
    height: int = 240
    max_tools: int = 3
    margin: int = 25
    unknown_rate: float = 0.04
    tool_noise: float = 0.05
    tissue_boxes: tuple[int, int] = (1, 2)

    def __post_init__(self):
        if self.frames < 0 or self.surgeries < 1:
            raise ValueError("frames must be >= 0 and surgeries >= 1")
        if min(self.width, self.height) < 64:
            raise ValueError("synthetic frames must be at least 64 px on each side")
        if not 0 <= self.max_tools <= 3:
            raise ValueError("max_tools must lie in [0, 3]")


@dataclass(frozen=True)
class ToolPlacement:
    archetype: str
    x: float
    y: float
    angle_deg: float
    length: float
    width: float


@dataclass(frozen=True)
class SynthFrame:
    surgery_id: str
    frame_id: str
    pixels: np.ndarray
    mask: np.ndarray
    boxes: tuple[LabeledBox, ...]
    placements: tuple[ToolPlacement, ...]


def surgery_id(index: int) -> str:
    return f"surgery{index + 1:02d}"


def _smooth_noise(rng, h, w, scale):
    small = rng.random((max(2, int(h / scale)) + 1, max(2, int(w / scale)) + 1))
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_CUBIC)


def _tissue(rng, palette, h, w):
    base = np.array(palette["base"], dtype=np.float64)
    shade = 0.78 + 0.4 * np.clip(_smooth_noise(rng, h, w, palette["scale"]), 0, 1)
    # small dark speckles give the tissue some blob structure
    spots = np.ones((h, w))
    for _ in range(int(h * w * palette["speckle"])):
        centre = (int(rng.integers(w)), int(rng.integers(h)))
        cv2.circle(spots, centre, int(rng.integers(2, 5)), float(rng.uniform(0.3, 0.6)), -1)
    fine = rng.normal(0.0, 4.0, (h, w, 3))
    img = base[None, None, :] * (shade * spots)[..., None] + fine
    return np.clip(img, 25, 255)


def _surgery_palette(seed: int, index: int) -> dict:
    rng = np.random.default_rng([seed, index, 7])
    return {
        "base": (float(rng.uniform(160, 200)), float(rng.uniform(45, 75)), float(rng.uniform(45, 70))),
        "scale": float(rng.uniform(18, 40)),
        "speckle": float(rng.uniform(1 / 1500, 1 / 800)),
        "radius_frac": (float(rng.uniform(0.56, 0.6)), float(rng.uniform(0.6, 0.66))),
    }


def _tool_polygons(p: ToolPlacement, tip: str):
    """Shaft polygon, tip polygons and tip circles in image coordinates."""
    u = np.array([math.cos(math.radians(p.angle_deg)), math.sin(math.radians(p.angle_deg))])
    n = np.array([-u[1], u[0]])
    p0 = np.array([p.x, p.y])
    p1 = p0 + p.length * u
    hw = p.width / 2
    shaft = [p0 + n * hw, p1 + n * hw, p1 - n * hw, p0 - n * hw]
    tip_len = 0.25 * p.length
    polys, circles = [], []
    if tip == "jaw":
        polys.append([p1 + n * 0.8 * p.width, p1 + tip_len * u + n * 0.8 * p.width,
                      p1 + tip_len * u - n * 0.8 * p.width, p1 - n * 0.8 * p.width])
    elif tip == "prongs":
        pw = p.width / 3
        for s in (1, -1):
            a = p1 + s * n * (hw - pw)
            b = p1 + s * n * hw
            c = p1 + tip_len * u + s * n * (hw + 0.5 * p.width)
            d = c - s * n * pw
            polys.append([a, b, c, d])
    elif tip == "round":
        circles.append((p1 + 0.3 * p.width * u, 0.75 * p.width))
    elif tip == "taper":
        polys.append([p1 + n * hw, p1 + tip_len * u, p1 - n * hw])
    else:
        polys.append([p1 + n * hw, p1 + 0.15 * p.width * u + n * hw,
                      p1 + 0.15 * p.width * u - n * hw, p1 - n * hw])
    return shaft, polys, circles, p0, u


def _rasterise(p: ToolPlacement, arch: Archetype, h: int, w: int):
    """Part map: 0 none, 1 shaft, 2 tip, 3 shaft band, 4 rivet."""
    shaft, polys, circles, p0, u = _tool_polygons(p, arch.tip)
    part = np.zeros((h, w), dtype=np.uint8)
    cv2.fillPoly(part, [np.round(shaft).astype(np.int32)], 1)
    rivets = np.zeros_like(part)
    for t in np.arange(6.0, p.length - 4.0, RIVET_SPACING):
        c = p0 + t * u
        cv2.circle(rivets, (int(round(c[0])), int(round(c[1]))), RIVET_RADIUS, 1, -1)
    part[(rivets > 0) & (part == 1)] = 4
    for poly in polys:
        cv2.fillPoly(part, [np.round(np.array(poly)).astype(np.int32)], 2)
    for centre, radius in circles:
        cv2.circle(part, (int(round(centre[0])), int(round(centre[1]))), int(round(radius)), 2, -1)
    if arch.tip == "round":
        ys, xs = np.nonzero(part == 1)
        t = (xs - p0[0]) * u[0] + (ys - p0[1]) * u[1]
        band = (t % 16.0) < 4.0
        part[ys[band], xs[band]] = 3
    return part


def _place_tools(rng, params: SynthParams, circle, count: int):
    cx, cy, r = circle
    placed, boxes, masks = [], [], []
    h, w = params.height, params.width
    for _ in range(count):
        arch = UNKNOWN_ARCHETYPE if rng.random() < params.unknown_rate else ARCHETYPES[rng.integers(4)]
        for _attempt in range(60):
            length = float(rng.uniform(55, 100))
            width = float(rng.uniform(10, 15))
            angle = float(rng.uniform(0, 360))
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(0, 0.75 * r)
            pl = ToolPlacement(arch.label.label, float(cx + dist * math.cos(ang)),
                               float(cy + dist * math.sin(ang)), angle, length, width)
            part = _rasterise(pl, arch, h, w)
            ys, xs = np.nonzero(part)
            if len(xs) == 0:
                continue
            # keep every tool pixel well inside the scope circle
            if np.max((xs - cx) ** 2 + (ys - cy) ** 2) > (r - 6) ** 2:
                continue
            box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                              int(ys.max() - ys.min() + 1))
            grown = BoundingBox(box.x - params.margin, box.y - params.margin,
                                box.w + 2 * params.margin, box.h + 2 * params.margin)
            if any(grown.intersection_area(b) > 0 for b in boxes):
                continue
            placed.append((pl, arch))
            boxes.append(box)
            masks.append(part)
            break
    return placed, boxes, masks


def _tissue_boxes(rng, params: SynthParams, circle, tool_boxes, count: int):
    cx, cy, r = circle
    out = []
    for _ in range(count):
        for _attempt in range(60):
            bw, bh = int(rng.integers(30, 80)), int(rng.integers(30, 80))
            x = int(rng.integers(0, params.width - bw))
            y = int(rng.integers(0, params.height - bh))
            box = BoundingBox(x, y, bw, bh)
            corners = [(x, y), (x + bw, y), (x, y + bh), (x + bw, y + bh)]
            if any((px - cx) ** 2 + (py - cy) ** 2 > (r - 4) ** 2 for px, py in corners):
                continue
            if any(box.intersection_area(b) > 0 for b in list(tool_boxes) + out):
                continue
            out.append(box)
            break
    return out


def render_frame(params: SynthParams, surgery_index: int, frame_index: int) -> SynthFrame:
    rng = np.random.default_rng([params.seed, surgery_index, frame_index])
    palette = _surgery_palette(params.seed, surgery_index)
    h, w = params.height, params.width
    cx = w / 2 + rng.uniform(-4, 4)
    cy = h / 2 + rng.uniform(-4, 4)
    r = math.hypot(w, h) / 2 * rng.uniform(*palette["radius_frac"])
    img = _tissue(rng, palette, h, w)

    n_tools = int(rng.integers(0, params.max_tools + 1))
    placed, tool_boxes, parts = _place_tools(rng, params, (cx, cy, r), n_tools)
    mask = np.zeros((h, w), dtype=bool)
    for (pl, arch), part in zip(placed, parts):
        shade = 1.0 + params.tool_noise * rng.standard_normal((h, w))
        colours = ((1, arch.shaft_rgb), (2, arch.tip_rgb), (3, tuple(0.6 * c for c in arch.shaft_rgb)),
                   (4, arch.rivet_rgb))
        for code, rgb in colours:
            sel = part == code
            img[sel] = np.array(rgb, dtype=np.float64)[None, :] * shade[sel][:, None]
        mask |= part > 0

    yy, xx = np.mgrid[0:h, 0:w]
    outside = (xx - cx) ** 2 + (yy - cy) ** 2 > r ** 2
    img[outside] = rng.integers(0, 3, (int(outside.sum()), 3))
    pixels = np.clip(np.round(img), 0, 255).astype(np.uint8)
    mask &= ~outside

    lo, hi = params.tissue_boxes
    extra = _tissue_boxes(rng, params, (cx, cy, r), tool_boxes, int(rng.integers(lo, hi + 1)))
    labeled = [LabeledBox(b, arch.label) for b, (_, arch) in zip(tool_boxes, placed)]
    labeled += [LabeledBox(b, ToolClass.NO_INSTRUMENT) for b in extra]
    return SynthFrame(surgery_id(surgery_index), f"frame{frame_index:04d}", pixels, mask,
                      tuple(labeled), tuple(pl for pl, _ in placed))


def frames_per_surgery(params: SynthParams) -> list[int]:
    base, rem = divmod(params.frames, params.surgeries)
    return [base + (1 if i < rem else 0) for i in range(params.surgeries)]


def generate(params: SynthParams):
    """Yield every SynthFrame in (surgery, frame) order."""
    for s, count in enumerate(frames_per_surgery(params)):
        for f in range(count):
            yield render_frame(params, s, f)


def to_sample(sf: SynthFrame) -> Sample:
    frame = Frame(sf.surgery_id, sf.frame_id, sf.pixels)
    return Sample(frame, Annotation(sf.frame_id, sf.mask, sf.boxes))


def generate_dataset(params: SynthParams) -> Dataset:
    groups: dict[str, list[Sample]] = {}
    for sf in generate(params):
        groups.setdefault(sf.surgery_id, []).append(to_sample(sf))
    return Dataset(groups)


def write_dataset(params: SynthParams, out_dir) -> dict:
    """Render to the on-disk dataset layout and return the manifest."""
    out = Path(out_dir)
    records = []
    for sf in generate(params):
        base = out / sf.surgery_id
        write_rgb(base / "frames" / f"{sf.frame_id}.png", sf.pixels)
        write_gray(base / "masks" / f"{sf.frame_id}.png", sf.mask.astype(np.uint8) * 255)
        (base / "boxes").mkdir(parents=True, exist_ok=True)
        (base / "boxes" / f"{sf.frame_id}.json").write_text(
            json.dumps(boxes_document(sf.boxes), sort_keys=True) + "\n")
        records.append({
            "surgery": sf.surgery_id,
            "frame": sf.frame_id,
            "tools": [asdict(p) for p in sf.placements],
            "boxes": boxes_document(sf.boxes)["boxes"],
        })
    manifest = {
        "seed": params.seed,
        "frame_count": len(records),
        "params": {k: v for k, v in asdict(params).items() if k != "seed"},
        "palette": {a.label.label: {"shaft": a.shaft_rgb, "tip": a.tip_rgb, "tip_shape": a.tip}
                    for a in ARCHETYPES + (UNKNOWN_ARCHETYPE,)},
        "frames": records,
    }
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, sort_keys=True, indent=1)
    (out / "manifest.json").write_text(text + "\n")
    # return exactly what was written (tuples become lists)
    return json.loads(text)
