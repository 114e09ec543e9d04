"""Detection and removal of the dark circular endoscope border."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame
from .errors import DimensionMismatch, NoContent

BLACK_THRESHOLD = 3
# slack on the inside test so corner pixels of a circumscribed circle stay inside
_RADIUS_EPS = 1e-7


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64."""
    px = pixels.astype(np.float64)
    return 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]


@dataclass(frozen=True, eq=False)
class CircleMask:
    center_x: float
    center_y: float
    radius: float
    mask: np.ndarray  # bool, H x W, True inside the circle

    @classmethod
    def from_circle(cls, cx: float, cy: float, radius: float, width: int, height: int) -> "CircleMask":
        if radius <= 0:
            raise ValueError("radius must be positive")
        ys, xs = np.mgrid[0:height, 0:width]
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius * (1 + _RADIUS_EPS)
        inside.flags.writeable = False
        return cls(float(cx), float(cy), float(radius), inside)

    @classmethod
    def full(cls, width: int, height: int) -> "CircleMask":
        cx, cy = (width - 1) / 2, (height - 1) / 2
        m = np.ones((height, width), dtype=bool)
        m.flags.writeable = False
        return cls(cx, cy, float(np.hypot(cx, cy)), m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def diagonal_hits(binary: np.ndarray) -> list[tuple[float, float]]:
    """Walk from each corner toward the center; return the first lit pixel per diagonal."""
    h, w = binary.shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    steps = int(np.ceil(max(cx, cy)))
    hits = []
    for x0, y0 in ((0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)):
        dx, dy = (cx - x0) / steps, (cy - y0) / steps
        for i in range(steps + 1):
            x = int(round(x0 + dx * i))
            y = int(round(y0 + dy * i))
            if binary[y, x]:
                hits.append((float(x), float(y)))
                break
    return hits


def fit_circle(points: list[tuple[float, float]], width: int, height: int) -> tuple[float, float, float]:
    """Circle from diagonal hit points: Kasa least squares for 4, circumcircle for 3."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) >= 3:
        if len(pts) == 3:
            circle = _circumcircle(pts)
        else:
            circle = _kasa(pts)
        if circle is not None:
            return circle
    # 1-2 hits, or collinear hits: center on the frame, through the nearest hit
    cx, cy = (width - 1) / 2, (height - 1) / 2
    r = float(np.min(np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)))
    return cx, cy, max(r, 1.0)


def _kasa(pts: np.ndarray):
    x, y = pts[:, 0], pts[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    b = x * x + y * y
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3:
        return None
    cx, cy = sol[0] / 2, sol[1] / 2
    r2 = sol[2] + cx * cx + cy * cy
    if r2 <= 0:
        return None
    return float(cx), float(cy), float(np.sqrt(r2))


def _circumcircle(pts: np.ndarray):
    (ax, ay), (bx, by), (cx, cy) = pts
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        return None
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
    return float(ux), float(uy), float(np.hypot(ax - ux, ay - uy))


def generate_mask(frame: Frame) -> CircleMask:
    binary = to_gray(frame.pixels) > BLACK_THRESHOLD
    hits = diagonal_hits(binary)
    if not hits:
        raise NoContent(f"no non-black pixel on any diagonal ({frame.surgery_id}/{frame.frame_id})")
    cx, cy, r = fit_circle(hits, frame.width, frame.height)
    return CircleMask.from_circle(cx, cy, r, frame.width, frame.height)


def apply_mask(frame: Frame, mask: CircleMask) -> Frame:
    """Zero every pixel outside the circle."""
    if mask.shape != (frame.height, frame.width):
        raise DimensionMismatch(f"mask {mask.shape} does not match frame {(frame.height, frame.width)}")
    if mask.mask.all():
        return frame
    out = frame.pixels.copy()
    out[~mask.mask] = 0
    return frame.with_pixels(out)
