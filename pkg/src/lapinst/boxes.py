"""Candidate instrument boxes from a binary segmentation map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .core import BoundingBox
from .errors import DegeneratePoints

MAX_CANDIDATES = 5


@dataclass(frozen=True)
class BoxConfig:
    close_kernel: int = 5
    min_area: int = 100
    proximity_px: float = 20.0
    angle_deg: float = 15.0


@dataclass(frozen=True, eq=False)
class Contour:
    points: np.ndarray  # (n, 2) int, (x, y) boundary pixels
    area: int
    principal_direction: tuple[float, float]
    centroid: tuple[float, float]

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) with exclusive upper edges."""
        mn = self.points.min(axis=0)
        mx = self.points.max(axis=0)
        return int(mn[0]), int(mn[1]), int(mx[0]) + 1, int(mx[1]) + 1

    def box(self) -> BoundingBox:
        x0, y0, x1, y1 = self.bounds
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def principal_direction(points) -> tuple[float, float]:
    """Major eigenvector of the 2x2 point covariance, sign fixed so x >= 0 (y >= 0 on tie)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2 or np.all(pts == pts[0]):
        raise DegeneratePoints("principal direction needs at least two distinct points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    # closed-form major axis of [[a, b], [b, c]]
    lam = 0.5 * (a + c) + math.sqrt(0.25 * (a - c) ** 2 + b * b)
    # pick the algebraically equivalent form that avoids cancellation
    if a >= c:
        vx, vy = lam - c, b
    else:
        vx, vy = b, lam - a
    norm = math.hypot(vx, vy)
    if norm == 0.0:  # isotropic spread: no preferred axis
        vx, vy, norm = 1.0, 0.0, 1.0
    vx, vy = vx / norm, vy / norm
    if vx < 0 or (vx == 0 and vy < 0):
        vx, vy = -vx, -vy
    return (float(vx) + 0.0, float(vy) + 0.0)


def _make_contour(points: np.ndarray, area: int) -> Contour:
    pts = np.ascontiguousarray(points, dtype=np.int64).reshape(-1, 2)
    try:
        direction = principal_direction(pts)
    except DegeneratePoints:
        direction = (1.0, 0.0)
    c = pts.mean(axis=0)
    return Contour(pts, int(area), direction, (float(c[0]), float(c[1])))


def close_map(seg: np.ndarray, kernel: int = 5) -> np.ndarray:
    se = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (kernel, kernel))
    return cv2.morphologyEx(seg.astype(np.uint8), cv2.MORPH_CLOSE, se, iterations=1) > 0


def extract_contours(seg: np.ndarray, config: BoxConfig = BoxConfig()) -> list[Contour]:
    """Close the map, label 8-connected components and trace each outer boundary."""
    closed = close_map(np.asarray(seg, dtype=bool), config.close_kernel)
    if not closed.any():
        return []
    n, labels, stats, _ = cv2.connectedComponentsWithStats(closed.astype(np.uint8), connectivity=8)
    contours = []
    for lab in range(1, n):
        area = int(stats[lab, cv2.CC_STAT_AREA])
        if area < config.min_area:
            continue
        x, y = stats[lab, cv2.CC_STAT_LEFT], stats[lab, cv2.CC_STAT_TOP]
        w, h = stats[lab, cv2.CC_STAT_WIDTH], stats[lab, cv2.CC_STAT_HEIGHT]
        comp = (labels[y:y + h, x:x + w] == lab).astype(np.uint8)
        traced, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        pts = np.concatenate([t.reshape(-1, 2) for t in traced]) + np.array([x, y])
        contours.append(_make_contour(pts, area))
    return contours


def direction_angle(d1, d2) -> float:
    """Angle in degrees between two undirected axes, in [0, 90]."""
    dot = abs(d1[0] * d2[0] + d1[1] * d2[1])
    return math.degrees(math.acos(min(dot, 1.0)))


def box_gap(a: Contour, b: Contour) -> float:
    """Euclidean distance between the bounding boxes of two contours (0 if they overlap)."""
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    gx = max(0, max(ax0, bx0) - min(ax1, bx1))
    gy = max(0, max(ay0, by0) - min(ay1, by1))
    return math.hypot(gx, gy)


def fuse_contours(contours: list[Contour], config: BoxConfig = BoxConfig()) -> list[Contour]:
    """Merge the transitive closure of near, similarly oriented contour pairs."""
    n = len(contours)
    if n <= 1:
        return list(contours)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = contours[i], contours[j]
            if (direction_angle(a.principal_direction, b.principal_direction) <= config.angle_deg
                    and box_gap(a, b) <= config.proximity_px):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    fused = []
    for members in groups.values():
        if len(members) == 1:
            fused.append(contours[members[0]])
            continue
        pts = np.concatenate([contours[i].points for i in members])
        # canonical point order keeps the result independent of input order
        pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
        fused.append(_make_contour(pts, sum(contours[i].area for i in members)))
    return fused


def candidate_boxes(seg: np.ndarray, config: BoxConfig = BoxConfig(),
                    limit: int = MAX_CANDIDATES) -> list[BoundingBox]:
    contours = fuse_contours(extract_contours(seg, config), config)
    boxes = sorted({c.box() for c in contours}, key=lambda b: (-b.area, b.x, b.y))
    return boxes[:limit]
