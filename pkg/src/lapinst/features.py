"""Box descriptors for identification.

Per candidate box: 10-bin hue and saturation histograms, a 5-bin gradient
orientation histogram rotated so its peak bin comes first, a 5-bin gradient
magnitude histogram, and a k-bin bag-of-visual-words histogram over
PCA-reduced SURF descriptors.
"""

from __future__ import annotations

import csv
import logging
import threading
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import BoundingBox, Frame
from .errors import DegenerateCovariance, DimensionMismatch
from .maskgen import CircleMask, to_gray
from .segment import SOBEL_MAX, hsv_fraction, sobel
from .surf import DEFAULT_HESSIAN_THRESHOLD, DEFAULT_OCTAVES, filter_sizes, surf

log = logging.getLogger(__name__)

COLOR_BINS = 10
GRADIENT_BINS = 5
DEFAULT_K = 100
DEFAULT_ALPHA = 0.95
SURF_DIM = 64
# half-width of the largest Hessian filter in use
SURF_CONTEXT = (filter_sizes(DEFAULT_OCTAVES - 1)[-1] - 1) // 2
# gradients weaker than this fraction of the maximum response carry no orientation
ORIENTATION_EPS = 1e-3
GRADIENT_DECIMALS = 9
BIN_EDGE_EPS = 1e-9


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self):
        with self._lock:
            self.value += 1


# number of SURF extractions actually run; lets callers verify the cascade stays lazy
surf_calls = _Counter()


def _region(mask, box: BoundingBox, frame: Frame) -> np.ndarray:
    if box.x < 0 or box.y < 0 or box.x2 > frame.width or box.y2 > frame.height:
        raise DimensionMismatch(f"{box} exceeds frame {frame.width}x{frame.height}")
    if mask is None:
        return np.ones((box.h, box.w), dtype=bool)
    m = mask.mask if isinstance(mask, CircleMask) else np.asarray(mask, dtype=bool)
    if m.shape != (frame.height, frame.width):
        raise DimensionMismatch("mask does not match frame")
    return m[box.y:box.y2, box.x:box.x2]


def normalize(hist: np.ndarray) -> np.ndarray:
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    return hist / total if total > 0 else np.zeros_like(hist)


def uniform_bins(values: np.ndarray, nbins: int, upper: float) -> np.ndarray:
    """Bin index of each value over [0, upper); the top edge folds into the last bin."""
    # values on a bin edge must not drop a bin through float round-off
    return np.minimum(np.floor(values * (nbins / upper) + BIN_EDGE_EPS).astype(np.int64), nbins - 1)


def color_histograms(frame: Frame, mask, box: BoundingBox) -> tuple[np.ndarray, np.ndarray]:
    """L1-normalised 10-bin hue (over a full turn) and saturation histograms.

    Both are all-zero when the box holds no in-mask pixel.
    """
    inside = _region(mask, box, frame)
    patch = frame.pixels[box.y:box.y2, box.x:box.x2]
    hue, sat, _ = hsv_fraction(patch)
    hue, sat = hue[inside], sat[inside]
    h = np.bincount(uniform_bins(hue, COLOR_BINS, 1.0), minlength=COLOR_BINS)
    s = np.bincount(uniform_bins(sat, COLOR_BINS, 1.0), minlength=COLOR_BINS)
    return normalize(h), normalize(s)


def align_histogram(hist: np.ndarray) -> np.ndarray:
    """Rotate cyclically so the first maximal bin sits at index 0."""
    hist = np.asarray(hist)
    if not hist.any():
        return hist.copy()
    return np.roll(hist, -int(np.argmax(hist)))


def box_gradients(frame: Frame, box: BoundingBox) -> tuple[np.ndarray, np.ndarray]:
    """Sobel orientation (degrees, [0, 180)) and scaled magnitude over the box.

    Computed on the box plus a one-pixel rim so values match a whole-frame pass.
    """
    x0, y0 = max(box.x - 1, 0), max(box.y - 1, 0)
    x1, y1 = min(box.x2 + 1, frame.width), min(box.y2 + 1, frame.height)
    gray = to_gray(frame.pixels[y0:y1, x0:x1])
    gx, gy = sobel(gray)
    sl = (slice(box.y - y0, box.y - y0 + box.h), slice(box.x - x0, box.x - x0 + box.w))
    # exact values on 8-bit input are multiples of 1e-3; drop luma-weight rounding noise
    gx, gy = np.round(gx[sl], GRADIENT_DECIMALS) + 0.0, np.round(gy[sl], GRADIENT_DECIMALS) + 0.0
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    theta[theta >= 180.0] = 0.0
    mag = np.minimum(np.hypot(gx, gy) / SOBEL_MAX, 1.0)
    return theta, mag


def gradient_histograms(frame: Frame, mask, box: BoundingBox) -> tuple[np.ndarray, np.ndarray]:
    """(aligned orientation histogram, magnitude histogram), 5 bins each, L1-normalised."""
    inside = _region(mask, box, frame)
    theta, mag = box_gradients(frame, box)
    theta, mag = theta[inside], mag[inside]
    strong = mag >= ORIENTATION_EPS
    orient = np.bincount(uniform_bins(theta[strong], GRADIENT_BINS, 180.0), minlength=GRADIENT_BINS)
    magnitude = np.bincount(uniform_bins(mag, GRADIENT_BINS, 1.0), minlength=GRADIENT_BINS)
    return normalize(align_histogram(orient)), normalize(magnitude)


def detect_describe_surf(frame: Frame, box: BoundingBox,
                         hessian_threshold: float = DEFAULT_HESSIAN_THRESHOLD) -> np.ndarray:
    """SURF descriptors (n x 64) of keypoints centred inside ``box``."""
    surf_calls.increment()
    # filters need support beyond the box; keypoints are still centred inside it
    padded = BoundingBox(box.x - SURF_CONTEXT, box.y - SURF_CONTEXT, box.w + 2 * SURF_CONTEXT,
                         box.h + 2 * SURF_CONTEXT).clip(frame.width, frame.height)
    gray = to_gray(frame.pixels[padded.y:padded.y2, padded.x:padded.x2])
    region = (box.x - padded.x, box.y - padded.y, box.x2 - padded.x, box.y2 - padded.y)
    _, desc = surf(gray, hessian_threshold, region=region)
    return desc


# ---------------------------------------------------------------------------
# PCA


def select_dimension(eigenvalues, alpha: float) -> int:
    """Smallest m minimising |alpha * sum(lambda) - sum(lambda[:m])|."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    prefix = np.cumsum(lam)
    gaps = np.abs(alpha * prefix[-1] - prefix)
    return int(np.argmin(gaps)) + 1


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    eigenvalues: np.ndarray
    rotation: np.ndarray  # rows are principal axes, descending eigenvalue
    m_hat: int
    alpha: float

    @property
    def dim(self) -> int:
        return len(self.mean)

    def __eq__(self, other):
        if not isinstance(other, PcaModel):
            return NotImplemented
        return (self.m_hat == other.m_hat and self.alpha == other.alpha
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.eigenvalues, other.eigenvalues)
                and np.array_equal(self.rotation, other.rotation))


def fit_pca(descriptors, alpha: float = DEFAULT_ALPHA) -> PcaModel:
    D = np.asarray(descriptors, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] <= D.shape[1]:
        raise DegenerateCovariance(
            f"need more than {D.shape[-1] if D.ndim == 2 else SURF_DIM} descriptors, got {len(D)}")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    mean = D.mean(axis=0)
    centered = D - mean
    cov = centered.T @ centered / (len(D) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals = np.clip(vals[order], 0.0, None)
    rot = vecs[:, order].T
    # fix each axis' sign so its largest-magnitude component is positive
    pivots = np.argmax(np.abs(rot), axis=1)
    signs = np.sign(rot[np.arange(len(rot)), pivots])
    rot = rot * np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean, vals, np.ascontiguousarray(rot), select_dimension(vals, alpha), float(alpha))


def reduce(pca: PcaModel, d) -> np.ndarray:
    """Project descriptor(s) onto the first m_hat principal axes."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != pca.dim:
        raise DimensionMismatch(f"expected {pca.dim}-d descriptors, got {d.shape[-1]}")
    return (d - pca.mean) @ pca.rotation[:pca.m_hat].T


# ---------------------------------------------------------------------------
# visual vocabulary


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centers: np.ndarray  # k x m_hat

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return np.array_equal(self.centers, other.centers)


def nearest_center(X: np.ndarray, centers: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Index of (lowest-index tie-break) and squared distance to the nearest center."""
    idx = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X))
    for start in range(0, len(X), chunk):
        block = X[start:start + chunk]
        d2 = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        idx[start:start + chunk] = np.argmin(d2, axis=1)
        dist[start:start + chunk] = d2[np.arange(len(block)), idx[start:start + chunk]]
    return idx, dist


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    initial_inertia: float
    inertia: float
    iterations: int


def kmeans(X, k: int, seed: int, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    _, d2 = nearest_center(X, centers[:1])
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("fewer distinct descriptors than clusters")
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        centers[c] = X[min(pick, n - 1)]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(1))
    labels, d2 = nearest_center(X, centers)
    initial = float(d2.sum())
    it = 0
    for it in range(1, max_iter + 1):
        new = centers.copy()
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        labels, d2 = nearest_center(X, centers)
        if shift < tol:
            break
    return KMeansResult(centers, labels, initial, float(d2.sum()), it)


def build_vocabulary(reduced, k: int = DEFAULT_K, seed: int = 0) -> Vocabulary:
    X = np.asarray(reduced, dtype=np.float64)
    distinct = len(np.unique(X, axis=0)) if len(X) else 0
    if distinct < k:
        warnings.warn(f"only {distinct} distinct descriptors for k={k}; reducing k", RuntimeWarning)
        log.warning("vocabulary: reducing k from %d to %d", k, distinct)
        k = distinct
    if k < 1:
        raise ValueError("no descriptors to build a vocabulary from")
    return Vocabulary(kmeans(X, k, seed).centers)


def bow_histogram(vocabulary: Vocabulary, reduced) -> np.ndarray:
    X = np.asarray(reduced, dtype=np.float64)
    if len(X) == 0:
        return np.zeros(vocabulary.k)
    if X.ndim != 2 or X.shape[1] != vocabulary.dim:
        raise DimensionMismatch(f"expected {vocabulary.dim}-d descriptors, got shape {X.shape}")
    idx, _ = nearest_center(X, vocabulary.centers)
    return normalize(np.bincount(idx, minlength=vocabulary.k))


# ---------------------------------------------------------------------------
# assembled box features


@dataclass(frozen=True, eq=False)
class BoxFeatures:
    hue_hist: np.ndarray
    sat_hist: np.ndarray
    grad_orient_hist: Optional[np.ndarray] = None
    grad_mag_hist: Optional[np.ndarray] = None
    bow_hist: Optional[np.ndarray] = None

    @property
    def empty_region(self) -> bool:
        return not self.hue_hist.any()

    @property
    def stage(self) -> int:
        return 1 if self.bow_hist is None else 2

    def stage1_vector(self) -> np.ndarray:
        return np.concatenate([self.hue_hist, self.sat_hist])

    def vector(self) -> np.ndarray:
        parts = [self.hue_hist, self.sat_hist]
        if self.stage == 2:
            parts += [self.grad_orient_hist, self.grad_mag_hist, self.bow_hist]
        return np.concatenate(parts)


def box_features(frame: Frame, mask, box: BoundingBox, pca: Optional[PcaModel] = None,
                 vocabulary: Optional[Vocabulary] = None, stage: int = 2,
                 hessian_threshold: float = DEFAULT_HESSIAN_THRESHOLD,
                 descriptors: Optional[np.ndarray] = None,
                 base: Optional[BoxFeatures] = None) -> BoxFeatures:
    """Feature stack of one box. Stage 1 never touches gradients or SURF.

    ``descriptors`` supplies precomputed raw SURF descriptors; ``base``
    reuses stage-1 histograms already computed for this box.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if base is None:
        hue, sat = color_histograms(frame, mask, box)
    else:
        hue, sat = base.hue_hist, base.sat_hist
    if stage == 1:
        return BoxFeatures(hue, sat)
    if pca is None or vocabulary is None:
        raise ValueError("stage-2 features need a fitted PCA and vocabulary")
    orient, magnitude = gradient_histograms(frame, mask, box)
    if descriptors is None:
        descriptors = detect_describe_surf(frame, box, hessian_threshold)
    reduced = reduce(pca, descriptors) if len(descriptors) else np.zeros((0, vocabulary.dim))
    return BoxFeatures(hue, sat, orient, magnitude, bow_histogram(vocabulary, reduced))


def write_feature_csv(path, rows) -> int:
    """One CSV line per box from ``(surgery_id, frame_id, box, vector, label)`` rows."""
    rows = list(rows)
    dim = len(rows[0][3]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surgery", "frame", "x", "y", "w", "h"] + [f"f{i}" for i in range(dim)] + ["label"])
        for surgery_id, frame_id, box, vector, label in rows:
            if len(vector) != dim:
                raise DimensionMismatch(f"feature rows mix {dim}- and {len(vector)}-d vectors")
            w.writerow([surgery_id, frame_id, box.x, box.y, box.w, box.h]
                       + [repr(float(v)) for v in vector] + [getattr(label, "label", label)])
    return len(rows)
