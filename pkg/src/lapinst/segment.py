"""Pixel-wise instrument/background segmentation with a 7-feature random forest.

Per-pixel features: hue, LAB a/b, opponent o1/o2, gradient orientation and
gradient magnitude, each scaled into [0, 1].
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass

import cv2
import numba
import numpy as np

from .core import Dataset, Frame
from .errors import ModelMismatch, NoContent, NoMaskAnnotations, OutsideMask
from .forest import ForestConfig, RandomForest, train
from .maskgen import CircleMask, apply_mask, generate_mask, to_gray

log = logging.getLogger(__name__)

FEATURE_NAMES = ("hue", "lab_a", "lab_b", "opp_o1", "opp_o2", "grad_orient", "grad_mag")
FEATURE_DIM = len(FEATURE_NAMES)
BACKGROUND, INSTRUMENT = 0, 1
# largest single-axis 3x3 Sobel response on 8-bit input (4 * 255)
SOBEL_MAX = 1020.0
DEFAULT_BG_THRESHOLD = 0.6
DEFAULT_PIXELS_PER_FRAME = 2000


def hsv_fraction(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone HSV with hue as a fraction of a turn in [0, 1); hue 0 when achromatic.

    Same arithmetic as ``colorsys.rgb_to_hsv`` applied to channels / 255.
    """
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    flat = px.reshape(-1, 3)
    h, s, v = _hsv_kernel(flat)
    shape = px.shape[:-1]
    return h.reshape(shape), s.reshape(shape), v.reshape(shape)


@numba.njit(cache=True, nogil=True)
def _hsv_kernel(flat):
    n = flat.shape[0]
    h = np.zeros(n)
    s = np.zeros(n)
    v = np.empty(n)
    for i in range(n):
        r = flat[i, 0] / 255.0
        g = flat[i, 1] / 255.0
        b = flat[i, 2] / 255.0
        maxc = max(r, g, b)
        minc = min(r, g, b)
        v[i] = maxc
        if minc == maxc:
            continue
        rangec = maxc - minc
        s[i] = rangec / maxc
        rc = (maxc - r) / rangec
        gc = (maxc - g) / rangec
        bc = (maxc - b) / rangec
        if r == maxc:
            hue = bc - gc
        elif g == maxc:
            hue = 2.0 + rc - bc
        else:
            hue = 4.0 + gc - rc
        h[i] = (hue / 6.0) % 1.0
    return h, s, v


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
    return gx, gy


def gradient_polar(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orientation folded into [0, 180) degrees and magnitude scaled to [0, 1]."""
    gx, gy = sobel(gray)
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    theta[theta >= 180.0] = 0.0
    mag = np.minimum(np.hypot(gx, gy) / SOBEL_MAX, 1.0)
    return theta, mag


def feature_image(pixels: np.ndarray) -> np.ndarray:
    """H x W x 7 feature stack for every pixel of an RGB image."""
    hue, _, _ = hsv_fraction(pixels)
    lab = cv2.cvtColor(pixels.astype(np.float32) / 255.0, cv2.COLOR_RGB2Lab).astype(np.float64)
    rgb = pixels.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    theta, mag = gradient_polar(to_gray(pixels))
    feats = np.empty(pixels.shape[:2] + (FEATURE_DIM,))
    feats[..., 0] = hue
    feats[..., 1] = np.clip((lab[..., 1] + 128.0) / 256.0, 0.0, 1.0)
    feats[..., 2] = np.clip((lab[..., 2] + 128.0) / 256.0, 0.0, 1.0)
    # o1 = (R-G)/sqrt2 in [-1/sqrt2, 1/sqrt2]; o2 = (R+G-2B)/sqrt6 in [-2/sqrt6, 2/sqrt6]
    feats[..., 3] = ((r - g) + 1.0) / 2.0
    feats[..., 4] = ((r + g - 2.0 * b) / 2.0 + 1.0) / 2.0
    feats[..., 5] = theta / 180.0
    feats[..., 6] = mag
    return feats


def _mask_array(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    if isinstance(mask, CircleMask):
        return mask.mask
    return np.asarray(mask, dtype=bool)


def pixel_features(frame: Frame, mask, p: tuple[int, int]) -> np.ndarray:
    """Feature vector of pixel ``p = (x, y)``, computed from its 3x3 neighbourhood."""
    x, y = p
    m = _mask_array(mask, (frame.height, frame.width))
    if not (0 <= x < frame.width and 0 <= y < frame.height) or not m[y, x]:
        raise OutsideMask(f"pixel {p} lies outside the mask")
    x0, y0 = max(x - 1, 0), max(y - 1, 0)
    x1, y1 = min(x + 2, frame.width), min(y + 2, frame.height)
    patch = frame.pixels[y0:y1, x0:x1]
    return feature_image(patch)[y - y0, x - x0]


def _check_forest(forest: RandomForest) -> None:
    if forest.num_classes != 2 or forest.feature_dim != FEATURE_DIM:
        raise ModelMismatch(
            f"segmentation needs a 2-class {FEATURE_DIM}-feature forest, got "
            f"{forest.num_classes} classes / {forest.feature_dim} features")


def segment_frame(forest: RandomForest, frame: Frame, mask=None,
                  background_threshold: float = DEFAULT_BG_THRESHOLD) -> np.ndarray:
    """Binary instrument map. A pixel is background when P(background) >= threshold."""
    _check_forest(forest)
    m = _mask_array(mask, (frame.height, frame.width))
    out = np.zeros(m.shape, dtype=bool)
    if not m.any():
        return out
    feats = feature_image(frame.pixels)[m]
    out[m] = forest.proba_below(feats, BACKGROUND, background_threshold)
    return out


@dataclass(frozen=True)
class SegmenterConfig:
    forest: ForestConfig = ForestConfig(num_trees=50, max_depth=10)
    pixels_per_frame: int = DEFAULT_PIXELS_PER_FRAME


def sample_pixels(feats: np.ndarray, truth: np.ndarray, valid: np.ndarray, count: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw up to count/2 pixels of each class from the valid region."""
    xs, ys = [], []
    half = count // 2
    for cls, sel in ((BACKGROUND, valid & ~truth), (INSTRUMENT, valid & truth)):
        flat = np.flatnonzero(sel)
        if flat.size == 0:
            continue
        take = min(half, flat.size)
        chosen = np.sort(rng.choice(flat, size=take, replace=False))
        xs.append(feats.reshape(-1, FEATURE_DIM)[chosen])
        ys.append(np.full(take, cls, dtype=np.int64))
    if not xs:
        return np.empty((0, FEATURE_DIM)), np.empty(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def segmentation_training_set(dataset: Dataset, pixels_per_frame: int, seed: int):
    X, y = [], []
    for sample in dataset:
        truth = sample.annotation.pixel_mask
        if truth is None:
            continue
        frame = sample.frame
        try:
            circle = generate_mask(frame)
        except NoContent as exc:
            log.warning("skipping %s/%s: %s", frame.surgery_id, frame.frame_id, exc)
            continue
        masked = apply_mask(frame, circle)
        rng = np.random.default_rng([seed, _stable_hash(frame.surgery_id), _stable_hash(frame.frame_id)])
        fx, fy = sample_pixels(feature_image(masked.pixels), truth, circle.mask, pixels_per_frame, rng)
        X.append(fx)
        y.append(fy)
    if not X:
        raise NoMaskAnnotations("dataset has no pixel-mask annotations")
    return np.concatenate(X), np.concatenate(y)


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def train_segmenter(dataset: Dataset, config: SegmenterConfig = SegmenterConfig(),
                    jobs: int = 1) -> RandomForest:
    X, y = segmentation_training_set(dataset, config.pixels_per_frame, config.forest.rng_seed)
    log.info("segmenter: %d training pixels (%d instrument)", len(y), int(y.sum()))
    return train(X, y, config.forest, num_classes=2, jobs=jobs)
