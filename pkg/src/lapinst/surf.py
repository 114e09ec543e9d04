"""SURF keypoint detection and 64-dimensional description.

Detector: box-filter approximations of the Hessian evaluated on an
integral image, filter sizes 9, 15, 21, 27 in the first octave with the
filter-size step and sampling step doubling per octave. Candidates are
3x3x3 local maxima of det(H) above a threshold, refined by fitting a 3D
quadratic. Orientation comes from Gaussian-weighted Haar responses in a
radius-6s disc, summed over a sliding pi/3 window. The descriptor covers a
20s square split into 4x4 subregions, each summarising 5x5 Haar samples as
(sum dx, sum |dx|, sum dy, sum |dy|).

Intensities are on the 8-bit scale, so a Hessian threshold of a few
hundred is a reasonable default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

DEFAULT_HESSIAN_THRESHOLD = 500.0
DEFAULT_OCTAVES = 3
LAYERS_PER_OCTAVE = 4
DXY_WEIGHT = 0.9
_ORI_WINDOW = math.pi / 3
_ORI_STEP = 0.15


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float        # Gaussian-equivalent sigma, 1.2 * L / 9
    orientation: float  # radians
    response: float
    laplacian: int


def integral_image(gray: np.ndarray) -> np.ndarray:
    """(H+1) x (W+1) table with ii[r, c] = sum of gray[:r, :c]."""
    ii = np.zeros((gray.shape[0] + 1, gray.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(gray, axis=0, dtype=np.float64), axis=1)
    return ii


def box_sum(ii: np.ndarray, row, col, rows, cols):
    """Sum over rows [row, row+rows) and cols [col, col+cols), clipped to the image."""
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    r0 = np.clip(row, 0, H)
    c0 = np.clip(col, 0, W)
    r1 = np.clip(np.asarray(row) + rows, 0, H)
    c1 = np.clip(np.asarray(col) + cols, 0, W)
    return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]


def filter_sizes(octave: int) -> list[int]:
    """Box-filter side lengths of one octave (0-based): 9,15,21,27 / 15,27,39,51 / ..."""
    step = 6 << octave
    return [3 + step * (j + 1) for j in range(LAYERS_PER_OCTAVE)]


def _grid_box(ii, r_first, c_first, n_r, n_c, step, dr, dc, h, w):
    """Box sums for every grid center via strided views of the integral image."""
    r0 = r_first + dr
    c0 = c_first + dc
    rs = slice(r0, r0 + step * (n_r - 1) + 1, step)
    rs_h = slice(r0 + h, r0 + h + step * (n_r - 1) + 1, step)
    cs = slice(c0, c0 + step * (n_c - 1) + 1, step)
    cs_w = slice(c0 + w, c0 + w + step * (n_c - 1) + 1, step)
    return ii[rs_h, cs_w] - ii[rs, cs_w] - ii[rs_h, cs] + ii[rs, cs]


def hessian_layer(ii, size, r_first, c_first, n_r, n_c, step):
    """det(H) and Laplacian sign for one filter size on the given sampling grid."""
    lobe = size // 3
    border = (size - 1) // 2
    half = lobe // 2
    g = lambda dr, dc, h, w: _grid_box(ii, r_first, c_first, n_r, n_c, step, dr, dc, h, w)  # noqa: E731
    dxx = g(-lobe + 1, -border, 2 * lobe - 1, size) - 3 * g(-lobe + 1, -half, 2 * lobe - 1, lobe)
    dyy = g(-border, -lobe + 1, size, 2 * lobe - 1) - 3 * g(-half, -lobe + 1, lobe, 2 * lobe - 1)
    dxy = (g(-lobe, 1, lobe, lobe) + g(1, -lobe, lobe, lobe)
           - g(-lobe, -lobe, lobe, lobe) - g(1, 1, lobe, lobe))
    inv_area = 1.0 / (size * size)
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    det = dxx * dyy - (DXY_WEIGHT * dxy) ** 2
    return det, (dxx + dyy) >= 0


def _interpolate(stack, l, i, j):
    """Newton step of a 3D quadratic fit around (layer l, row i, col j)."""
    v = stack[l, i, j]
    dx = (stack[l, i, j + 1] - stack[l, i, j - 1]) / 2
    dy = (stack[l, i + 1, j] - stack[l, i - 1, j]) / 2
    ds = (stack[l + 1, i, j] - stack[l - 1, i, j]) / 2
    dxx = stack[l, i, j + 1] + stack[l, i, j - 1] - 2 * v
    dyy = stack[l, i + 1, j] + stack[l, i - 1, j] - 2 * v
    dss = stack[l + 1, i, j] + stack[l - 1, i, j] - 2 * v
    dxy = (stack[l, i + 1, j + 1] - stack[l, i + 1, j - 1]
           - stack[l, i - 1, j + 1] + stack[l, i - 1, j - 1]) / 4
    dxs = (stack[l + 1, i, j + 1] - stack[l + 1, i, j - 1]
           - stack[l - 1, i, j + 1] + stack[l - 1, i, j - 1]) / 4
    dys = (stack[l + 1, i + 1, j] - stack[l + 1, i - 1, j]
           - stack[l - 1, i + 1, j] + stack[l - 1, i - 1, j]) / 4
    H = np.stack([
        np.stack([dxx, dxy, dxs], -1),
        np.stack([dxy, dyy, dys], -1),
        np.stack([dxs, dys, dss], -1),
    ], -2)
    grad = np.stack([dx, dy, ds], -1)
    dets = np.linalg.det(H)
    ok = np.abs(dets) > 1e-12
    offset = np.full(grad.shape, np.inf)
    if ok.any():
        offset[ok] = -np.linalg.solve(H[ok], grad[ok][..., None])[..., 0]
    return offset


def detect_keypoints(ii: np.ndarray, threshold: float = DEFAULT_HESSIAN_THRESHOLD,
                     octaves: int = DEFAULT_OCTAVES) -> list[tuple[float, float, float, float, int]]:
    """Interest points as (x, y, scale, response, laplacian)."""
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    found = []
    for o in range(octaves):
        step = 1 << o
        sizes = filter_sizes(o)
        border = (sizes[-1] - 1) // 2
        k0 = -(-border // step)
        k1 = (H - 1 - border) // step
        j0 = -(-border // step)
        j1 = (W - 1 - border) // step
        n_r, n_c = k1 - k0 + 1, j1 - j0 + 1
        if n_r < 3 or n_c < 3:
            break
        r_first, c_first = k0 * step, j0 * step
        layers = [hessian_layer(ii, s, r_first, c_first, n_r, n_c, step) for s in sizes]
        stack = np.stack([d for d, _ in layers])
        lap = np.stack([sgn for _, sgn in layers])
        peaks = (stack == maximum_filter(stack, size=3, mode="constant", cval=-np.inf)) & (stack > threshold)
        # only middle layers, away from the grid rim, have a full 3x3x3 neighbourhood
        peaks[0] = peaks[-1] = False
        peaks[:, 0, :] = peaks[:, -1, :] = False
        peaks[:, :, 0] = peaks[:, :, -1] = False
        ls, is_, js = np.nonzero(peaks)
        if len(ls) == 0:
            continue
        off = _interpolate(stack, ls, is_, js)
        keep = np.all(np.abs(off) < 0.5, axis=1)
        size_step = 6 << o
        for l, i, j, (ox, oy, os_) in zip(ls[keep], is_[keep], js[keep], off[keep]):
            x = c_first + (j + ox) * step
            y = r_first + (i + oy) * step
            size = sizes[l] + os_ * size_step
            found.append((float(x), float(y), 1.2 * size / 9.0, float(stack[l, i, j]), int(lap[l, i, j])))
    return found


def haar_x(ii, row, col, size):
    half = size // 2
    return box_sum(ii, row - half, col, size, half) - box_sum(ii, row - half, col - half, size, half)


def haar_y(ii, row, col, size):
    half = size // 2
    return box_sum(ii, row, col - half, half, size) - box_sum(ii, row - half, col - half, half, size)


_ORI_OFFSETS = np.array([(i, j) for i in range(-6, 7) for j in range(-6, 7) if i * i + j * j < 36])
_ORI_GAUSS = np.exp(-(_ORI_OFFSETS ** 2).sum(1) / (2 * 2.5 ** 2)) / (2 * math.pi * 2.5 ** 2)
_ORI_STARTS = np.arange(0.0, 2 * math.pi, _ORI_STEP)


def orientations(ii: np.ndarray, xs: np.ndarray, ys: np.ndarray, scales: np.ndarray) -> np.ndarray:
    s = np.maximum(np.rint(scales).astype(np.int64), 1)[:, None]
    rows = np.rint(ys).astype(np.int64)[:, None] + _ORI_OFFSETS[None, :, 1] * s
    cols = np.rint(xs).astype(np.int64)[:, None] + _ORI_OFFSETS[None, :, 0] * s
    rx = _ORI_GAUSS * haar_x(ii, rows, cols, 4 * s)
    ry = _ORI_GAUSS * haar_y(ii, rows, cols, 4 * s)
    ang = np.arctan2(ry, rx) % (2 * math.pi)
    # membership of every response in every pi/3 window (wrapping past 2pi)
    rel = (ang[:, None, :] - _ORI_STARTS[None, :, None]) % (2 * math.pi)
    inside = rel < _ORI_WINDOW
    sx = np.einsum("kwn,kn->kw", inside, rx)
    sy = np.einsum("kwn,kn->kw", inside, ry)
    best = np.argmax(sx * sx + sy * sy, axis=1)
    k = np.arange(len(xs))
    return np.arctan2(sy[k, best], sx[k, best]) % (2 * math.pi)


_DESC_GRID = (np.arange(20) - 9.5)
_U, _V = np.meshgrid(_DESC_GRID, _DESC_GRID, indexing="xy")   # V rows, U cols
_SUBREGION = ((np.arange(20)[None, :] // 5) + 4 * (np.arange(20)[:, None] // 5)).ravel()
_U, _V = _U.ravel(), _V.ravel()


def describe(ii: np.ndarray, xs, ys, scales, angles) -> np.ndarray:
    """Raw (unnormalised) 64-d descriptors, one row per keypoint."""
    xs, ys, scales, angles = (np.asarray(a, dtype=np.float64) for a in (xs, ys, scales, angles))
    co = np.cos(angles)[:, None]
    si = np.sin(angles)[:, None]
    sc = scales[:, None]
    u = _U[None, :] * sc
    v = _V[None, :] * sc
    px = xs[:, None] + co * u - si * v
    py = ys[:, None] + si * u + co * v
    size = 2 * np.maximum(np.rint(scales).astype(np.int64), 1)[:, None]
    rows = np.rint(py).astype(np.int64)
    cols = np.rint(px).astype(np.int64)
    dx = haar_x(ii, rows, cols, size)
    dy = haar_y(ii, rows, cols, size)
    weight = np.exp(-(u * u + v * v) / (2 * (3.3 * sc) ** 2))
    ru = weight * (dx * co + dy * si)
    rv = weight * (-dx * si + dy * co)
    K = len(xs)
    desc = np.zeros((K, 16, 4))
    for col, vals in enumerate((ru, np.abs(ru), rv, np.abs(rv))):
        for k in range(K):
            desc[k, :, col] = np.bincount(_SUBREGION, weights=vals[k], minlength=16)
    return desc.reshape(K, 64)


def surf(gray: np.ndarray, threshold: float = DEFAULT_HESSIAN_THRESHOLD,
         octaves: int = DEFAULT_OCTAVES, region=None) -> tuple[list[Keypoint], np.ndarray]:
    """Detect and describe SURF features in a grayscale image.

    ``region`` = (x0, y0, x1, y1) keeps only keypoints centred inside it.
    Returns keypoints and their L2-normalised descriptors.
    """
    ii = integral_image(np.asarray(gray, dtype=np.float64))
    pts = detect_keypoints(ii, threshold, octaves)
    if region is not None:
        x0, y0, x1, y1 = region
        pts = [p for p in pts if x0 <= p[0] < x1 and y0 <= p[1] < y1]
    if not pts:
        return [], np.zeros((0, 64))
    arr = np.array([p[:4] for p in pts])
    xs, ys, scales = arr[:, 0], arr[:, 1], arr[:, 2]
    angles = orientations(ii, xs, ys, scales)
    desc = describe(ii, xs, ys, scales, angles)
    norms = np.linalg.norm(desc, axis=1)
    good = norms > 1e-12
    desc = desc[good] / norms[good, None]
    kps = [Keypoint(p[0], p[1], p[2], float(a), p[3], p[4])
           for p, a, g in zip(pts, angles, good) if g]
    return kps, desc
