import math

import cv2
import numpy as np
import pytest

from lapinst.core import BoundingBox, Frame
from lapinst.features import detect_describe_surf
from lapinst.surf import box_sum, filter_sizes, integral_image, surf


def disk_image(r, size=200, fg=20.0, bg=220.0):
    img = np.full((size, size), bg)
    cv2.circle(img, (size // 2, size // 2), r, fg, -1)
    return img


def test_uniform_image_has_no_keypoints():
    kps, desc = surf(np.full((120, 120), 137.0))
    assert kps == [] and desc.shape == (0, 64)


def test_uniform_box_gives_no_descriptors():
    f = Frame("s", "f", np.full((100, 100, 3), 90, np.uint8))
    assert detect_describe_surf(f, BoundingBox(20, 20, 50, 50)).shape == (0, 64)


def test_integral_image_box_sums():
    rng = np.random.default_rng(0)
    g = rng.random((30, 40))
    ii = integral_image(g)
    for _ in range(50):
        r, c = rng.integers(0, 30), rng.integers(0, 40)
        h, w = rng.integers(1, 31 - r), rng.integers(1, 41 - c)
        assert box_sum(ii, r, c, h, w) == pytest.approx(g[r:r + h, c:c + w].sum())


def test_filter_sizes():
    assert filter_sizes(0) == [9, 15, 21, 27]
    assert filter_sizes(1) == [15, 27, 39, 51]
    assert filter_sizes(2) == [27, 51, 75, 99]


def strongest_central(r):
    kps, _ = surf(disk_image(r))
    near = [k for k in kps if math.hypot(k.x - 100, k.y - 100) <= 2]
    assert near, f"no keypoint near the centre of a radius-{r} disk"
    return max(near, key=lambda k: k.response)


def test_disk_scale_proportional_to_radius():
    ratios = [strongest_central(r).scale / r for r in (6, 12, 24)]
    ref = ratios[1]
    for q in ratios:
        assert abs(q / ref - 1) < 0.25
    assert strongest_central(24).laplacian == strongest_central(6).laplacian


def test_descriptors_unit_norm_and_rotation_stable():
    rng = np.random.default_rng(1)
    img = cv2.GaussianBlur(rng.random((160, 160)) * 255, (0, 0), 3)
    img = (img - img.min()) / (img.max() - img.min()) * 255
    kps, desc = surf(img, threshold=100)
    assert len(kps) > 0
    assert np.allclose(np.linalg.norm(desc, axis=1), 1, atol=1e-6)


def test_region_keeps_only_keypoints_inside():
    rng = np.random.default_rng(2)
    img = cv2.GaussianBlur(rng.random((160, 160)) * 255, (0, 0), 2)
    img = (img - img.min()) / (img.max() - img.min()) * 255
    kps, _ = surf(img, threshold=100)
    sub, desc = surf(img, threshold=100, region=(40, 40, 120, 120))
    assert len(sub) == len(desc)
    assert sorted((k.x, k.y) for k in sub) == sorted(
        (k.x, k.y) for k in kps if 40 <= k.x < 120 and 40 <= k.y < 120)


def test_box_descriptors_see_context_but_stay_inside():
    img = np.full((200, 200, 3), 220, np.uint8)
    cv2.circle(img, (100, 100), 12, (20, 20, 20), -1)
    f = Frame("s", "f", img)
    assert len(detect_describe_surf(f, BoundingBox(85, 85, 30, 30))) >= 1
    assert len(detect_describe_surf(f, BoundingBox(140, 140, 40, 40))) == 0
