import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapinst.core import Frame
from lapinst.errors import DimensionMismatch, NoContent
from lapinst.maskgen import CircleMask, apply_mask, diagonal_hits, fit_circle, generate_mask, to_gray


def disk_frame(cx, cy, r, w=640, h=480, value=200):
    yy, xx = np.mgrid[0:h, 0:w]
    px = np.zeros((h, w, 3), np.uint8)
    px[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = value
    return Frame("s", "f", px)


def test_reference_disk():
    m = generate_mask(disk_frame(320, 240, 230))
    assert abs(m.center_x - 320) <= 2 and abs(m.center_y - 240) <= 2 and abs(m.radius - 230) <= 2


def test_all_black_is_no_content():
    px = np.full((40, 40, 3), 3, np.uint8)
    with pytest.raises(NoContent):
        generate_mask(Frame("s", "f", px))


def test_fully_bright_frame_covers_everything():
    m = generate_mask(Frame("s", "f", np.full((48, 64, 3), 90, np.uint8)))
    assert m.mask.all()


@settings(max_examples=20, deadline=None)
@given(st.integers(-30, 30), st.integers(-30, 30))
def test_translation_consistency(dx, dy):
    a = generate_mask(disk_frame(320, 240, 200))
    b = generate_mask(disk_frame(320 + dx, 240 + dy, 200))
    assert abs((b.center_x - a.center_x) - dx) <= 2
    assert abs((b.center_y - a.center_y) - dy) <= 2


def test_mask_definition_is_distance_rule():
    m = CircleMask.from_circle(10.5, 7.25, 6.0, 24, 18)
    yy, xx = np.mgrid[0:18, 0:24]
    assert np.array_equal(m.mask, np.hypot(xx - 10.5, yy - 7.25) <= 6.0)


def test_apply_mask_identity_empty_and_oracle():
    rng = np.random.default_rng(0)
    f = Frame("s", "f", rng.integers(0, 255, (30, 40, 3), dtype=np.uint8))
    full = CircleMask.full(40, 30)
    assert np.array_equal(apply_mask(f, full).pixels, f.pixels)
    none = CircleMask(0.0, 0.0, 1.0, np.zeros((30, 40), bool))
    assert not apply_mask(f, none).pixels.any()
    disk = CircleMask.from_circle(20, 15, 11, 40, 30)
    out = apply_mask(f, disk).pixels
    yy, xx = np.mgrid[0:30, 0:40]
    outside = np.hypot(xx - 20, yy - 15) > 11
    assert not out[outside].any()
    assert np.array_equal(out[~outside], f.pixels[~outside])
    assert np.array_equal(apply_mask(apply_mask(f, disk), disk).pixels, out)


def test_apply_mask_dimension_mismatch():
    f = Frame("s", "f", np.zeros((20, 20, 3), np.uint8))
    with pytest.raises(DimensionMismatch):
        apply_mask(f, CircleMask.full(21, 20))


def test_gray_uses_601_weights():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], np.uint8)
    assert np.allclose(to_gray(px)[0], [0.299 * 255, 0.587 * 255, 0.114 * 255])


def test_fit_circle_fallbacks():
    cx, cy, r = fit_circle([(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 20, 20)
    assert (cx, cy) == pytest.approx((5, 5)) and r == pytest.approx(math.sqrt(50))
    cx, cy, r = fit_circle([(2.0, 2.0)], 20, 20)
    assert (cx, cy) == (9.5, 9.5) and r == pytest.approx(math.hypot(7.5, 7.5))


def test_diagonal_hits_first_nonblack():
    b = np.zeros((21, 21), bool)
    b[5:16, 5:16] = True
    hits = diagonal_hits(b)
    assert (5.0, 5.0) in [tuple(h) for h in hits]
    assert len(hits) == 4
