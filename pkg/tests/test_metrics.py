import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from egoexo import metrics as M


def rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


# --- worked examples -------------------------------------------------------

def test_iou_examples():
    a = rect(8, 8, 2, 4, 0, 4)
    assert M.iou(a, a) == 1.0
    assert M.iou(a, rect(8, 8, 5, 7, 0, 4)) == 0.0
    # two 2x4 rectangles sharing a 2x2 block: 4 / 12
    assert M.iou(a, rect(8, 8, 2, 4, 2, 6)) == pytest.approx(1 / 3)
    assert M.iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        M.iou(np.zeros((3, 3)), np.zeros((3, 4)))


def test_contour_accuracy_examples():
    a = rect(32, 32, 4, 10, 5, 12)
    assert M.contour_accuracy(a, np.roll(a, (3, 5), axis=(0, 1))) == 1.0
    assert M.contour_accuracy(a, a) == 1.0
    assert M.contour_accuracy(a, np.zeros_like(a)) == 0.0
    assert M.contour_accuracy(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_contour_accuracy_disc_vs_square():
    # disc of radius 4 and a square of equal pixel area, both centred at (16, 16)
    yy, xx = np.mgrid[:33, :33]
    disc = (yy - 16) ** 2 + (xx - 16) ** 2 <= 16
    n = int(disc.sum())  # 49 pixels
    assert n == 49
    square = rect(33, 33, 13, 20, 13, 20)  # 7x7 = 49, same centroid
    inter = int((disc & square).sum())
    assert inter == 45
    assert M.contour_accuracy(disc, square) == pytest.approx(45 / 53)


def test_location_error_examples():
    a = rect(32, 32, 4, 8, 4, 8)
    assert M.location_error(a, a) == 0.0
    tl, br = rect(32, 32, 0, 1, 0, 1), rect(32, 32, 31, 32, 31, 32)
    assert M.location_error(tl, br) == pytest.approx(31 * math.sqrt(2) / (32 * math.sqrt(2)))
    assert M.location_error(a, np.roll(a, 1, axis=1)) == pytest.approx(0.0221, abs=5e-5)
    assert M.location_error(a, np.zeros_like(a)) == 1.0
    assert M.location_error(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_psnr_examples():
    a = np.full((3, 16, 16), 0.5)
    assert M.psnr(a, a) == 100.0
    assert M.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert M.psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4))) == 0.0


def test_ssim_examples(rng):
    a = rng.uniform(0.25, 0.75, (3, 24, 24))
    assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-6)
    inv = M.ssim(a, 1 - a)
    assert inv < 0.5
    assert inv == pytest.approx(oracles.ssim(a.tolist(), (1 - a).tolist()), abs=1e-4)
    v, w = 0.3, 0.7
    c1 = 0.01**2
    got = M.ssim(np.full((3, 16, 16), v), np.full((3, 16, 16), w))
    assert got == pytest.approx((2 * v * w + c1) / (v * v + w * w + c1), abs=1e-12)
    with pytest.raises(ValueError):
        M.ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


# --- brute-force oracles on 20 seeded pairs --------------------------------

def _mask_pair(seed):
    r = np.random.default_rng(seed)
    h, w = int(r.integers(8, 24)), int(r.integers(8, 24))
    kind = seed % 4
    if kind == 0:  # random blobs
        return r.random((h, w)) < 0.3, r.random((h, w)) < 0.3
    if kind == 1:  # overlapping rectangles
        def rr():
            y0, x0 = r.integers(0, h - 2), r.integers(0, w - 2)
            return rect(h, w, y0, r.integers(y0 + 1, h), x0, r.integers(x0 + 1, w))
        return rr(), rr()
    if kind == 2:  # one empty
        return np.zeros((h, w), bool), r.random((h, w)) < 0.2
    p = r.random((h, w)) < 0.25
    return p, np.roll(p, (int(r.integers(-3, 4)), int(r.integers(-3, 4))), axis=(0, 1))


@pytest.mark.parametrize("seed", range(20))
def test_mask_metrics_match_oracle(seed):
    p, g = _mask_pair(seed)
    pl, gl = p.astype(int).tolist(), g.astype(int).tolist()
    assert M.iou(p, g) == pytest.approx(oracles.iou(pl, gl), abs=1e-6)
    assert M.contour_accuracy(p, g) == pytest.approx(oracles.contour_accuracy(pl, gl), abs=1e-6)
    assert M.location_error(p, g) == pytest.approx(oracles.location_error(pl, gl), abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_frame_metrics_match_oracle(seed):
    r = np.random.default_rng(100 + seed)
    h = int(r.integers(11, 17))
    a = r.random((3, h, h + 1))
    b = np.clip(a + r.normal(0, 0.05 + 0.02 * seed, a.shape), 0, 1)
    assert M.psnr(a, b) == pytest.approx(oracles.psnr(a.tolist(), b.tolist()), abs=1e-6)
    assert M.ssim(a, b) == pytest.approx(oracles.ssim(a.tolist(), b.tolist()), abs=1e-4)


# --- properties ------------------------------------------------------------

masks = arrays(np.bool_, (10, 12))


@settings(max_examples=80, deadline=None)
@given(masks, masks)
def test_iou_symmetric(p, g):
    assert M.iou(p, g) == M.iou(g, p)
    assert 0.0 <= M.iou(p, g) <= 1.0


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.integers(0, 4), st.integers(0, 4))
def test_contour_accuracy_common_translation(p, g, dy, dx):
    # pad so neither the common roll nor the centroid alignment (up to 11 px) clips a mask
    P = np.zeros((40, 44), bool)
    G = np.zeros((40, 44), bool)
    P[14:24, 14:26], G[14:24, 14:26] = p, g
    base = M.contour_accuracy(P, G)
    moved = M.contour_accuracy(np.roll(P, (dy, dx), (0, 1)), np.roll(G, (dy, dx), (0, 1)))
    assert moved == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(-3, 3), st.integers(-3, 3))
def test_translated_copy_has_unit_ca(p, dy, dx):
    P = np.zeros((20, 22), bool)
    P[5:15, 5:17] = p
    assert M.contour_accuracy(P, np.roll(P, (dy, dx), (0, 1))) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_psnr_decreasing_in_mse(e1, e2):
    a = np.zeros((3, 4, 4))
    lo, hi = sorted((e1, e2))
    if hi - lo > 1e-9:
        assert M.psnr(a, a + lo) > M.psnr(a, a + hi)


def test_evaluate_masks_conventions():
    gt = np.zeros((3, 16, 16), np.uint8)
    gt[:, 2:6, 2:6] = 1
    gt[:, 8:12, 8:12] = 2
    rows, means = M.evaluate_masks(gt, gt)
    assert all(r["iou"] == 1 and r["ca"] == 1 and r["le"] == 0 for r in rows)
    rows, means = M.evaluate_masks(np.zeros_like(gt), gt)
    assert all(r["iou"] == 0 and r["ca"] == 0 and r["le"] == 1 for r in rows)
    pred = gt.copy()
    pred[1, 2:6, 2:4] = 0
    rows, means = M.evaluate_masks(pred, gt)
    fg = [r["iou"] for r in rows if r["class"] == "fg"]
    assert means["fg"].iou == pytest.approx(np.mean(fg))
    assert len(rows) == 3 * 3


def test_evaluate_frames_skips_first(rng):
    gt = rng.random((4, 3, 16, 16))
    pred = gt.copy()
    pred[0] = 0.0  # frame 1 is an input and must not count
    rows, mean = M.evaluate_frames(pred, gt)
    assert [r["frame"] for r in rows] == [1, 2, 3]
    assert mean.psnr == 100.0 and mean.ssim == pytest.approx(1.0, abs=1e-6)
