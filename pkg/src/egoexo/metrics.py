"""Mask metrics (IoU, contour accuracy, location error) and frame metrics (SSIM, PSNR)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 100.0


@dataclass
class SegScore:
    iou: float
    contour_accuracy: float
    location_error: float


@dataclass
class GenScore:
    ssim: float
    psnr: float


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def centroid(mask):
    ys, xs = np.nonzero(mask)
    return ys.mean(), xs.mean()


def _shift(mask, dy, dx):
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    ys, xs = ys + dy, xs + dx
    keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    out[ys[keep], xs[keep]] = True
    return out


def contour_accuracy(pred, gt) -> float:
    """IoU after translating ``pred`` so the rounded centroids coincide."""
    p, g = _pair(pred, gt)
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 1.0
    if pe or ge:
        return 0.0
    py, px = centroid(p)
    gy, gx = centroid(g)
    return iou(_shift(p, int(round(gy - py)), int(round(gx - px))), g)


def location_error(pred, gt) -> float:
    """Centroid distance divided by the image diagonal."""
    p, g = _pair(pred, gt)
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        return 1.0
    py, px = centroid(p)
    gy, gx = centroid(g)
    h, w = p.shape
    return math.hypot(py - gy, px - gx) / math.hypot(h, w)


def seg_score(pred, gt) -> SegScore:
    return SegScore(iou(pred, gt), contour_accuracy(pred, gt), location_error(pred, gt))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def ssim(a, b, k1=0.01, k2=0.03, data_range=1.0, win=11, sigma=1.5) -> float:
    """Mean SSIM over channels and valid window positions (Gaussian window)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.shape[-1] < win or a.shape[-2] < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    g = _gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


def psnr(a, b, data_range=1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gen_score(a, b) -> GenScore:
    return GenScore(ssim(a, b), psnr(a, b))


# ---------------------------------------------------------------------------
# clip-level evaluation
# ---------------------------------------------------------------------------

CLASS_SETS = {"fg": (1, 2), "hand": (1,), "object": (2,)}


def evaluate_masks(pred, gt):
    """Per-frame scores for the foreground union and each class, plus means.

    Returns ``(rows, means)``: rows are dicts with frame, class, iou, ca, le;
    means maps class name to a :class:`SegScore` averaged over frames.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask clip shapes differ: {pred.shape} vs {gt.shape}")
    rows = []
    for f in range(pred.shape[0]):
        for name, classes in CLASS_SETS.items():
            p = np.isin(pred[f], classes)
            g = np.isin(gt[f], classes)
            s = seg_score(p, g)
            rows.append({"frame": f, "class": name, "iou": s.iou, "ca": s.contour_accuracy,
                         "le": s.location_error})
    means = {}
    for name in CLASS_SETS:
        sel = [r for r in rows if r["class"] == name]
        means[name] = SegScore(float(np.mean([r["iou"] for r in sel])), float(np.mean([r["ca"] for r in sel])),
                               float(np.mean([r["le"] for r in sel])))
    return rows, means


def evaluate_frames(pred, gt, skip_first=True):
    """Per-frame SSIM/PSNR rows and their means (frame 1 skipped by default)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("clip shapes differ")
    rows = []
    for f in range(1 if skip_first else 0, pred.shape[0]):
        rows.append({"frame": f, "ssim": ssim(pred[f], gt[f]), "psnr": psnr(pred[f], gt[f])})
    return rows, GenScore(float(np.mean([r["ssim"] for r in rows])), float(np.mean([r["psnr"] for r in rows])))
