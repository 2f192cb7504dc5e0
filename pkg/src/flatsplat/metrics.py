"""Image losses and quality metrics, plus the per-block smoothed metric tracker."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ContractError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 60.0

CSV_COLUMNS = ("iter", "block", "psnr", "ssim", "l1", "psnr_ema", "ssim_ema", "weight",
               "loss_total", "loss_recon", "loss_consistency")


def _same_shape(pred, gt):
    ps, gs = dc.value(pred).shape, np.shape(gt)
    if ps != gs:
        raise ShapeError(f"image shapes differ: {ps} vs {gs}")


def l1_loss(pred, gt):
    """Mean absolute error over all pixels and channels."""
    _same_shape(pred, gt)
    return dc.mean(dc.abs(dc.sub(pred, gt)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


@lru_cache(maxsize=64)
def _valid_filter_matrix(n: int) -> np.ndarray:
    """(n - 10, n) banded matrix applying the 1D window without padding."""
    w = gaussian_window()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = w
    m.setflags(write=False)
    return m


def _planar(img: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (C*H, W) so one matmul filters every channel."""
    h, w, c = img.shape
    return np.ascontiguousarray(img.transpose(2, 0, 1)).reshape(c * h, w)


class _Blur:
    """Separable valid-window Gaussian blur on stacks of planar images, plus its adjoint."""

    def __init__(self, c: int, h: int, w: int):
        self.c, self.h, self.w = c, h, w
        self.kh = _valid_filter_matrix(h)
        self.kw = _valid_filter_matrix(w)
        self.hv, self.wv = h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """(k*C*H, W) -> (k, C*W', H'), k stacked images."""
        k = z.shape[0] // (self.c * self.h)
        a = (z @ self.kw.T).reshape(k * self.c, self.h, self.wv).transpose(0, 2, 1)
        return (a.reshape(-1, self.h) @ self.kh.T).reshape(k, self.c * self.wv, self.hv)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """(C*W', H') -> (C*H, W)."""
        a = (g @ self.kh).reshape(self.c, self.wv, self.h).transpose(0, 2, 1)
        return a.reshape(self.c * self.h, self.wv) @ self.kw


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    """SSIM map, laid out (C*W', H'), with the intermediates its gradient needs."""
    h, w, c = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}px SSIM window")
    blur = _Blur(c, h, w)
    xp, yp = _planar(x), _planar(y)
    mu_x, mu_y, exx, eyy, exy = blur(np.concatenate([xp, yp, xp * xp, yp * yp, xp * yp]))
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * (exy - mu_x * mu_y) + SSIM_C2
    d1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    d2 = (exx - mu_x * mu_x) + (eyy - mu_y * mu_y) + SSIM_C2
    smap = (a1 * a2) / (d1 * d2)
    return smap, (blur, xp, yp, mu_x, mu_y, a1, a2, d1, d2)


def ssim_map(pred, gt) -> np.ndarray:
    """Per-window SSIM values, shape (H - 10, W - 10, channels)."""
    _same_shape(pred, gt)
    x = dc.value(pred)
    smap, (blur, *_) = _ssim_terms(x, np.asarray(gt, dtype=np.float64))
    return smap.reshape(blur.c, blur.wv, blur.hv).transpose(2, 1, 0)


def ssim(pred, gt):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, valid windows, channel-averaged).

    Differentiable in ``pred``; ``gt`` is a constant.
    """
    _same_shape(pred, gt)
    x = dc.value(pred)
    smap, (blur, xp, yp, mu_x, mu_y, a1, a2, d1, d2) = _ssim_terms(x, np.asarray(gt, dtype=np.float64))
    out = np.float64(smap.mean())

    def vjp(g):
        scale = float(g) / smap.size
        den = d1 * d2
        g_a1 = scale * a2 / den
        g_a2 = scale * a1 / den
        g_d1 = -scale * smap / d1
        g_d2 = -scale * smap / d2
        g_mu = 2.0 * mu_y * (g_a1 - g_a2) + 2.0 * mu_x * (g_d1 - g_d2)
        gp = blur.adjoint(g_mu) + 2.0 * xp * blur.adjoint(g_d2) + 2.0 * yp * blur.adjoint(g_a2)
        h, w, c = x.shape
        return (gp.reshape(c, h, w).transpose(1, 2, 0),)

    return dc.custom("ssim", out, (pred,), vjp)


def ssim_loss(pred, gt):
    return dc.sub(1.0, ssim(pred, gt))


def mse(pred, gt) -> float:
    _same_shape(pred, gt)
    d = dc.value(pred) - np.asarray(gt, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(pred, gt) -> float:
    """``10 log10(1 / MSE)`` on a unit dynamic range, capped at 60 dB."""
    err = mse(pred, gt)
    if err <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    l1: float

    @classmethod
    def compare(cls, pred, gt) -> "MetricReport":
        p, g = dc.value(pred), np.asarray(gt)
        return cls(psnr(p, g), float(ssim(p, g)), float(l1_loss(p, g)))

    @classmethod
    def average(cls, reports) -> "MetricReport":
        reports = list(reports)
        if not reports:
            raise ContractError("no reports to average")
        return cls(float(np.mean([r.psnr for r in reports])), float(np.mean([r.ssim for r in reports])),
                   float(np.mean([r.l1 for r in reports])))


@dataclass
class BlockMetricTracker:
    block_id: int
    beta: float = 0.9
    psnr_ema: float = 0.0
    ssim_ema: float = 0.0
    initialized: bool = False

    def to_dict(self):
        return {"block_id": self.block_id, "beta": self.beta, "psnr_ema": self.psnr_ema,
                "ssim_ema": self.ssim_ema, "initialized": self.initialized}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["block_id"]), float(d["beta"]), float(d["psnr_ema"]),
                   float(d["ssim_ema"]), bool(d["initialized"]))


def tracker_update(t: BlockMetricTracker, report: MetricReport) -> BlockMetricTracker:
    if not (math.isfinite(report.psnr) and math.isfinite(report.ssim)):
        raise ContractError("metric report must be finite")
    if not t.initialized:
        t.psnr_ema, t.ssim_ema, t.initialized = float(report.psnr), float(report.ssim), True
    else:
        b = t.beta
        t.psnr_ema = b * t.psnr_ema + (1.0 - b) * report.psnr
        t.ssim_ema = b * t.ssim_ema + (1.0 - b) * report.ssim
    return t


class MetricsLog:
    """Append-only CSV of per-block training metrics."""

    def __init__(self, path, resume_from: int | None = None):
        self.path = Path(path)
        if resume_from is None or not self.path.exists():
            with self.path.open("w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(CSV_COLUMNS)
        else:
            # drop rows at or past the resume point so a resumed run rewrites them
            with self.path.open(newline="") as f:
                rows = list(csv.reader(f))
            keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < resume_from]
            with self.path.open("w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerows(keep)

    def append(self, rows):
        with self.path.open("a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            for row in rows:
                w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
