"""PSNR / SSIM and per-split metric reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0


class MetricInputError(ValueError):
    pass


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise MetricInputError(f"image shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref):
    """PSNR in dB for images in [0, 1]. Identical images give ``PSNR_CAP``."""
    pred, ref = _pair(pred, ref)
    mse = np.mean((pred - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, ref, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Single-scale SSIM on the channel-mean grayscale image, averaged over
    every full window position."""
    pred, ref = _pair(pred, ref)
    if pred.ndim == 3:
        pred, ref = pred.mean(axis=2), ref.mean(axis=2)
    if min(pred.shape) < window:
        raise MetricInputError(f"image {pred.shape} is smaller than the {window}x{window} SSIM window")
    w = _gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(pred), filt(ref)
    sxx = filt(pred * pred) - mu_x**2
    syy = filt(ref * ref) - mu_y**2
    sxy = filt(pred * ref) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return float(s.mean())


@dataclass
class FrameMetrics:
    name: str
    split: str
    group: str
    psnr: float
    ssim: float
    d_y: float = 0.0
    identical: bool = False


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, name, split, pred, ref, group="", d_y=0.0):
        same = bool(np.array_equal(np.asarray(pred), np.asarray(ref)))
        self.frames.append(FrameMetrics(name, split, group, psnr(pred, ref), ssim(pred, ref), d_y, same))

    def aggregate(self, key="split"):
        """Per-tag arithmetic means of per-frame PSNR and SSIM."""
        out = {}
        for tag in sorted({getattr(f, key) for f in self.frames}):
            sel = [f for f in self.frames if getattr(f, key) == tag]
            out[tag] = {
                "psnr": float(np.mean([f.psnr for f in sel])),
                "ssim": float(np.mean([f.ssim for f in sel])),
                "n": len(sel),
            }
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "split", "group", "d_y", "psnr", "ssim", "lpips", "identical"])
            for f in self.frames:
                w.writerow([f.name, f.split, f.group, f"{f.d_y:.6f}", f"{f.psnr:.6f}", f"{f.ssim:.6f}", "n/a", int(f.identical)])
            for key in ("split", "group"):
                for tag, agg in self.aggregate(key).items():
                    w.writerow([f"mean:{key}", tag, "", "", f"{agg['psnr']:.6f}", f"{agg['ssim']:.6f}", "n/a", ""])
