"""Image quality metrics (PSNR, SSIM, mean-L1, RGB distance) and CSV reports.

All metrics operate on LDR images in [0, 1]. PSNR of identical images is the
``inf`` sentinel. SSIM uses the standard 11x11 Gaussian window (sigma 1.5)
with constants C1 = (0.01 L)^2, C2 = (0.03 L)^2, averaged over channels. The
RGB color distance is the mean per-pixel Euclidean distance scaled by 100.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ResolutionMismatchError

_CSV_COLUMNS = ("name", "psnr", "ssim", "l1", "rgb_dist")


@dataclass
class MetricsRow:
    name: str
    psnr: float
    ssim: float
    l1: float
    rgb_dist: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, name: str, a, b) -> MetricsRow:
        row = MetricsRow(name=name, psnr=psnr(a, b), ssim=ssim(a, b),
                         l1=mean_l1(a, b), rgb_dist=rgb_distance(a, b))
        self.rows.append(row)
        return row

    def aggregate(self) -> MetricsRow:
        """Mean over rows; an infinite PSNR row makes the aggregate infinite."""
        n = max(len(self.rows), 1)
        return MetricsRow(
            name="mean",
            psnr=sum(r.psnr for r in self.rows) / n,
            ssim=sum(r.ssim for r in self.rows) / n,
            l1=sum(r.l1 for r in self.rows) / n,
            rgb_dist=sum(r.rgb_dist for r in self.rows) / n,
        )

    def write_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(_CSV_COLUMNS)
            for r in self.rows + [self.aggregate()]:
                w.writerow([r.name, f"{r.psnr:.6g}", f"{r.ssim:.6g}",
                            f"{r.l1:.6g}", f"{r.rgb_dist:.6g}"])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ResolutionMismatchError(
            f"metric operands have shapes {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def mean_l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rgb_distance(a, b) -> float:
    """Mean per-pixel Euclidean RGB distance, scaled by 100."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    return float(np.mean(np.linalg.norm(a - b, axis=-1))) * 100.0


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return g


def _filter2d_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode Gaussian filtering of a 2D image."""
    from scipy.signal import convolve

    tmp = convolve(img, g[None, :], mode="valid")
    return convolve(tmp, g[:, None], mode="valid")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Structural similarity, 11x11 Gaussian window, channel-averaged."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ResolutionMismatchError("images smaller than the 11x11 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window()
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mx = _filter2d_valid(x, g)
        my = _filter2d_valid(y, g)
        mxx = _filter2d_valid(x * x, g)
        myy = _filter2d_valid(y * y, g)
        mxy = _filter2d_valid(x * y, g)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / \
            ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
