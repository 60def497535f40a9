"""PSNR and SSIM on luma planes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"expected two equal 2-D planes, got {a.shape} and {b.shape}")
    return a, b


def psnr_y(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); ``inf`` for identical planes."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g  # (H-k+1, W)
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_y(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean single-scale SSIM over all fully covered 11x11 window positions."""
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"plane {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    image_id: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    peak: float = 1023.0
    channel: str = "Y"

    def add(self, image_id: str, pred_y: np.ndarray, target_y: np.ndarray) -> MetricRow:
        row = MetricRow(image_id, psnr_y(pred_y, target_y, self.peak), ssim_y(pred_y, target_y, self.peak))
        self.rows.append(row)
        return row

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([min(r.psnr_db, PSNR_CAP_DB) for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim"])
        for r in self.rows:
            w.writerow([r.image_id, f"{min(r.psnr_db, PSNR_CAP_DB):.4f}", f"{r.ssim:.6f}"])
        w.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        return f"{len(self.rows)} images, {self.channel} channel, peak {self.peak:g}: PSNR {self.mean_psnr:.4f} dB, SSIM {self.mean_ssim:.6f}"
