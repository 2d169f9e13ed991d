"""Full-reference image quality metrics and report plumbing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images with peak value 1.

    Identical inputs return ``inf``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
) -> float:
    """Mean local structural similarity with a Gaussian window.

    Color inputs are converted to grayscale by channel mean. Only fully
    interior windows contribute (no padding).
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValidationError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window:
        raise ValidationError(f"image sides must be >= window size {window}, got {ga.shape}")
    kern = _gaussian_window(window, sigma)
    wa = sliding_window_view(ga, (window, window))
    wb = sliding_window_view(gb, (window, window))
    mu_a = np.tensordot(wa, kern, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kern, axes=([2, 3], [0, 1]))
    aa = np.tensordot(wa * wa, kern, axes=([2, 3], [0, 1]))
    bb = np.tensordot(wb * wb, kern, axes=([2, 3], [0, 1]))
    ab = np.tensordot(wa * wb, kern, axes=([2, 3], [0, 1]))
    var_a = aa - mu_a**2
    var_b = bb - mu_b**2
    cov = ab - mu_a * mu_b
    c1, c2 = k1**2, k2**2  # peak value 1
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM plus their arithmetic means."""

    tag: str
    names: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)
    n_target: int | None = None

    def add(self, name: str, psnr_db: float, ssim_score: float) -> None:
        self.names.append(name)
        self.psnr_values.append(float(psnr_db))
        self.ssim_values.append(float(ssim_score))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["name", "psnr_db", "ssim"])
            for name, p, s in zip(self.names, self.psnr_values, self.ssim_values):
                writer.writerow([name, f"{p:.6f}", f"{s:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])

    def render_table(self) -> str:
        lines = [f"== {self.tag} ==", f"{'image':<24}{'PSNR(dB)':>10}{'SSIM':>8}"]
        for name, p, s in zip(self.names, self.psnr_values, self.ssim_values):
            lines.append(f"{name:<24}{p:>10.3f}{s:>8.4f}")
        lines.append(f"{'mean':<24}{self.mean_psnr:>10.3f}{self.mean_ssim:>8.4f}")
        return "\n".join(lines)


def compare_images(tag: str, pairs) -> MetricReport:
    """Build a report from ``(name, restored, reference)`` triples.

    LPIPS/CLIPIQA/Q-Align/NIQE are deliberately absent: they require
    pretrained models this package does not depend on.
    """
    report = MetricReport(tag=tag)
    for name, out, ref in pairs:
        report.add(name, psnr(out, ref), ssim(out, ref))
    return report


def write_sweep_csv(path, rows) -> None:
    """Two-column (N, PSNR) series for the data-efficiency sweep."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_target", "psnr_db"])
        for n, p in rows:
            writer.writerow([n, f"{p:.6f}"])
