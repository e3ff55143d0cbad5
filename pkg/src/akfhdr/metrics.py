"""Full-reference image quality metrics: MSE and SSIM on normalised intensities."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    """Raised for image pairs that cannot be compared."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r * r / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully covered 11x11 Gaussian window (no padding)."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError("ssim expects 2-D images")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    w = gaussian_window()

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        # exact self-similarity, free of rounding in the local moments
        ssim_map(a, b, data_range)
        return 1.0
    return float(np.mean(ssim_map(a, b, data_range)))


def log_affine_align(recon, reference, i_offset: float = 1.0, scale: float = 255.0):
    """Fit ``log(ref) ~ g * log(recon) + o`` over the whole sequence and apply it.

    Works on offset log irradiance so that zeros stay finite. Returns the
    aligned reconstruction in the same linear units as the input.
    """
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    x = np.log(np.maximum(recon, 0) * scale + i_offset).ravel()
    y = np.log(np.maximum(reference, 0) * scale + i_offset).ravel()
    a = np.vstack([x, np.ones_like(x)]).T
    (g, o), *_ = np.linalg.lstsq(a, y, rcond=None)
    aligned = np.exp(g * np.log(np.maximum(recon, 0) * scale + i_offset) + o)
    return (aligned - i_offset) / scale


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)
    timestamps_us: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    skipped: int = 0

    @property
    def count(self) -> int:
        return len(self.mse)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def add(self, frame: int, timestamp_us: int, m: float, s: float):
        self.frames.append(frame)
        self.timestamps_us.append(int(timestamp_us))
        self.mse.append(m)
        self.ssim.append(s)

    def summary(self) -> str:
        return (f"# summary frames={self.count} skipped={self.skipped} "
                f"mse={self.mean_mse:.6e} mse_x1e-2={self.mean_mse * 100:.4f} "
                f"ssim={self.mean_ssim:.4f}")

    def to_csv(self) -> str:
        lines = ["frame,timestamp_us,mse,ssim"]
        lines += [f"{f},{t},{m:.9e},{s:.6f}"
                  for f, t, m, s in zip(self.frames, self.timestamps_us, self.mse, self.ssim)]
        lines.append(self.summary())
        return "\n".join(lines) + "\n"


def evaluate_sequence(recon, reference, timestamps_us=None, normalize: bool = True,
                      align: bool = False) -> MetricReport:
    """Per-frame metrics for two equally long stacks of linear intensity frames.

    With ``normalize`` both stacks are divided by the reference maximum, which
    puts the reference in [0, 1]. ``align`` applies :func:`log_affine_align`
    first.
    """
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if recon.shape != reference.shape:
        raise MetricError(f"sequence shapes differ: {recon.shape} vs {reference.shape}")
    if align:
        recon = log_affine_align(recon, reference)
    if normalize:
        peak = reference.max()
        if peak > 0:
            recon, reference = recon / peak, reference / peak
    if timestamps_us is None:
        timestamps_us = range(len(recon))
    report = MetricReport()
    for i, (a, b, t) in enumerate(zip(recon, reference, timestamps_us)):
        report.add(i, t, mse(a, b), ssim(a, b))
    return report
