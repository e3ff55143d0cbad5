"""Figures written next to evaluation and reconstruction outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def plot_metrics(report: MetricReport, path) -> Path:
    """Per-frame MSE and SSIM against timestamp."""
    path = Path(path)
    t = np.asarray(report.timestamps_us) * 1e-6
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(t, report.mse, marker="o", ms=3)
    ax1.set_ylabel("MSE")
    ax1.set_title(f"mean MSE {report.mean_mse:.3e}, mean SSIM {report.mean_ssim:.3f}")
    ax2.plot(t, report.ssim, marker="o", ms=3, color="tab:green")
    ax2.set_ylabel("SSIM")
    ax2.set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_frame_panels(reconstruction, reference, path, index: int | None = None) -> Path:
    """Reconstruction, reference and absolute difference for one frame."""
    path = Path(path)
    recon = np.asarray(reconstruction)
    ref = np.asarray(reference)
    i = len(recon) // 2 if index is None else index
    peak = ref.max() if ref.max() > 0 else 1.0
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    panels = (recon[i] / peak, ref[i] / peak, np.abs(recon[i] - ref[i]) / peak)
    for ax, img, title in zip(axes, panels, ("reconstruction", "reference", "|difference|")):
        im = ax.imshow(img, cmap="gray", vmin=0, vmax=1 if title != "|difference|" else None)
        ax.set_title(f"{title} (frame {i})")
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_sequence_strip(frames, path, title: str = "", max_frames: int = 6) -> Path:
    """A row of evenly spaced frames from a sequence, shown on a log scale."""
    path = Path(path)
    frames = np.asarray(frames)
    idx = np.unique(np.linspace(0, len(frames) - 1, min(max_frames, len(frames))).astype(int))
    fig, axes = plt.subplots(1, len(idx), figsize=(2.2 * len(idx), 2.4), squeeze=False)
    shown = np.log1p(255.0 * np.maximum(frames, 0))
    lo, hi = shown.min(), shown.max()
    for ax, i in zip(axes[0], idx):
        ax.imshow(shown[i], cmap="gray", vmin=lo, vmax=hi)
        ax.set_title(str(i), fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
