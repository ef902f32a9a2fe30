"""Report rendering: matplotlib figures written next to the CSV output."""

from __future__ import annotations

import os

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsReport


def _ensure_dir(path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def loss_figure(history: list[dict], path: str) -> None:
    """Loss-vs-iteration curves for a training or compensation run."""
    _ensure_dir(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    iters = [row["iter"] for row in history]
    keys = [k for k in ("loss_total", "loss_pixel", "loss_tv", "loss")
            if history and k in history[0]]
    for key in keys:
        ax.plot(iters, [row[key] for row in history], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def metrics_figure(report: MetricsReport, path: str) -> None:
    """Per-image PSNR/SSIM bars for a metrics report."""
    _ensure_dir(path)
    names = [r.name for r in report.rows]
    psnrs = [min(r.psnr, 99.0) for r in report.rows]
    ssims = [r.ssim for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    xs = np.arange(len(names))
    ax1.bar(xs, psnrs, color="tab:blue")
    ax1.set_xticks(xs, names, rotation=60, ha="right", fontsize=7)
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(xs, ssims, color="tab:orange")
    ax2.set_xticks(xs, names, rotation=60, ha="right", fontsize=7)
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(-1.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def image_figure(images: dict[str, np.ndarray], path: str,
                 ncols: int = 3) -> None:
    """A labeled grid of LDR images (e.g. target / render / difference)."""
    _ensure_dir(path)
    n = len(images)
    ncols = min(ncols, max(n, 1))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3 * nrows),
                             squeeze=False)
    for ax in axes.reshape(-1):
        ax.axis("off")
    for ax, (name, img) in zip(axes.reshape(-1), images.items()):
        img = np.asarray(img)
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis")
        else:
            ax.imshow(np.clip(img, 0.0, 1.0))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fd_figure(rows: list[dict], path: str) -> None:
    """AD-vs-FD relative error per checked parameter."""
    _ensure_dir(path)
    labels = [f"{r['param']}{r['index']}" for r in rows]
    errs = [max(r["rel_err"], 1e-12) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(labels))
    ax.bar(xs, errs, color="tab:green")
    ax.set_xticks(xs, labels, rotation=45, ha="right", fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("relative error (AD vs FD)")
    ax.axhline(1e-2, color="red", linestyle="--", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
