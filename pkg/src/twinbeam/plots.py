"""Figure rendering for the CLI report path.

Each helper takes plain arrays plus an output path and writes one PNG next
to the delimited table it illustrates.  The library API never imports this
module; only the CLI does, and --no-plot skips it entirely, so a headless
install without a display works throughout (Agg backend).
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_map(path, grid, title: str = "", value_label: str = "") -> Path:
    """Heatmap of a 2-D per-pixel map (alpha, covariance image, ...)."""
    grid = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(grid, origin="upper", interpolation="nearest")
    fig.colorbar(im, ax=ax, label=value_label)
    ax.set_title(title)
    ax.set_xlabel("col")
    ax.set_ylabel("row")
    return _finish(fig, path)


def save_series(path, x, curves, xlabel: str, ylabel: str, title: str = "",
                logx: bool = False, hline: float | None = None) -> Path:
    """Measured-vs-predicted curves over one sweep axis.

    curves: iterable of (label, y, y_err_or_None); error bars drawn when
    given, plain lines otherwise.
    """
    x = np.asarray(x, dtype=float)
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    for label, y, yerr in curves:
        y = np.asarray(y, dtype=float)
        if yerr is not None:
            ax.errorbar(x, y, yerr=np.asarray(yerr, dtype=float), fmt="o",
                        capsize=3, label=label)
        else:
            ax.plot(x, y, "-", label=label)
    if hline is not None:
        ax.axhline(hline, color="gray", lw=0.8, ls=":")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def save_efficiency_curve(path, thresholds, measured, standard_error,
                          predicted=None, title: str = "") -> Path:
    """Threshold-efficiency curve with the forward-model overlay."""
    t = np.asarray(thresholds, dtype=float)
    y = np.asarray(measured, dtype=float)
    se = np.asarray(standard_error, dtype=float)
    good = np.isfinite(y)
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.errorbar(t[good], y[good], yerr=np.where(np.isfinite(se[good]),
                                                se[good], 0.0),
                fmt="o", capsize=3, label="measured")
    if predicted is not None:
        p = np.asarray(predicted, dtype=float)
        order = np.argsort(t)
        ax.plot(t[order], p[order], "-", label="forward model")
    ax.set_xlabel("threshold (electrons)")
    ax.set_ylabel("click efficiency")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def save_histogram_pair(path, heralded, unheralded, title: str = "") -> Path:
    """Side-by-side click histograms from a photon-number calibration."""
    h = np.asarray(heralded, dtype=float)
    u = np.asarray(unheralded, dtype=float)
    clicks = np.arange(h.size)
    width = 0.4
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.bar(clicks - width / 2, h, width, label="heralded")
    ax.bar(clicks + width / 2, u, width, label="unheralded")
    ax.set_xlabel("clicks")
    ax.set_ylabel("probability")
    ax.set_yscale("log")
    floor = max(min(v for v in np.concatenate([h, u]) if v > 0) / 3, 1e-12) \
        if (h > 0).any() or (u > 0).any() else 1e-12
    ax.set_ylim(bottom=floor)
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def save_alpha_image(path, image, title: str = "") -> Path:
    """Absorption map with a symmetric color scale centered on zero."""
    img = np.asarray(image, dtype=float)
    span = float(np.nanmax(np.abs(img))) or 1.0
    if not math.isfinite(span):
        span = 1.0
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(img, origin="upper", interpolation="nearest",
                   cmap="RdBu_r", vmin=-span, vmax=span)
    fig.colorbar(im, ax=ax, label="estimated absorption")
    ax.set_title(title)
    return _finish(fig, path)
