"""Rendering of run artifacts to image files.

Every report-producing command writes delimited text first and figures second;
nothing in here feeds back into computation. The Agg backend is forced before
pyplot loads so rendering works without a display.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError

FIELD_LABELS = ("rescaled pressure", "injected saturation", "front mask")


def _finalize(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def training_curves(record, path) -> Path:
    """RMSE trajectories and the learning-rate staircase for one run."""
    if not record.rows:
        raise DataError("cannot plot an empty training record")
    epochs = [r.epoch for r in record.rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.2), layout="constrained")
    ax.plot(epochs, [r.train_rmse for r in record.rows], label="train RMSE")
    test_vals = [r.test_rmse for r in record.rows]
    if not all(math.isnan(v) for v in test_vals):
        ax.plot(epochs, test_vals, label="test RMSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("RMSE")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    twin.plot(epochs, [r.lr for r in record.rows], color="grey", ls="--", label="lr")
    twin.set_ylabel("learning rate")
    twin.set_yscale("log")
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = twin.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="upper right")
    return _finalize(fig, path)


def field_panels(truth, prediction, path, title: str = "") -> Path:
    """Truth, prediction and absolute error side by side for one record.

    Both arrays are ``[3, H, W]`` ordered (pressure, saturation, mask).
    """
    truth = np.asarray(truth)
    prediction = np.asarray(prediction)
    if truth.shape != prediction.shape or truth.ndim != 3 or truth.shape[0] != 3:
        raise DataError(f"expected matching [3, H, W] arrays, got {truth.shape} and {prediction.shape}")
    fig, axes = plt.subplots(3, 3, figsize=(9.6, 8.4), layout="constrained")
    for row, label in enumerate(FIELD_LABELS):
        lo = float(min(truth[row].min(), prediction[row].min()))
        hi = float(max(truth[row].max(), prediction[row].max()))
        panels = [
            (truth[row], f"{label}: reference", "viridis", lo, hi),
            (prediction[row], f"{label}: predicted", "viridis", lo, hi),
            (np.abs(prediction[row] - truth[row]), f"{label}: |error|", "magma", None, None),
        ]
        for col, (img, sub, cmap, vmin, vmax) in enumerate(panels):
            ax = axes[row, col]
            im = ax.imshow(img, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
            ax.set_title(sub, fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        fig.suptitle(title)
    return _finalize(fig, path)


def per_time_metric_bars(times_s, values, trained_times_s, path, ylabel: str = "R²") -> Path:
    """One bar per snapshot time; bars for withheld times are hatched."""
    times_s = list(times_s)
    if len(times_s) != len(values):
        raise DataError("times and values disagree in length")
    trained = set(float(t) for t in trained_times_s)
    days = [t / 86400.0 for t in times_s]
    fig, ax = plt.subplots(figsize=(6.4, 4.0), layout="constrained")
    colors = ["tab:blue" if float(t) in trained else "tab:orange" for t in times_s]
    hatches = ["" if float(t) in trained else "//" for t in times_s]
    bars = ax.bar(range(len(days)), values, color=colors)
    for bar, hatch in zip(bars, hatches):
        bar.set_hatch(hatch)
    ax.set_xticks(range(len(days)))
    ax.set_xticklabels([f"{d:g}" for d in days])
    ax.set_xlabel("snapshot time [days]")
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.3)
    if any(h for h in hatches):
        ax.set_title("hatched: withheld from training")
    return _finalize(fig, path)


def moment_maps(surrogate, oracle, field_name: str, channel: int, path) -> Path:
    """Ensemble mean and variance maps, surrogate against the oracle.

    Rows are snapshot times; columns are oracle/surrogate mean then
    oracle/surrogate variance.
    """
    if surrogate.times_s != oracle.times_s:
        raise DataError("moment sets cover different times")
    n_t = len(oracle.times_s)
    fig, axes = plt.subplots(n_t, 4, figsize=(12.0, 2.6 * n_t), layout="constrained", squeeze=False)
    for j, t in enumerate(oracle.times_s):
        pairs = [
            (oracle.mean[j, channel], "oracle mean"),
            (surrogate.mean[j, channel], "surrogate mean"),
            (oracle.variance[j, channel], "oracle variance"),
            (surrogate.variance[j, channel], "surrogate variance"),
        ]
        mean_lo = min(float(pairs[0][0].min()), float(pairs[1][0].min()))
        mean_hi = max(float(pairs[0][0].max()), float(pairs[1][0].max()))
        var_hi = max(float(pairs[2][0].max()), float(pairs[3][0].max()))
        for col, (img, label) in enumerate(pairs):
            ax = axes[j, col]
            if col < 2:
                im = ax.imshow(img, origin="lower", cmap="viridis", vmin=mean_lo, vmax=mean_hi)
            else:
                im = ax.imshow(img, origin="lower", cmap="magma", vmin=0.0, vmax=var_hi)
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_title(label, fontsize=9)
            if col == 0:
                ax.set_ylabel(f"{t / 86400.0:g} d")
            fig.colorbar(im, ax=ax, shrink=0.8)
    fig.suptitle(f"{field_name}: Monte Carlo moments")
    return _finalize(fig, path)


def pdf_overlays(surrogate_pdfs, oracle_pdfs, path) -> Path:
    """Step-plot probe densities of both estimators on shared axes.

    Both dicts map ``(location, time_s)`` to a PdfEstimate; only keys present
    in the oracle dict are drawn.
    """
    keys = [k for k in oracle_pdfs if k in surrogate_pdfs]
    if not keys:
        raise DataError("no shared probe keys to draw")
    n = len(keys)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.2 * ncols, 3.2 * nrows), layout="constrained", squeeze=False
    )
    for ax in axes.flat[n:]:
        ax.set_visible(False)
    for ax, key in zip(axes.flat, keys):
        for est, label, color in (
            (oracle_pdfs[key], "oracle", "tab:blue"),
            (surrogate_pdfs[key], "surrogate", "tab:orange"),
        ):
            ax.stairs(est.density, est.edges, label=label, color=color)
        loc, t = oracle_pdfs[key].location, oracle_pdfs[key].time_s
        ax.set_title(f"probe {loc}, {t / 86400.0:g} d", fontsize=9)
        ax.set_xlabel(oracle_pdfs[key].field)
        ax.set_ylabel("density")
        ax.legend(fontsize=8)
    return _finalize(fig, path)
