"""Figure rendering for run reports: curves, histograms, ROC, panels.

Every figure lands next to the delimited tables it illustrates. Matplotlib
runs on the Agg backend so reports render identically headless.
"""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

from .data import as_batch
from .fileio import save_grayscale_png
from .numeric.tensor import Tensor
from .scoring import anomaly_maps

PANEL_NAMES = ("input", "reference", "coarse_deformed", "reconstruction",
               "mask", "error_map", "deform_map", "offsets")


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def save_loss_curves(history, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h.epoch for h in history]
    for key in ("total", "rec", "com", "df", "cyc"):
        values = [getattr(h, key) for h in history]
        if any(v != 0.0 for v in values):
            ax.plot(epochs, values, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    _save(fig, path)


def save_score_histogram(records, path):
    normal = [r.image_score for r in records if not r.anomaly]
    anomalous = [r.image_score for r in records if r.anomaly]
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.histogram_bin_edges(normal + anomalous, bins=40)
    ax.hist(normal, bins=bins, alpha=0.6, label="normal")
    ax.hist(anomalous, bins=bins, alpha=0.6, label="anomaly")
    ax.set_xlabel("image score")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title("score distribution")
    _save(fig, path)


def save_roc_curve(records, path):
    scores = np.array([r.image_score for r in records])
    flags = np.array([r.anomaly for r in records])
    order = np.argsort(-scores, kind="stable")
    flags_sorted = flags[order]
    tpr = np.concatenate([[0.0], np.cumsum(flags_sorted) / max(flags.sum(), 1)])
    fpr = np.concatenate([[0.0], np.cumsum(~flags_sorted)
                          / max((~flags).sum(), 1)])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    _save(fig, path)


def save_ablation_bars(rows, path):
    """rows: list of (arm_name, auc or None)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [name for name, _ in rows]
    values = [auc if auc is not None else 0.0 for _, auc in rows]
    ax.bar(range(len(rows)), values)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("image AUC")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("ablation arms")
    _save(fig, path)


def _normalized_gray(arr):
    peak = float(np.abs(arr).max())
    if peak == 0.0:
        return np.zeros_like(arr) - 1.0
    return np.clip(arr / peak, 0.0, 1.0) * 2.0 - 1.0


def _quiver_figure(pyramid, path):
    k = pyramid.n_heads
    fig, axes = plt.subplots(1, k, figsize=(4 * k, 4), squeeze=False)
    for i, field in enumerate(pyramid.forward):
        f = field.data[0]
        h, w = f.shape[1:]
        ys, xs = np.mgrid[0:h, 0:w]
        ax = axes[0][i]
        # flip y so the plot matches image orientation
        ax.quiver(xs, ys, f[0], -f[1], angles="xy", scale_units="xy",
                  scale=max(2.0 / max(h, w), 1e-6))
        ax.invert_yaxis()
        ax.set_aspect("equal")
        ax.set_title(f"head {i + 1} ({h}x{w})")
    _save(fig, path)


def export_sample_panels(model, image, config, out_dir):
    """Eight panels per sample: the pipeline stages plus offset quivers."""
    os.makedirs(out_dir, exist_ok=True)
    x = Tensor(as_batch([image]))
    outputs = model.forward(x)
    maps = anomaly_maps(x, outputs, config.mode)[0]

    panels = {
        "input": image.pixels[0],
        "reference": outputs.reference.data[0, 0],
        "coarse_deformed": outputs.deformed[0].data[0, 0],
        "reconstruction": outputs.reconstructions[-1].data[0, 0],
        "mask": (outputs.mask.data[0, 0] * 2.0 - 1.0) if outputs.mask is not None
                else np.ones_like(image.pixels[0]),
        "error_map": _normalized_gray(maps.a_rec),
        "deform_map": _normalized_gray(maps.a_df),
    }
    for name, panel in panels.items():
        save_grayscale_png(os.path.join(out_dir, f"{name}.png"), panel)
    if outputs.pyramid is not None:
        _quiver_figure(outputs.pyramid, os.path.join(out_dir, "offsets.png"))
    else:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.text(0.5, 0.5, "no deformation heads", ha="center", va="center")
        ax.set_axis_off()
        _save(fig, os.path.join(out_dir, "offsets.png"))
    return [os.path.join(out_dir, f"{name}.png") for name in PANEL_NAMES]


def export_fields(model, image, out_dir, sample_id):
    """Raw 2-channel offset fields as .npy arrays for external tooling."""
    os.makedirs(out_dir, exist_ok=True)
    x = Tensor(as_batch([image]))
    outputs = model.forward(x)
    written = []
    if outputs.pyramid is None:
        return written
    for i, field in enumerate(outputs.pyramid.forward):
        path = os.path.join(out_dir, f"{sample_id}_head{i + 1}.npy")
        np.save(path, field.data[0])
        written.append(path)
    if outputs.pyramid.backward is not None:
        for i, field in enumerate(outputs.pyramid.backward):
            path = os.path.join(out_dir, f"{sample_id}_back{i + 1}.npy")
            np.save(path, field.data[0])
            written.append(path)
    return written


def save_overview_grid(model, images, config, path, max_samples=8):
    """Fig-style strip: input, reference, coarse warp, final output rows."""
    subset = images[:max_samples]
    x = Tensor(as_batch(subset))
    outputs = model.forward(x)
    rows = [("input", x.data[:, 0]),
            ("reference", outputs.reference.data[:, 0]),
            ("coarse", outputs.deformed[0].data[:, 0]),
            ("output", outputs.reconstructions[-1].data[:, 0])]
    fig, axes = plt.subplots(len(rows), len(subset),
                             figsize=(1.4 * len(subset), 1.5 * len(rows)),
                             squeeze=False)
    for r, (label, data) in enumerate(rows):
        for c in range(len(subset)):
            ax = axes[r][c]
            ax.imshow(data[c], cmap="gray", vmin=-1, vmax=1)
            ax.set_axis_off()
            if c == 0:
                ax.set_title(label, fontsize=8, loc="left")
    _save(fig, path)
