"""Figure rendering for evaluation reports, ablation tables, and feature
maps.  Everything writes image files through the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .model import MultiTaskIQANet, instance_normalize


def score_severity_scatter(per_image_rows: list[dict], out_path) -> Path:
    """One panel per distortion type: predicted score against severity level."""
    if not per_image_rows:
        raise ValueError("no per-image rows to plot")
    types = sorted({str(r["distortion_true"]) for r in per_image_rows})
    ncols = min(len(types), 2)
    nrows = (len(types) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.5 * ncols, 3.2 * nrows), squeeze=False)
    for ax in axes.flat[len(types):]:
        ax.set_visible(False)
    for ax, t in zip(axes.flat, types):
        rows = [r for r in per_image_rows if str(r["distortion_true"]) == t]
        sev = [float(r["severity"]) for r in rows]
        pred = [float(r["score_pred"]) for r in rows]
        true = [float(r["score_true"]) for r in rows]
        ax.scatter(sev, pred, s=14, alpha=0.7, label="predicted")
        ax.scatter(sev, true, s=14, marker="x", color="k", alpha=0.5, label="target")
        ax.set_title(t, fontsize=10)
        ax.set_xlabel("severity level")
        ax.set_ylabel("score")
    axes.flat[0].legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def prediction_scatter(per_image_rows: list[dict], out_path) -> Path:
    """Predicted vs. target score over the whole test set."""
    pred = [float(r["score_pred"]) for r in per_image_rows]
    true = [float(r["score_true"]) for r in per_image_rows]
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.scatter(true, pred, s=14, alpha=0.7)
    lo, hi = min(true), max(true)
    ax.plot([lo, hi], [lo, hi], "k--", linewidth=1)
    ax.set_xlabel("target score")
    ax.set_ylabel("predicted score")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def ablation_chart(labels: list[str], sroccs: list[float], out_path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(labels)), 3.6))
    xs = np.arange(len(labels))
    ax.bar(xs, sroccs, width=0.6)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("median SROCC")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def feature_montage(
    model: MultiTaskIQANet,
    image: np.ndarray,
    out_path,
    top_k: int = 8,
    tap: str = "t4",
) -> Path:
    """Montage of the `top_k` most active channels of either the first conv
    block ('conv1') or the stage-4 tap ('t4') for one image patch."""
    if tap not in ("conv1", "t4"):
        raise ValueError("tap must be 'conv1' or 't4'")
    side = model.config.patch_side
    if image.shape[0] < side or image.shape[1] < side:
        raise ValueError(f"image smaller than model patch side {side}")
    patch = image[:side, :side, :]
    x = torch.from_numpy(np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        if tap == "conv1":
            eps = model.config.backbone.in_epsilon
            fmap = torch.relu(instance_normalize(model.stages[0][0](x), eps))[0]
        else:
            fmap = model.forward_taps(x).t4[0]
    fmap = fmap.numpy()
    k = min(top_k, fmap.shape[0])
    strength = np.abs(fmap).mean(axis=(1, 2))
    chosen = np.argsort(-strength)[:k]

    ncols = min(k, 4)
    nrows = (k + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, ch in zip(axes.flat, chosen):
        ax.imshow(fmap[ch], cmap="gray")
        ax.set_title(f"ch {ch}", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
