"""Figure rendering for experiment outputs.

Every CLI command that writes delimited metrics also renders the matching
figures next to them via these helpers.  All rendering targets files
through the Agg backend, so reports work on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import UsageError


def _finish(fig, path):
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_training_curves(rows, path, title="training"):
    """Loss and validation-accuracy curves over epochs, decays annotated."""
    if not rows:
        raise UsageError("no epoch rows to plot")
    epochs = [r.epoch for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.train_loss for r in rows], label="train loss", marker="o")
    ax_loss.plot(epochs, [r.val_loss for r in rows], label="val loss", marker="s")
    for prev, cur in zip(rows, rows[1:]):
        if cur.lr < prev.lr:
            ax_loss.axvline(cur.epoch, color="grey", ls=":", lw=1)
            ax_loss.annotate(
                f"lr={cur.lr:g}",
                (cur.epoch, ax_loss.get_ylim()[1]),
                fontsize=7,
                ha="left",
                va="top",
                rotation=90,
            )
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.set_title(f"{title}: loss")

    ax_acc.plot(epochs, [r.val_accuracy for r in rows], marker="o", color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.grid(alpha=0.3)
    ax_acc.set_title(f"{title}: accuracy")
    return _finish(fig, path)


def save_prune_curve(records, best_pass, path):
    """Validation accuracy against filters pruned, the kept pass marked."""
    if not records:
        raise UsageError("no prune records to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r.pruned_total for r in records]
    ys = [r.val_accuracy for r in records]
    ax.plot(xs, ys, marker="o")
    for r in records:
        if r.index == best_pass:
            ax.scatter([r.pruned_total], [r.val_accuracy], s=120, facecolors="none",
                       edgecolors="tab:red", label=f"kept: pass {best_pass}")
    ax.set_xlabel("filters pruned (cumulative)")
    ax.set_ylabel("validation accuracy")
    ax.set_title("iterative pruning")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _finish(fig, path)


def save_confusion_matrix(confusion, path, title="confusion"):
    """Heatmap of a confusion matrix with integer annotations."""
    c = np.asarray(confusion)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"confusion matrix must be square, got shape {c.shape}")
    n = c.shape[0]
    fig, ax = plt.subplots(figsize=(0.6 * n + 2, 0.6 * n + 2))
    im = ax.imshow(c, cmap="Blues")
    for i in range(n):
        for j in range(n):
            if c[i, j]:
                ax.text(j, i, str(int(c[i, j])), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, shrink=0.8)
    return _finish(fig, path)


def save_attribution_grid(maps, path, max_frames=8):
    """Per-head rows of input-gradient heat, one column per frame.

    ``maps`` is ``{label: [T,H,W] array}``; values are shown on a shared
    [0,1] scale since attribution maps are already max-normalized.
    """
    if not maps:
        raise UsageError("no attribution maps to plot")
    labels = list(maps)
    frames = min(max_frames, min(np.asarray(m).shape[0] for m in maps.values()))
    fig, axes = plt.subplots(
        len(labels),
        frames,
        figsize=(1.6 * frames, 1.8 * len(labels)),
        squeeze=False,
    )
    for row, label in enumerate(labels):
        m = np.asarray(maps[label])
        if m.ndim != 3:
            raise UsageError(f"attribution map {label!r} must be [T,H,W], got {m.shape}")
        pick = np.linspace(0, m.shape[0] - 1, frames).round().astype(int)
        for col, t in enumerate(pick):
            ax = axes[row][col]
            ax.imshow(m[t], cmap="inferno", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"frame {t}", fontsize=8)
        axes[row][0].set_ylabel(label, fontsize=9)
    return _finish(fig, path)


def save_crop_preview(frames, rect, cropped, path, max_cols=6):
    """Original frames with the crop rectangle drawn, above the cropped result."""
    frames = np.asarray(frames)
    cropped = np.asarray(cropped)
    if frames.ndim != 3 or cropped.ndim != 3:
        raise UsageError("crop preview expects [T,H,W] frame stacks")
    cols = min(max_cols, frames.shape[0], cropped.shape[0])
    pick = np.linspace(0, frames.shape[0] - 1, cols).round().astype(int)
    fig, axes = plt.subplots(2, cols, figsize=(1.9 * cols, 4.2), squeeze=False)
    for col, t in enumerate(pick):
        top = axes[0][col]
        top.imshow(frames[t], cmap="gray")
        top.add_patch(
            plt.Rectangle(
                (rect.x0 - 0.5, rect.y0 - 0.5),
                rect.width,
                rect.height,
                fill=False,
                edgecolor="tab:red",
                lw=1.5,
            )
        )
        top.set_xticks([])
        top.set_yticks([])
        top.set_title(f"frame {t}", fontsize=8)
        bottom = axes[1][col]
        bottom.imshow(cropped[t], cmap="gray")
        bottom.set_xticks([])
        bottom.set_yticks([])
    axes[0][0].set_ylabel("input + crop rect", fontsize=9)
    axes[1][0].set_ylabel("cropped", fontsize=9)
    return _finish(fig, path)


def save_sample_frames(samples, path, max_cols=8):
    """One representative frame per class, labeled by class id."""
    if not samples:
        raise UsageError("no sample frames to plot")
    labels = list(samples)
    cols = min(max_cols, len(labels))
    rows = (len(labels) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.9 * cols, 2.1 * rows), squeeze=False)
    for i, label in enumerate(labels):
        frame = np.asarray(samples[label])
        if frame.ndim != 2:
            raise UsageError(f"sample frame {label!r} must be [H,W], got {frame.shape}")
        ax = axes[i // cols][i % cols]
        ax.imshow(frame, cmap="gray")
        ax.set_title(str(label), fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
        if not ax.images:
            ax.axis("off")
    return _finish(fig, path)


def save_projection_scatter(observed, reprojected, path):
    """Observed against reprojected pixel coordinates, one panel per axis."""
    obs = np.asarray(observed, dtype=np.float64)
    rep = np.asarray(reprojected, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != 2 or obs.shape != rep.shape:
        raise UsageError(
            f"expected matching [M,2] pixel arrays, got {obs.shape} and {rep.shape}"
        )
    if obs.shape[0] == 0:
        raise UsageError("no projection samples to plot")
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
    for axis, (ax, name) in enumerate(zip(axes, ("x", "y"))):
        ax.scatter(obs[:, axis], rep[:, axis], s=6, alpha=0.5)
        lo = min(obs[:, axis].min(), rep[:, axis].min())
        hi = max(obs[:, axis].max(), rep[:, axis].max())
        ax.plot([lo, hi], [lo, hi], color="grey", ls=":", lw=1)
        ax.set_xlabel(f"observed {name} (px)")
        ax.set_ylabel(f"reprojected {name} (px)")
        ax.set_title(f"{name} axis")
    return _finish(fig, path)
