"""Figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}

plt.rcParams.update(
    {
        "font.size": 8,
        "axes.titlesize": 8,
        "axes.labelsize": 8,
        "xtick.labelsize": 7,
        "ytick.labelsize": 7,
        "legend.fontsize": 7,
        "figure.autolayout": True,
    }
)


def loss_figure(path, losses, smoothed=None, val_losses=None, steps_per_epoch=None):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.5, color="0.7", label="train")
    if smoothed is not None:
        ax.plot(np.arange(1, len(smoothed) + 1), smoothed, lw=1.2, color="C0", label="train (smoothed)")
    if val_losses and steps_per_epoch:
        x = np.arange(1, len(val_losses) + 1) * steps_per_epoch
        ax.plot(x, val_losses, "o-", ms=2, lw=1, color="C3", label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def comparison_figure(path, refs, preds, errors, titles=None):
    """Ground truth / synthesized / error-map columns, one row per example."""
    n = len(refs)
    fig, axes = plt.subplots(n, 3, figsize=(4.8, 1.6 * n), squeeze=False)
    for i in range(n):
        for j, (img, cmap, label) in enumerate(
            ((refs[i], "gray", "reference"), (preds[i], "gray", "synthesized"), (errors[i], "inferno", "|error|"))
        ):
            ax = axes[i, j]
            vmin, vmax = (0, 1) if j == 2 else (float(np.min(refs[i])), float(np.max(refs[i])))
            ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(label)
        if titles:
            axes[i, 0].set_ylabel(titles[i])
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
