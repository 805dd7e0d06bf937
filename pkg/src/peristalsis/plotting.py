"""Figures written next to the text reports (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_training_curve(curve, path, title=None) -> Path:
    """Train/validation loss and accuracy per epoch."""
    epochs = np.arange(1, len(curve.train_loss) + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
    ax1.plot(epochs, curve.train_loss, label="train")
    ax1.plot(epochs, curve.val_loss, label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax2.plot(epochs, curve.train_acc, label="train")
    ax2.plot(epochs, curve.val_acc, label="validation")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    for ax in (ax1, ax2):
        if curve.best_epoch:
            ax.axvline(curve.best_epoch, color="0.6", lw=0.8, ls="--")
    ax2.legend(loc="lower right", frameon=False)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_refinement(starts, probs, truth, refined, path, title=None) -> Path:
    """CNN probabilities with the truth and the refined labels underneath."""
    starts = np.asarray(starts)
    fig, ax = plt.subplots(figsize=(7.0, 2.6))
    ax.plot(starts, probs, color="k", lw=0.8, label="p(P)")
    ax.step(starts, np.asarray(truth) * 0.1 - 0.25, where="post", color="tab:green", label="truth")
    ax.step(starts, np.asarray(refined) * 0.1 - 0.42, where="post", color="tab:orange",
            label="refined")
    ax.axhline(0.5, color="0.7", lw=0.6, ls=":")
    ax.set_ylim(-0.5, 1.05)
    ax.set_yticks([0, 0.5, 1])
    ax.set_xlabel("segment start (s)")
    ax.legend(loc="upper right", ncol=3, frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_sigma_sweep(sweep, path) -> Path:
    sig = [s for s, _, _ in sweep]
    fig, ax = plt.subplots(figsize=(4.2, 2.8))
    ax.plot(sig, [a for _, a, _ in sweep], "o-", label="ACC")
    aucs = [np.nan if u is None else u for _, _, u in sweep]
    ax.plot(sig, aucs, "s--", label="AUC")
    ax.set_xscale("log")
    ax.set_xlabel("Laplace scale sigma")
    ax.set_ylabel("pooled score")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows: dict, path) -> Path:
    """Grouped bars of ACC / AUC / MA_F1 / WT_F1 for each named report."""
    keys = ("acc", "auc", "ma_f1", "wt_f1")
    x = np.arange(len(keys))
    width = 0.8 / max(1, len(rows))
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    for i, (name, r) in enumerate(rows.items()):
        vals = [np.nan if getattr(r, k) is None else getattr(r, k) for k in keys]
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels([k.upper() for k in keys])
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def render_lopocv_figures(out_dir, result, sweep=None) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for f in result.folds:
        if f.curve is not None and f.curve.train_loss:
            paths.append(plot_training_curve(f.curve, out / f"curve_{f.subject_id}.png",
                                             f"held out: {f.subject_id}"))
        paths.append(plot_refinement(f.raw.starts, f.raw.probs, f.truth, f.refined.labels(),
                                     out / f"refine_{f.subject_id}.png", f.subject_id))
    rows = {"CNN": result.pooled_pre, "CNN+HSMM": result.pooled_post}
    if result.pooled_conventional is not None:
        rows["CNN+conv. HSMM"] = result.pooled_conventional
    paths.append(plot_ablation(rows, out / "ablation.png"))
    if sweep:
        paths.append(plot_sigma_sweep(sweep, out / "sigma_sweep.png"))
    return paths
