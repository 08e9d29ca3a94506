"""Report figures written to files (headless Agg backend)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cmc(cmc, path, label="student", max_rank=20):
    cmc = np.asarray(cmc)[:max_rank]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ranks = np.arange(1, len(cmc) + 1)
        ax.plot(ranks, 100 * cmc, marker="o", ms=3, label=label)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate (%)")
        ax.set_ylim(0, 101)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_cluster_sizes(labels, path, title=None):
    labels = np.asarray(labels)
    sizes = np.bincount(labels[labels >= 0]) if (labels >= 0).any() else np.zeros(0, int)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if len(sizes):
            bins = np.arange(1, sizes.max() + 2) - 0.5
            ax.hist(sizes, bins=bins, color="tab:blue", edgecolor="white")
        ax.set_xlabel("cluster size")
        ax.set_ylabel("clusters")
        outliers = int((labels < 0).sum())
        ax.set_title(title or f"K={len(sizes)}, outliers={outliers}")
        return _save(fig, path)


def plot_adaptation(history, path, direct=None):
    """mAP, NMI and cluster count per adaptation epoch."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax, ax_k) = plt.subplots(1, 2, figsize=(8, 3.2))
        for key, style in (("mAP", "-o"), ("rank1", "-s"), ("NMI", "--")):
            ys = [h.get(key, np.nan) for h in history]
            if not np.all(np.isnan(np.asarray(ys, dtype=float))):
                ax.plot(epochs, ys, style, ms=3, label=key)
        if direct is not None:
            ax.axhline(direct, color="gray", ls=":", label="direct transfer mAP")
        ax.set_xlabel("adaptation epoch")
        ax.set_ylim(0, 1.02)
        ax.legend()
        ax_k.plot(epochs, [h.get("K", np.nan) for h in history], "-o", ms=3, color="tab:green")
        ax_k.set_xlabel("adaptation epoch")
        ax_k.set_ylabel("clusters K")
        return _save(fig, path)


def plot_loss_terms(rows, path):
    """Per-step loss curves from the training log rows."""
    if not rows:
        return None
    steps = [r["step"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.4))
        for key in rows[0]:
            if key.startswith("L_"):
                ax.plot(steps, [float(r[key]) for r in rows], lw=1, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.legend(ncol=3)
        return _save(fig, path)


def plot_pretrain(histories, path):
    """``histories`` maps a name to a list of {"epoch", "loss", "train_acc"} rows."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3.2))
        for name, hist in histories.items():
            ep = [h["epoch"] for h in hist]
            ax_l.plot(ep, [h["loss"] for h in hist], label=name)
            ax_a.plot(ep, [h["train_acc"] for h in hist], label=name)
        ax_l.set_xlabel("pretrain epoch")
        ax_l.set_ylabel("ce + triplet")
        ax_a.set_xlabel("pretrain epoch")
        ax_a.set_ylabel("source train accuracy")
        ax_a.set_ylim(0, 1.02)
        ax_l.legend()
        return _save(fig, path)


def plot_arms(summary, path):
    """Bar chart of mean final mAP per ablation arm with the direct-transfer line."""
    names = list(summary["arm_mAP"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.4))
        ax.bar(range(len(names)), [100 * summary["arm_mAP"][n] for n in names],
               color="tab:blue")
        ax.axhline(100 * summary["direct_mAP"], color="gray", ls=":", label="direct transfer")
        ax.set_xticks(range(len(names)), names, rotation=20)
        ax.set_ylabel("target mAP (%)")
        ax.legend()
        return _save(fig, path)


def plot_samples(datasets, path, n_ids=6, per_id=4):
    """Grid of the first images of the first identities of each dataset."""
    names = list(datasets)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), 1, figsize=(n_ids * per_id * 0.35 + 1,
                                                         2.0 * len(names)), squeeze=False)
        for ax, name in zip(axes[:, 0], names):
            ds = datasets[name]
            tiles = []
            for pid in list(ds.identity_index)[:n_ids]:
                idx = list(ds.identity_index[pid])[:per_id]
                tiles.extend(ds.image(i) for i in idx)
            ax.imshow(np.concatenate(tiles, axis=1) if tiles else np.zeros((1, 1, 3)))
            ax.set_title(name)
            ax.axis("off")
        return _save(fig, path)
