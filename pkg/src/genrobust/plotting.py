"""Static figures (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(curves: dict, path, title="Robust accuracy vs test perturbation"):
    """``curves`` maps a label to ``(epsilons, accuracies)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (eps, acc) in curves.items():
        ax.plot(eps, np.asarray(acc) * 100, marker="o", label=label)
    ax.set_xlabel("test perturbation size (L2)")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: list, axis: str, path):
    labels = [str(r["value"]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, [r["clean_auroc"] for r in rows], marker="o", label="clean AUROC")
    ax.plot(x, [r["adv_auroc"] for r in rows], marker="s", label="adversarial AUROC")
    ax.set_xticks(x, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("AUROC")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_trails(trails: dict, metric: str, path):
    """Per-epoch ``metric`` for several training runs; ``trails`` maps label to a list of records."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, records in trails.items():
        ax.plot([r["epoch"] for r in records], [r["metrics"][metric] for r in records], marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_head_histograms(scores: list, path, bins=40):
    """One panel per head: ``d_k`` on class-k samples vs. samples of the other classes (shared x axis)."""
    K = len(scores)
    fig, axes = plt.subplots(1, K, figsize=(3.2 * K, 2.8), sharex=True)
    axes = np.atleast_1d(axes)
    lo = min(min(s_in.min(), s_out.min()) for s_in, s_out in scores)
    hi = max(max(s_in.max(), s_out.max()) for s_in, s_out in scores)
    edges = np.linspace(lo, hi, bins + 1)
    for k, (ax, (s_in, s_out)) in enumerate(zip(axes, scores)):
        ax.hist(s_out, bins=edges, alpha=0.6, density=True, label="other classes")
        ax.hist(s_in, bins=edges, alpha=0.6, density=True, label=f"class {k}")
        ax.set_title(f"d_{k}")
        ax.legend(fontsize=7)
    return _save(fig, path)
