"""
Static figures of a run, written as PNG files
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import pyplot as plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc_pr(curves, path):
    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(12, 5))
    for name in curves.classes:
        if name in curves.per_class_roc:
            roc = curves.per_class_roc[name]
            pr = curves.per_class_pr[name]
            ax_roc.plot(roc.x, roc.y, label=f"{name} (AUC={curves.per_class_auc[name]:.3f})")
            ax_pr.step(pr.x, pr.y, where="post", label=f"{name} (AP={curves.per_class_ap[name]:.3f})")
    if curves.micro_roc is not None:
        ax_roc.plot(curves.micro_roc.x, curves.micro_roc.y, "k--", label=f"micro (AUC={curves.micro_auc:.3f})")
        ax_pr.step(curves.micro_pr.x, curves.micro_pr.y, "k--", where="post", label=f"micro (AP={curves.micro_ap:.3f})")
    ax_roc.plot([0, 1], [0, 1], ":", color="gray")
    ax_roc.set_xlabel("False positive rate")
    ax_roc.set_ylabel("True positive rate")
    ax_roc.set_title("ROC (one-vs-rest)")
    ax_pr.set_xlabel("Recall")
    ax_pr.set_ylabel("Precision")
    ax_pr.set_title("Precision-Recall (one-vs-rest)")
    for ax in (ax_roc, ax_pr):
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize="small", loc="lower right" if ax is ax_roc else "lower left")
    return _save(fig, path)


def plot_confusion(matrix, path):
    k = len(matrix.classes)
    fig, ax = plt.subplots(figsize=(1.2 * k + 2, 1.2 * k + 1))
    image = ax.imshow(matrix.counts, cmap="Blues")
    fig.colorbar(image, ax=ax)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(matrix.classes, rotation=45, ha="right")
    ax.set_yticklabels(matrix.classes)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    threshold = matrix.counts.max() / 2 if matrix.counts.size else 0
    for i in range(k):
        for j in range(k):
            value = matrix.counts[i, j]
            ax.text(j, i, str(value), ha="center", va="center", color="white" if value > threshold else "black")
    return _save(fig, path)


def plot_efficiency(entries, path):
    """
    :param entries: list of (model name, fps, size_mb, train_time_s), None values are drawn as missing bars
    """
    names = [e[0] for e in entries]
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5))
    for ax, column, title in zip(axes, (1, 2, 3), ("FPS", "Size (MB)", "Training time (s)")):
        values = [np.nan if e[column] is None else e[column] for e in entries]
        ax.bar(range(len(names)), values, color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_title(title)
    return _save(fig, path)


def plot_history(history, path):
    epochs = [e.epoch for e in history.epochs]
    fig, (ax_loss, ax_val, ax_lr) = plt.subplots(1, 3, figsize=(15, 4))
    ax_loss.plot(epochs, [e.train_loss for e in history.epochs], "o-")
    ax_loss.set_title("Train loss")
    val_f1 = [np.nan if e.val_macro_f1 is None else e.val_macro_f1 for e in history.epochs]
    val_acc = [np.nan if e.val_accuracy is None else e.val_accuracy for e in history.epochs]
    ax_val.plot(epochs, val_acc, "o-", label="accuracy")
    ax_val.plot(epochs, val_f1, "s-", label="macro-F1")
    if history.best_epoch >= 0:
        ax_val.axvline(history.best_epoch, color="gray", linestyle=":")
    ax_val.set_title("Validation")
    ax_val.legend()
    ax_lr.plot(epochs, [e.lr for e in history.epochs], "o-")
    ax_lr.set_title("Learning rate")
    for ax in (ax_loss, ax_val, ax_lr):
        ax.set_xlabel("epoch")
    return _save(fig, path)
