"""Figure rendering: training curves, confusion heatmap, ROC plot, embedding.

Every figure gets a machine-readable twin (CSV or JSON) written next to
it; tests assert on the twins, people look at the PNGs.  Rendering is
headless (Agg) and fixed at 150 dpi.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import ClassSet
from .errors import EmptyHistory
from .metrics import ConfusionMatrix, write_confusion_csv
from .training import write_history_csv
from .tsne import Embedding2D

DPI = 150
_CMAP = plt.get_cmap("tab10")


def render_training_curves(history, png_path, csv_path=None) -> None:
    """Two panels, loss and accuracy, train and val series in each."""
    if not history:
        raise EmptyHistory("no epochs to plot")
    epochs = [m.epoch for m in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [m.train_loss for m in history], label="train")
    ax_loss.plot(epochs, [m.val_loss for m in history], label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("Loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [m.train_acc for m in history], label="train")
    ax_acc.plot(epochs, [m.val_acc for m in history], label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.set_title("Accuracy")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=DPI)
    plt.close(fig)
    if csv_path is not None:
        write_history_csv(history, csv_path)


def render_confusion_heatmap(cm: ConfusionMatrix, png_path, csv_path=None) -> None:
    """Annotated heatmap with class names on both axes."""
    names = cm.class_set.names
    k = len(names)
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * k), max(5, 0.7 * k)))
    im = ax.imshow(cm.counts, cmap="Blues")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks(range(k), names, rotation=45, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.counts.max() / 2 if cm.counts.max() else 0.5
    for i in range(k):
        for j in range(k):
            color = "white" if cm.counts[i, j] > threshold else "black"
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color=color)
    ax.set_title("Confusion matrix")
    fig.tight_layout()
    fig.savefig(png_path, dpi=DPI)
    plt.close(fig)
    if csv_path is not None:
        write_confusion_csv(cm, csv_path)


def render_roc(curves, class_set: ClassSet, png_path, json_path=None,
               omitted=()) -> None:
    """One-vs-rest curves, AUC per class in the legend.

    Degenerate classes (no positives or no negatives in the split) appear
    as an omission note in the legend rather than a fabricated curve.
    """
    fig, ax = plt.subplots(figsize=(7, 6))
    for curve in curves:
        fpr = [p[0] for p in curve.points]
        tpr = [p[1] for p in curve.points]
        name = class_set.names[curve.class_index]
        ax.plot(fpr, tpr, label=f"{name} (AUC={curve.auc:.3f})",
                color=_CMAP(curve.class_index % 10))
    for class_index, _reason in omitted:
        name = class_set.names[class_index]
        ax.plot([], [], " ", label=f"{name}: omitted (degenerate)")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("One-vs-rest ROC")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=DPI)
    plt.close(fig)
    if json_path is not None:
        write_roc_json(curves, class_set, json_path, omitted)


def write_roc_json(curves, class_set: ClassSet, path, omitted=()) -> None:
    payload = {"curves": {}, "omitted": {}}
    for curve in curves:
        name = class_set.names[curve.class_index]
        payload["curves"][name] = {
            "fpr": [p[0] for p in curve.points],
            "tpr": [p[1] for p in curve.points],
            "auc": curve.auc,
        }
    for class_index, reason in omitted:
        payload["omitted"][class_set.names[class_index]] = reason
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def render_embedding(emb: Embedding2D, class_set: ClassSet, png_path,
                     csv_path=None) -> None:
    """Scatter of the 2-D embedding, colored by class, with a legend."""
    fig, ax = plt.subplots(figsize=(7, 6))
    for c in sorted(set(int(v) for v in emb.labels)):
        pick = emb.labels == c
        ax.scatter(emb.coords[pick, 0], emb.coords[pick, 1], s=14,
                   color=_CMAP(c % 10), label=class_set.names[c])
    ax.set_xlabel("dimension 1")
    ax.set_ylabel("dimension 2")
    ax.set_title(f"Feature embedding (final KL={emb.final_kl:.3f})")
    ax.legend(fontsize=8, markerscale=1.2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=DPI)
    plt.close(fig)
    if csv_path is not None:
        write_embedding_csv(emb, class_set, csv_path)


def write_embedding_csv(emb: Embedding2D, class_set: ClassSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(emb.coords, emb.labels):
            writer.writerow([repr(float(x)), repr(float(y)),
                             class_set.names[int(label)]])


def read_embedding_csv(path, class_set: ClassSet):
    """Inverse of write_embedding_csv; returns (coords, labels)."""
    coords, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x", "y", "label"]:
            raise ValueError(f"unexpected embedding header {header}")
        for row in reader:
            coords.append((float(row[0]), float(row[1])))
            labels.append(class_set.index_of(row[2]))
    return np.array(coords), np.array(labels, dtype=np.int64)
