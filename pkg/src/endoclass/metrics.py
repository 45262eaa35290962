"""Evaluation metrics: confusion matrix, classification report, ROC/AUC.

All functions are pure over prediction arrays.  Single-label multi-class
conventions throughout: accuracy = trace/total, micro-F1 computed from
pooled counts (which makes it equal accuracy exactly), macro averages
unweighted over classes that actually appear, empty denominators give 0
rather than NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import ClassSet
from .errors import DegenerateClass, LabelOutOfRange


@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # K x K ints, rows = true, cols = predicted
    class_set: ClassSet

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    zero_division: bool = False  # an empty denominator was coerced to 0


@dataclass
class ClassificationReport:
    per_class: list
    accuracy: float
    macro_f1: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    # indices actually averaged into the macro figures (support > 0)
    macro_classes: tuple = ()


@dataclass
class ROCCurve:
    points: list                # ordered (fpr, tpr) pairs
    auc: float
    class_index: int


@dataclass
class EvaluationResult:
    report: ClassificationReport
    confusion: ConfusionMatrix
    curves: list                # ROCCurve per non-degenerate class
    omitted: list               # (class_index, reason) for degenerate classes
    probs: np.ndarray           # N x K fused probabilities
    labels: np.ndarray          # N true labels
    preds: np.ndarray           # N argmax predictions


def confusion_matrix(y_true, y_pred, k: int,
                     class_set: Optional[ClassSet] = None) -> "ConfusionMatrix":
    """Count matrix with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size < 1:
        raise ValueError("y_true and y_pred must be equal-length 1-D, N >= 1")
    for arr in (y_true, y_pred):
        if arr.min() < 0 or arr.max() >= k:
            raise LabelOutOfRange(f"labels must lie in [0, {k})")
    if class_set is None:
        # zero-padded so ClassSet's lexicographic order matches the indices
        width = len(str(k - 1))
        class_set = ClassSet([f"class_{i:0{width}d}" for i in range(k)])
    elif len(class_set) != k:
        raise ValueError(f"class_set has {len(class_set)} names, expected {k}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts, class_set=class_set)


def _safe_div(num: float, den: float):
    return (num / den, False) if den > 0 else (0.0, True)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    counts = cm.counts
    k = counts.shape[0]
    total = counts.sum()
    if total < 1:
        raise ValueError("confusion matrix is empty")
    per_class = []
    for c in range(k):
        tp = counts[c, c]
        precision, p_zero = _safe_div(tp, counts[:, c].sum())
        recall, r_zero = _safe_div(tp, counts[c, :].sum())
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
        per_class.append(ClassMetrics(float(precision), float(recall), float(f1),
                                      int(counts[c, :].sum()),
                                      zero_division=p_zero or r_zero))
    accuracy = float(np.trace(counts) / total)
    present = tuple(c for c in range(k) if per_class[c].support > 0)
    macro_precision = float(np.mean([per_class[c].precision for c in present]))
    macro_recall = float(np.mean([per_class[c].recall for c in present]))
    macro_f1 = float(np.mean([per_class[c].f1 for c in present]))
    # Pooled TP = trace and pooled FP = pooled FN, so micro-F1 is exactly
    # accuracy; compute it that way to keep the identity bit-exact.
    micro_f1 = accuracy
    return ClassificationReport(per_class=per_class, accuracy=accuracy,
                                macro_f1=macro_f1, micro_f1=micro_f1,
                                macro_precision=macro_precision,
                                macro_recall=macro_recall,
                                macro_classes=present)


def roc_curve(scores, is_positive, class_index: int = 0) -> ROCCurve:
    """One-vs-rest ROC by sweeping descending unique scores; ties grouped.

    A sample is called positive at threshold t when score >= t, so each
    distinct score contributes exactly one point.  The curve is anchored
    at (0,0) and (1,1) and the AUC is the trapezoidal integral.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(
            f"class {class_index}: need both positives and negatives "
            f"(got {n_pos} positive, {n_neg} negative)")
    points = [(0.0, 0.0)]
    for threshold in np.unique(scores)[::-1]:
        called = scores >= threshold
        tpr = float((called & pos).sum() / n_pos)
        fpr = float((called & ~pos).sum() / n_neg)
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return ROCCurve(points=points, auc=float(auc), class_index=class_index)


def auc_pairwise_oracle(scores, is_positive) -> float:
    """Mann-Whitney statistic: fraction of (pos, neg) pairs ranked correctly,
    ties counting half.  Test oracle for roc_curve.auc."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    sp, sn = scores[pos], scores[~pos]
    if sp.size == 0 or sn.size == 0:
        raise DegenerateClass("need both positives and negatives")
    diff = sp[:, None] - sn[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (sp.size * sn.size))


def evaluate_predictions(probs: np.ndarray, labels, class_set: ClassSet) -> EvaluationResult:
    """Metric suite from fused probabilities and true labels.

    Argmax ties break toward the lowest class index (np.argmax semantics).
    Classes without both positives and negatives in the split get their
    ROC omitted with a notice instead of a fabricated curve.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(class_set)
    if probs.ndim != 2 or probs.shape[1] != k:
        raise ValueError(f"probs must be N x {k}")
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(labels, preds, k, class_set=class_set)
    report = classification_report(cm)
    curves, omitted = [], []
    for c in range(k):
        try:
            curves.append(roc_curve(probs[:, c], labels == c, class_index=c))
        except DegenerateClass as exc:
            omitted.append((c, str(exc)))
    return EvaluationResult(report=report, confusion=cm, curves=curves,
                            omitted=omitted, probs=probs, labels=labels,
                            preds=preds)


def evaluate_model(model, frames, class_set: ClassSet, *, stats, input_size: int,
                   batch_size: int = 32, cache=None) -> EvaluationResult:
    """Run the deterministic eval path over frames and score the result."""
    from .preprocess import iter_eval_batches
    if not frames:
        raise ValueError("cannot evaluate an empty split")
    all_probs, all_labels = [], []
    for x, y in iter_eval_batches(frames, stats, (input_size, input_size),
                                  batch_size, cache=cache):
        all_probs.append(model.predict_probs(x))
        all_labels.append(y)
    return evaluate_predictions(np.concatenate(all_probs),
                                np.concatenate(all_labels), class_set)


def report_to_dict(result: EvaluationResult) -> dict:
    """The machine-readable report: classes, averages, per-class AUC."""
    names = result.confusion.class_set.names
    classes = {}
    for name, m in zip(names, result.report.per_class):
        classes[name] = {"precision": m.precision, "recall": m.recall,
                         "f1": m.f1, "support": m.support}
    auc = {names[c.class_index]: c.auc for c in result.curves}
    return {
        "classes": classes,
        "accuracy": result.report.accuracy,
        "macro_f1": result.report.macro_f1,
        "micro_f1": result.report.micro_f1,
        "macro_precision": result.report.macro_precision,
        "macro_recall": result.report.macro_recall,
        "auc": auc,
    }


def write_report_json(result: EvaluationResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(result), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    """Square CSV with class names as both header row and header column."""
    names = cm.class_set.names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(names))
        for name, row in zip(names, cm.counts):
            writer.writerow([name] + [int(v) for v in row])


def read_confusion_csv(path, class_set: Optional[ClassSet] = None) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]],
                      dtype=np.int64)
    cs = class_set if class_set is not None else ClassSet(names)
    return ConfusionMatrix(counts=counts, class_set=cs)
