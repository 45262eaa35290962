"""
The evaluation toolkit on a worked example
==========================================

Build a small four-class problem by hand, then read off everything the
evaluate command reports: the confusion matrix, per-class precision,
recall and F1, the macro and micro averages, and one-vs-rest ROC/AUC.
Two identities worth seeing concretely: micro-F1 equals plain accuracy,
and trapezoidal AUC equals the Mann-Whitney pair-ranking statistic.
"""

import numpy as np

from endoclass.dataset import ClassSet
from endoclass.metrics import (auc_pairwise_oracle, classification_report,
                               confusion_matrix, evaluate_predictions,
                               roc_curve)

classes = ClassSet(["angiectasia", "bleeding", "erosion", "normal"])
rng = np.random.default_rng(42)

# 60 samples, 15 per class; predictions right ~80% of the time.
labels = np.repeat(np.arange(4), 15)
preds = labels.copy()
flip = rng.random(labels.size) < 0.2
preds[flip] = rng.integers(0, 4, size=int(flip.sum()))

cm = confusion_matrix(labels, preds, k=4, class_set=classes)
print("confusion matrix (rows = truth, columns = prediction):")
print(cm.counts)

report = classification_report(cm)
print(f"\n{'class':14s} {'prec':>6s} {'rec':>6s} {'f1':>6s} {'n':>4s}")
for name, m in zip(classes.names, report.per_class):
    print(f"{name:14s} {m.precision:6.3f} {m.recall:6.3f} {m.f1:6.3f} {m.support:4d}")
print(f"\naccuracy        {report.accuracy:.4f}")
print(f"macro F1        {report.macro_f1:.4f}")
print(f"micro F1        {report.micro_f1:.4f}   (always == accuracy)")

# ROC wants scores, not hard calls, so fake a probability table that
# concentrates mass on the predicted class.
probs = np.full((labels.size, 4), 0.05)
probs[np.arange(labels.size), preds] = 0.85
probs += rng.random(probs.shape) * 0.1
probs /= probs.sum(axis=1, keepdims=True)

print("\none-vs-rest AUC per class:")
for c, name in enumerate(classes.names):
    curve = roc_curve(probs[:, c], labels == c, class_index=c)
    oracle = auc_pairwise_oracle(probs[:, c], labels == c)
    print(f"  {name:14s} trapezoid {curve.auc:.4f}   pairwise {oracle:.4f}")

# evaluate_predictions bundles all of the above from a probability table.
result = evaluate_predictions(probs, labels, classes)
print(f"\nbundled result: accuracy {result.report.accuracy:.4f}, "
      f"{len(result.curves)} ROC curves, omitted classes: {list(result.omitted)}")
