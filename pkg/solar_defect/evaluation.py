import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import auc, average_precision_score, precision_recall_curve, roc_curve

from .enums import CurveMode
from .serialization import as_plain

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """
    counts[i, j] = number of samples of true class i predicted as class j
    """

    counts: np.ndarray
    classes: Tuple[str, ...]

    @property
    def support(self):
        return self.counts.sum(axis=1)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def per_class(self):
        """
        precision, recall and f1 of every class, 0 where undefined
        """
        tp = np.diag(self.counts).astype(float)
        predicted = self.counts.sum(axis=0).astype(float)
        actual = self.counts.sum(axis=1).astype(float)
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        denominator = precision + recall
        f1 = np.divide(2 * precision * recall, denominator, out=np.zeros_like(tp), where=denominator > 0)
        return precision, recall, f1

    def to_dict(self):
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def confusion(preds, labels, num_classes, classes=None):
    preds = np.asarray(preds, dtype=int).reshape(-1)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if preds.shape != labels.shape:
        raise RuntimeError(f"preds ({preds.shape[0]}) and labels ({labels.shape[0]}) must have the same length")
    for name, values in (("preds", preds), ("labels", labels)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise RuntimeError(f"{name} must hold class indices in [0, {num_classes - 1}]")
    counts = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(counts, (labels, preds), 1)
    if classes is None:
        classes = tuple(str(i) for i in range(num_classes))
    return ConfusionMatrix(counts, tuple(classes))


def mann_whitney_auc(binary_labels, scores):
    """
    Probability that a positive outranks a negative, ties counting one half.
    None when either group is empty.
    """
    binary_labels = np.asarray(binary_labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(binary_labels.sum())
    n_neg = binary_labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[binary_labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray


@dataclass
class CurveSet:
    classes: Tuple[str, ...]
    per_class_roc: Dict[str, Curve] = field(default_factory=dict)
    per_class_pr: Dict[str, Curve] = field(default_factory=dict)
    per_class_auc: Dict[str, Optional[float]] = field(default_factory=dict)
    per_class_ap: Dict[str, Optional[float]] = field(default_factory=dict)
    micro_roc: Optional[Curve] = None
    micro_pr: Optional[Curve] = None
    micro_auc: Optional[float] = None
    micro_ap: Optional[float] = None

    @property
    def undefined(self):
        return [c for c, value in self.per_class_auc.items() if value is None]

    @property
    def mean_auc(self):
        defined = [v for v in self.per_class_auc.values() if v is not None]
        return float(np.mean(defined)) if defined else None

    def summary(self):
        return {
            "per_class_auc": dict(self.per_class_auc),
            "per_class_ap": dict(self.per_class_ap),
            "mean_auc": self.mean_auc,
            "micro_auc": self.micro_auc,
            "micro_ap": self.micro_ap,
            "undefined": self.undefined,
        }


def _curves(binary_labels, scores):
    fpr, tpr, roc_thresholds = roc_curve(binary_labels, scores, drop_intermediate=False)
    precision, recall, pr_thresholds = precision_recall_curve(binary_labels, scores)
    roc = Curve(fpr, tpr, roc_thresholds)
    pr = Curve(recall, precision, np.append(pr_thresholds, np.inf))
    return roc, pr, float(auc(fpr, tpr)), float(average_precision_score(binary_labels, scores))


def roc_pr_auc(scores, labels, mode=CurveMode.BOTH, classes=None):
    """
    One-vs-rest ROC and PR curves. A class without positives or without negatives gets an undefined
    (None) AUC and no curve; micro curves pool every binarized (sample, class) pair.
    :param scores: N x K class probabilities
    :param labels: N true class indices
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise RuntimeError(f"scores must be N x K with N = {labels.shape[0]}, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise RuntimeError("scores must be finite")
    num_classes = scores.shape[1]
    classes = tuple(classes) if classes is not None else tuple(str(i) for i in range(num_classes))
    one_hot = labels[:, None] == np.arange(num_classes)[None, :]
    curves = CurveSet(classes)

    if mode in (CurveMode.PER_CLASS, CurveMode.BOTH):
        for k, name in enumerate(classes):
            positives = one_hot[:, k]
            if positives.all() or not positives.any():
                logger.warning("AUC of class '%s' is undefined (no positive or no negative sample)", name)
                curves.per_class_auc[name] = None
                curves.per_class_ap[name] = None
                continue
            roc, pr, roc_auc, ap = _curves(positives, scores[:, k])
            curves.per_class_roc[name] = roc
            curves.per_class_pr[name] = pr
            curves.per_class_auc[name] = roc_auc
            curves.per_class_ap[name] = ap

    if mode in (CurveMode.MICRO, CurveMode.BOTH):
        pooled = one_hot.ravel()
        if pooled.any() and not pooled.all():
            curves.micro_roc, curves.micro_pr, curves.micro_auc, curves.micro_ap = _curves(pooled, scores.ravel())
    return curves


def write_curves_csv(curves, path):
    """
    One row per curve point: curve kind, class (or "micro"), threshold, x, y
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in curves.classes:
        if name in curves.per_class_roc:
            entries.append(("roc", name, curves.per_class_roc[name]))
            entries.append(("pr", name, curves.per_class_pr[name]))
    if curves.micro_roc is not None:
        entries.append(("roc", "micro", curves.micro_roc))
        entries.append(("pr", "micro", curves.micro_pr))
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["curve", "class", "threshold", "x", "y"])
        for kind, name, curve in entries:
            for threshold, x, y in zip(curve.thresholds, curve.x, curve.y):
                writer.writerow([kind, name, repr(float(threshold)), repr(float(x)), repr(float(y))])


def most_confused_pairs(matrix, top=5):
    """
    Largest off-diagonal cells as (true class, predicted class, count), count descending
    """
    pairs = []
    k = len(matrix.classes)
    for i in range(k):
        for j in range(k):
            if i != j and matrix.counts[i, j] > 0:
                pairs.append((matrix.classes[i], matrix.classes[j], int(matrix.counts[i, j])))
    pairs.sort(key=lambda p: (-p[2], matrix.classes.index(p[0]), matrix.classes.index(p[1])))
    return pairs[:top]


@dataclass
class EvalReport:
    model_name: str
    metrics: object
    confusion: ConfusionMatrix
    curves: CurveSet

    def to_dict(self):
        return {
            "model": self.model_name,
            "metrics": self.metrics.to_dict(),
            "confusion": self.confusion.to_dict(),
            "auc": self.curves.summary(),
            "most_confused": [list(p) for p in most_confused_pairs(self.confusion)],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self):
        m = self.metrics
        lines = [
            f"## {self.model_name}",
            "",
            f"Accuracy: {m.accuracy:.4f}  ",
            f"Macro-F1: {m.macro_f1:.4f}  ",
            f"Micro-average AUC: {_fmt(self.curves.micro_auc, '{:.4f}')}",
            "",
            "| Class | Precision | Recall | F1 | Support | AUC | AP |",
            "|---|---|---|---|---|---|---|",
        ]
        for name in self.confusion.classes:
            scores = m.per_class[name]
            lines.append(
                f"| {name} | {scores['precision']:.4f} | {scores['recall']:.4f} | {scores['f1']:.4f} | "
                f"{m.support[name]} | {_fmt(self.curves.per_class_auc.get(name), '{:.4f}', 'undefined')} | "
                f"{_fmt(self.curves.per_class_ap.get(name), '{:.4f}', 'undefined')} |"
            )
        lines += ["", "Confusion matrix (rows: true class, columns: predicted class)", ""]
        lines.append("| | " + " | ".join(self.confusion.classes) + " |")
        lines.append("|---" * (len(self.confusion.classes) + 1) + "|")
        for name, row in zip(self.confusion.classes, self.confusion.counts):
            lines.append(f"| {name} | " + " | ".join(str(int(v)) for v in row) + " |")
        pairs = most_confused_pairs(self.confusion)
        if pairs:
            lines += ["", "Most confused pairs", "", "| True | Predicted | Count |", "|---|---|---|"]
            lines += [f"| {t} | {p} | {c} |" for t, p, c in pairs]
        return "\n".join(lines) + "\n"


def _fmt(value, pattern, missing="-"):
    return missing if value is None else pattern.format(value)


@dataclass
class ComparisonRow:
    """
    One line of the comparison report. A row without accuracy is a skipped baseline.
    """

    model: str
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    fps: Optional[float] = None
    size_mb: Optional[float] = None
    reference: bool = False
    note: str = ""

    @property
    def skipped(self):
        return self.accuracy is None


# Published reference values, archived for comparison only (external dataset, GPU throughput)
PUBLISHED_REFERENCE_ROWS = (
    ComparisonRow("Hybrid (Ours) (published)", 0.9237, 0.9226, 54.9, 16.3, reference=True),
    ComparisonRow("EfficientNet-B0 (published)", 0.9084, 0.9072, 57.8, 15.5, reference=True),
    ComparisonRow("VGG19 (published)", 0.8779, 0.8780, 39.9, 532.6, reference=True),
    ComparisonRow("MobileNetV3 (published)", 0.8626, 0.8593, 59.0, 16.2, reference=True),
    ComparisonRow("ResNet50 (published)", 0.8397, 0.8391, 43.6, 89.9, reference=True),
    ComparisonRow("Custom CNN (published)", 0.7863, 0.7853, 56.5, 5.0, reference=True),
)


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow]
    baseline: Optional[str] = None

    def to_dict(self):
        return {"baseline": self.baseline, "rows": [as_plain(r) for r in self.rows]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self):
        base = next((r for r in self.rows if r.model == self.baseline and not r.skipped), None)
        header = ["Model", "Acc.", "F1-Score", "FPS", "Size (MB)"]
        if base is not None:
            header.append(f"Δ Acc. vs {base.model}")
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in self.rows:
            if row.skipped:
                cells = [row.model, "skipped", "skipped", "skipped", "skipped"]
            else:
                cells = [
                    row.model,
                    f"{100 * row.accuracy:.2f}%",
                    _fmt(row.macro_f1, "{:.4f}"),
                    _fmt(row.fps, "{:.1f}"),
                    _fmt(row.size_mb, "{:.1f}"),
                ]
            if base is not None:
                cells.append("-" if row.skipped else f"{100 * (row.accuracy - base.accuracy):+.2f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def emit_comparison_report(rows, baseline=None):
    """
    Sorts the rows by accuracy (descending), skipped rows last
    :param rows: ComparisonRow list, at least one
    :param baseline: Optional model name used for an accuracy delta column
    """
    rows = list(rows)
    if not rows:
        raise RuntimeError("A comparison report needs at least one row")
    ranked = sorted((r for r in rows if not r.skipped), key=lambda r: -r.accuracy)
    ranked += [r for r in rows if r.skipped]
    return ComparisonReport(ranked, baseline)
