"""Confusion matrices, classification metrics, ROC AUC and fold aggregation."""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "balanced_accuracy", "auc")


def confusion(preds, labels, n: int) -> np.ndarray:
    """``counts[actual][predicted]`` as an ``(n, n)`` int64 array."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} index out of range for {n} classes")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class FoldReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    balanced_accuracy: float
    auc: float | None = None
    per_class_precision: list[float] = field(default_factory=list)
    per_class_recall: list[float] = field(default_factory=list)
    undefined_precision: list[bool] = field(default_factory=list)
    undefined_recall: list[bool] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def metrics(cm) -> FoldReport:
    """Macro metrics; a zero denominator yields 0 and sets the class's flag."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    rec = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return FoldReport(
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        f1=float(f1.mean()),
        accuracy=float(tp.sum() / total),
        balanced_accuracy=float(rec.mean()),
        per_class_precision=prec.tolist(),
        per_class_recall=rec.tolist(),
        undefined_precision=(predicted == 0).tolist(),
        undefined_recall=(actual == 0).tolist(),
    )


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    # Boundaries of runs of equal values.
    starts = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1])))
    ends = np.concatenate((starts[1:], [len(x)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative samples")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fold_report(labels, probs) -> FoldReport:
    """Metrics for one fold from true labels and class-probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[1]
    report = metrics(confusion(np.argmax(probs, axis=1), labels, n))
    if n == 2 and 0 < labels.sum() < labels.size:
        report.auc = roc_auc(probs[:, 1], labels == 1)
    elif n > 2:
        present = [c for c in range(n) if 0 < np.sum(labels == c) < labels.size]
        if present:
            report.auc = float(np.mean([roc_auc(probs[:, c], labels == c) for c in present]))
    return report


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]

    def to_json(self) -> dict:
        return {m: {"mean": self.mean[m], "std": self.std[m]} for m in self.mean}


def aggregate(folds) -> AggregateReport:
    """Arithmetic mean and sample standard deviation (ddof=1) per metric.

    ``statistics`` evaluates both exactly before rounding, so identical folds
    give a std of exactly 0.
    """
    folds = list(folds)
    if len(folds) < 2:
        raise ValueError("aggregation needs at least 2 folds")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(f, name) for f in folds]
        if any(v is None for v in vals):
            continue
        vals = [float(v) for v in vals]
        mean[name] = statistics.mean(vals)
        std[name] = statistics.stdev(vals)
    return AggregateReport(mean, std)


def report_json(folds) -> dict:
    folds = list(folds)
    return {"folds": [f.to_json() for f in folds], "aggregate": aggregate(folds).to_json()}


def format_table(folds) -> str:
    """Plain-text per-fold table with a Mean±Std footer."""
    folds = list(folds)
    cols = ("precision", "recall", "f1", "accuracy", "auc")
    lines = ["Fold    " + "  ".join(f"{c:>15}" for c in cols)]
    for i, f in enumerate(folds, 1):
        cells = [f"{getattr(f, c):15.4f}" if getattr(f, c) is not None else f"{'-':>15}" for c in cols]
        lines.append(f"Fold {i:<3}" + "  ".join(cells))
    agg = aggregate(folds)
    cells = [f"{agg.mean[c]:.4f}±{agg.std[c]:.4f}".rjust(15) if c in agg.mean else f"{'-':>15}"
             for c in cols]
    lines.append("Mean±Std" + "  ".join(cells))
    return "\n".join(lines)
