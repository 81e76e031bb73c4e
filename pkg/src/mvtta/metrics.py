"""Accuracy, macro-F1 and macro one-vs-rest AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


@dataclass
class MetricsReport:
    acc: float
    macro_f1: float
    macro_auc: float
    granularity: str
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check(preds, labels):
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise MetricError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise MetricError("no items to score")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float((preds == labels).mean())


def macro_f1(preds, labels, n_classes: int) -> float:
    """Classes absent from both predictions and labels score F1 = 0."""
    preds, labels = _check(preds, labels)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        if tp > 0:
            f1[c] = 2 * tp / (2 * tp + fp + fn)
    return float(f1.mean())


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(probs, labels, n_classes: int) -> float:
    """One-vs-rest AUC averaged over classes that have positives and negatives."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or probs.shape[1] != n_classes:
        raise MetricError("probs must be (N, C) aligned with labels")
    aucs = []
    for c in range(n_classes):
        pos = labels == c
        if pos.any() and not pos.all():
            aucs.append(binary_auc(probs[:, c], pos))
    if not aucs:
        raise MetricError("no class has both positive and negative examples")
    return float(np.mean(aucs))


def report(probs, labels, n_classes: int, granularity: str) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.shape[0] == 0:
        raise MetricError("no items to score")
    preds = np.argmax(probs, axis=1)
    return MetricsReport(
        acc=accuracy(preds, labels),
        macro_f1=macro_f1(preds, labels, n_classes),
        macro_auc=macro_auc(probs, labels, n_classes),
        granularity=granularity,
        n=int(labels.size),
    )


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Plain-text table with one column per run and AUC/ACC/F1 rows, in percent."""
    names = list(rows)
    width = max([8] + [len(n) for n in names])
    lines = ["".ljust(6) + "".join(n.rjust(width + 2) for n in names)]
    for label, attr in (("AUC", "macro_auc"), ("ACC", "acc"), ("F1", "macro_f1")):
        cells = "".join(f"{100 * getattr(rows[n], attr):.1f}".rjust(width + 2) for n in names)
        lines.append(label.ljust(6) + cells)
    return "\n".join(lines) + "\n"
