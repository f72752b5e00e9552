"""Confusion matrices and the classification scores reported per classifier."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError


def confusion_matrix(y_true, y_pred, C: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"y_true has {y_true.size} items but y_pred has {y_pred.size}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= C):
            raise ValidationError(f"{name} contains labels outside [0, {C})")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise UndefinedMetricError("kappa of an empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / total ** 2
    if p_e >= 1.0:
        raise UndefinedMetricError("kappa undefined: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def per_class_and_overall(cm):
    """Per-class recall, overall accuracy, macro F1 and a per-class 'recall undefined' flag."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    undefined = rows == 0
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    precision = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    return recall, float(np.trace(cm) / total), float(f1.mean()), undefined


def pairwise_auc(scores_i, scores_j) -> float:
    """P(random class-i item outranks random class-j item) with ties as 1/2."""
    n_i, n_j = len(scores_i), len(scores_j)
    ranks = rankdata(np.concatenate([scores_i, scores_j]))
    return float((ranks[:n_i].sum() - n_i * (n_i + 1) / 2) / (n_i * n_j))


def hand_till_auc(probs, labels) -> float:
    """Average over present class pairs of the symmetrized one-vs-one AUC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise UndefinedMetricError(f"Hand-Till AUC needs >= 2 classes present, got {present.tolist()}")
    total = 0.0
    for a, i in enumerate(present):
        for j in present[a + 1:]:
            mi, mj = labels == i, labels == j
            a_ij = pairwise_auc(probs[mi, i], probs[mj, i])
            a_ji = pairwise_auc(probs[mj, j], probs[mi, j])
            total += (a_ij + a_ji) / 2
    c = present.size
    return float(2.0 * total / (c * (c - 1)))


def roc_points(scores, positives):
    """One-vs-rest ROC curve: (fpr, tpr, threshold) rows, thresholds descending."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    P, N = positives.sum(), (~positives).sum()
    rows = [(0.0, 0.0, float("inf"))]
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        tpr = (hit & positives).sum() / P if P else 0.0
        fpr = (hit & ~positives).sum() / N if N else 0.0
        rows.append((float(fpr), float(tpr), float(t)))
    return rows


@dataclass
class MetricsReport:
    per_class_accuracy: list
    overall_accuracy: float
    kappa: float
    macro_f1: float
    auc_hand_till: float
    n_items: int
    confusion: list = field(default_factory=list)
    undefined_classes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(**d)


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return float("nan")


def report_from_predictions(y_true, y_pred, probs, C: int) -> MetricsReport:
    cm = confusion_matrix(y_true, y_pred, C)
    return report_from_confusion(cm, probs, y_true)


def report_from_confusion(cm, probs=None, y_true=None) -> MetricsReport:
    recall, acc, f1, undefined = per_class_and_overall(cm)
    auc = _maybe(hand_till_auc, probs, y_true) if probs is not None else float("nan")
    return MetricsReport(
        per_class_accuracy=[float(r) for r in recall],
        overall_accuracy=acc,
        kappa=_maybe(kappa, cm),
        macro_f1=f1,
        auc_hand_till=auc,
        n_items=int(np.asarray(cm).sum()),
        confusion=np.asarray(cm).astype(int).tolist(),
        undefined_classes=[int(c) for c in np.nonzero(undefined)[0]],
    )


def confusion_to_csv(cm) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    C = len(cm)
    w.writerow(["true\\pred"] + [f"class_{c}" for c in range(C)])
    for c, row in enumerate(cm):
        w.writerow([f"class_{c}"] + [int(v) for v in row])
    return buf.getvalue()


def confusion_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)


@dataclass
class ScoredItems:
    """Item-level predictions from one evaluation run."""

    ids: list
    y_true: np.ndarray
    y_pred: np.ndarray
    probs: np.ndarray

    def report(self, C: int) -> MetricsReport:
        return report_from_predictions(self.y_true, self.y_pred, self.probs, C)


def aggregate_runs(runs: Sequence[ScoredItems], mode: str, C: int) -> MetricsReport:
    """``mean_over_runs`` averages the per-run scalars; ``pooled`` rescores the union.

    In mean mode a class's accuracy is averaged only over runs where the class
    occurs, and NaN scalars (undefined kappa/AUC) are skipped.
    """
    if not runs:
        raise ValidationError("aggregate_runs needs at least one run")
    if mode == "pooled":
        ids = [i for r in runs for i in r.ids]
        if len(set(ids)) != len(ids):
            raise ValidationError("pooled aggregation found an item scored in more than one run")
        return report_from_predictions(
            np.concatenate([r.y_true for r in runs]),
            np.concatenate([r.y_pred for r in runs]),
            np.concatenate([r.probs for r in runs]), C)
    if mode != "mean_over_runs":
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    reports = [r.report(C) for r in runs]
    per_class = []
    for c in range(C):
        vals = [rep.per_class_accuracy[c] for rep in reports if c not in rep.undefined_classes]
        per_class.append(float(np.mean(vals)) if vals else 0.0)

    def mean(attr):
        vals = [getattr(rep, attr) for rep in reports]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    cm = np.sum([rep.confusion for rep in reports], axis=0)
    return MetricsReport(
        per_class_accuracy=per_class,
        overall_accuracy=mean("overall_accuracy"),
        kappa=mean("kappa"),
        macro_f1=mean("macro_f1"),
        auc_hand_till=mean("auc_hand_till"),
        n_items=int(sum(rep.n_items for rep in reports)),
        confusion=np.asarray(cm).astype(int).tolist(),
        undefined_classes=[c for c in range(C)
                           if all(c in rep.undefined_classes for rep in reports)],
    )
