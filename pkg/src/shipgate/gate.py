"""Binary gate decisions, confusion metrics and threshold sweeps.

A sample is flagged when ``score >= threshold``. Precision with no flagged
samples is defined as 1.0 so the precision/recall curve is total.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError


@dataclass(frozen=True)
class GateResult:
    image_id: str
    score: float
    threshold: float

    @property
    def decision(self) -> bool:
        return self.score >= self.threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def flagged(self) -> int:
        return self.tp + self.fp

    @property
    def recall(self) -> float:
        positives = self.tp + self.fn
        return self.tp / positives if positives else 0.0

    @property
    def precision(self) -> float:
        return self.tp / self.flagged if self.flagged else 1.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise InvalidInputError("no samples to evaluate")
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidInputError("labels must be 0 or 1")
    if not np.all((scores >= 0) & (scores <= 1)):
        raise InvalidInputError("scores must lie in [0, 1]")
    return scores, labels.astype(bool)


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    scores, labels = _validate(scores, labels)
    flagged = scores >= threshold
    return ConfusionCounts(
        tp=int(np.sum(flagged & labels)),
        fp=int(np.sum(flagged & ~labels)),
        tn=int(np.sum(~flagged & ~labels)),
        fn=int(np.sum(~flagged & labels)),
    )


def classify_metrics(scores, labels, threshold: float = 0.5) -> dict:
    counts = confusion(scores, labels, threshold)
    return {
        "threshold": float(threshold),
        "accuracy": counts.accuracy,
        "recall": counts.recall,
        "precision": counts.precision,
        "counts": counts,
    }


def sweep_thresholds(scores, labels) -> list[tuple[float, float, float]]:
    """``(threshold, recall, precision)`` at every distinct score plus 0 and 1, ascending.

    Counts at each threshold come from a sorted cumulative pass: the samples
    flagged at threshold ``t`` are exactly those with ``score >= t``.
    """
    scores, labels = _validate(scores, labels)
    thresholds = np.union1d(scores, [0.0, 1.0])
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    pos_sorted = labels[order].astype(np.int64)
    # suffix sums: positives/total with score >= threshold
    pos_suffix = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    start = np.searchsorted(s_sorted, thresholds, side="left")
    tp = pos_suffix[start]
    flagged = scores.size - start
    n_pos = int(labels.sum())
    recall = tp / n_pos if n_pos else np.zeros_like(tp, dtype=np.float64)
    precision = np.where(flagged > 0, tp / np.maximum(flagged, 1), 1.0)
    return [(float(t), float(r), float(p)) for t, r, p in zip(thresholds, recall, precision)]


def sweep_to_csv(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "recall", "precision"])
    for t, r, p in curve:
        writer.writerow([repr(t), repr(r), repr(p)])
    return buf.getvalue()


def gate_results(image_ids, scores, threshold: float) -> list[GateResult]:
    return [GateResult(str(i), float(s), float(threshold)) for i, s in zip(image_ids, scores)]


def flagged_fraction(n_total: int, prevalence: float, recall: float, precision: float) -> tuple[int, float]:
    """Expected number and share of images the gate passes downstream.

    ``count = round(n_total * prevalence * recall / precision)``: true positives
    are ``prevalence * recall`` of the set and make up ``precision`` of the
    flagged images.
    """
    if n_total <= 0:
        raise InvalidInputError("n_total must be positive")
    if precision == 0:
        raise InvalidInputError("precision must be non-zero")
    for name, value in (("prevalence", prevalence), ("recall", recall), ("precision", precision)):
        if not 0 < value <= 1:
            raise InvalidInputError(f"{name} must lie in (0, 1], got {value}")
    count = int(np.rint(n_total * prevalence * recall / precision))
    return count, count / n_total
