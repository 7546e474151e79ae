"""Precision-recall curve with step-wise (average precision) area."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "recall", "precision"])
            # first row is the (recall 0, precision 1) anchor and has no threshold
            w.writerow(["", repr(float(self.recall[0])), repr(float(self.precision[0]))])
            for t, r, p in zip(self.thresholds, self.recall[1:], self.precision[1:]):
                w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def pr_curve(scores, labels) -> PrCurve:
    """PR points at every distinct score, tied scores forming one block.

    The area is sum_k (R_k - R_{k-1}) * P_k over blocks in descending score
    order, with no interpolation between points.  The returned point list
    starts at the conventional (recall 0, precision 1) anchor.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("undefined recall: no positive labels")
    if np.any(np.isnan(scores)):
        raise ValueError("scores contain NaN")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp_cum = np.cumsum(labels[order])
    block_end = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp_cum[block_end]
    predicted = block_end + 1
    precision = tp / predicted
    recall = tp / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    auc = math.fsum((recall - prev_recall) * precision)
    return PrCurve(np.r_[0.0, recall], np.r_[1.0, precision], s[block_end], auc)
