"""Micro-F1 scoring, the lower-triangular performance matrix, and the
average-performance / average-forgetting summaries.

Entry (i, j) of the matrix is the score on task i's test set using the
model checkpointed right after task j, for i <= j; the strictly upper
region stays zero.  Reports index tasks from 1.
"""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    """Invalid metric input (empty scoring set, partial matrix, ...)."""


def micro_f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2*TP / (2*TP + FP + FN) on globally aggregated counts."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        raise MetricError("micro-F1 undefined: no counts")
    return 2.0 * tp / denom


def micro_f1(predictions, labels) -> float:
    """Micro-averaged F1 over per-class TP/FP/FN counts.

    For single-label multiclass predictions this equals plain accuracy;
    the count-based route keeps the definition explicit.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise MetricError("predictions and labels must be equal-length vectors")
    if predictions.size == 0:
        raise MetricError("micro-F1 over an empty example set")
    classes = np.union1d(predictions, labels)
    tp = fp = fn = 0
    for c in classes:
        pred_c = predictions == c
        true_c = labels == c
        tp += int(np.sum(pred_c & true_c))
        fp += int(np.sum(pred_c & ~true_c))
        fn += int(np.sum(~pred_c & true_c))
    return micro_f1_from_counts(tp, fp, fn)


class PerformanceMatrix:
    """k x k record of task-i scores after training through task j (i <= j)."""

    def __init__(self, task_count: int):
        if task_count < 1:
            raise MetricError("task_count must be >= 1")
        self.task_count = task_count
        self.values = np.zeros((task_count, task_count), dtype=np.float64)
        self.filled = np.zeros((task_count, task_count), dtype=bool)

    def fill_entry(self, i: int, j: int, score: float) -> None:
        """Record score on task i after training task j (0-based, i <= j)."""
        k = self.task_count
        if not (0 <= i < k and 0 <= j < k):
            raise MetricError(f"entry ({i}, {j}) outside 0..{k - 1}")
        if i > j:
            raise MetricError(
                f"entry ({i}, {j}) lies above the diagonal; scores exist only "
                "for tasks already trained"
            )
        score = float(score)
        if not 0.0 <= score <= 1.0:
            raise MetricError(f"score must lie in [0, 1], got {score}")
        self.values[i, j] = score
        self.filled[i, j] = True

    def is_complete(self) -> bool:
        expected = np.tril(np.ones_like(self.filled)).T.astype(bool)
        return bool(np.all(self.filled[expected]))

    def _require_complete(self):
        for j in range(self.task_count):
            for i in range(j + 1):
                if not self.filled[i, j]:
                    raise MetricError(
                        f"performance matrix entry ({i}, {j}) not filled"
                    )

    def compute_ap(self) -> float:
        """Average performance: mean of the final column over all tasks."""
        self._require_complete()
        k = self.task_count
        return float(self.values[:, k - 1].sum() / k)

    def compute_af(self) -> float:
        """Average forgetting: mean of diagonal minus final-column scores.

        Negative values indicate backward transfer and are reported as-is.
        """
        self._require_complete()
        k = self.task_count
        if k == 1:
            raise MetricError("average forgetting undefined for a single task")
        diag = np.diag(self.values)[: k - 1]
        final = self.values[: k - 1, k - 1]
        return float((diag - final).sum() / (k - 1))

    def to_lists(self) -> list[list[float]]:
        return [[float(v) for v in row] for row in self.values]

    def heatmap_rows(self):
        """(i, j, value) triples with 1-based indices, row-major order."""
        rows = []
        for i in range(self.task_count):
            for j in range(i, self.task_count):
                rows.append((i + 1, j + 1, float(self.values[i, j])))
        return rows


def final_performance(predictions, labels) -> float:
    """Micro-F1 of the final model over the pooled test sets of all tasks."""
    return micro_f1(predictions, labels)
