"""Evaluation metrics: accuracy, macro F1, one-vs-rest AUC, and volume MAE.

Class indices follow the fixed order CN=0, MCI=1, AD=2.  AUC for a class
without both a positive and a negative example is undefined and reported as
None, never as a silent 0 or 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("CN", "MCI", "AD")
NUM_CLASSES = 3


def _validate_labels(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.intp)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-d sequence")
    if arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise ValueError(f"{what} contain a value outside 0..{NUM_CLASSES - 1}")
    return arr


def accuracy(preds, labels) -> float:
    p = _validate_labels(preds, "predictions")
    y = _validate_labels(labels, "labels")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float((p == y).mean())


def f1_macro(preds, labels) -> float:
    """Unweighted mean of per-class F1; an all-absent class contributes 0."""
    p = _validate_labels(preds, "predictions")
    y = _validate_labels(labels, "labels")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    scores = []
    for c in range(NUM_CLASSES):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores))


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney rank AUC with ties credited 0.5."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average 1-based rank
        i = j + 1
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_ovr(scores, labels) -> tuple[float | None, float | None, float | None]:
    """One-vs-rest AUC per class from an N x 3 score matrix, (CN, MCI, AD) order."""
    s = np.asarray(scores, dtype=np.float64)
    y = _validate_labels(labels, "labels")
    if s.ndim != 2 or s.shape != (y.size, NUM_CLASSES):
        raise ValueError(f"scores must be ({y.size}, {NUM_CLASSES}), got {s.shape}")
    return tuple(_binary_auc(s[:, c], y == c) for c in range(NUM_CLASSES))


def mae_volumes(pred, target) -> float:
    """Mean absolute voxel difference between two equally shaped volumes."""
    a = np.asarray(getattr(pred, "elements", pred), dtype=np.float64)
    b = np.asarray(getattr(target, "elements", target), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mae_volumes: shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


@dataclass
class EvalReport:
    """Classification and reconstruction metrics over one split."""

    accuracy: float
    f1_macro: float
    auc_cn: float | None
    auc_ad: float | None
    auc_mci: float | None
    mae: float | None                       # None when no paired volume was evaluated
    confusion: list[list[int]] = field(default_factory=lambda: [[0] * 3 for _ in range(3)])
    n_samples: int = 0
    n_paired: int = 0

    def _rows(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = [
            ("accuracy", self.accuracy),
            ("f1_macro", self.f1_macro),
            ("auc_cn", self.auc_cn),
            ("auc_ad", self.auc_ad),
            ("auc_mci", self.auc_mci),
            ("mae", self.mae),
            ("n_samples", self.n_samples),
            ("n_paired", self.n_paired),
        ]
        for i, true_name in enumerate(CLASS_NAMES):
            for j, pred_name in enumerate(CLASS_NAMES):
                rows.append((f"confusion_{true_name}_as_{pred_name}", self.confusion[i][j]))
        return rows

    def to_text(self) -> str:
        out = []
        for key, value in self._rows():
            out.append(f"{key} = {'undefined' if value is None else value!r}")
        return "\n".join(out) + "\n"

    def write(self, text_path, csv_path) -> None:
        with open(text_path, "w") as fh:
            fh.write(self.to_text())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in self._rows():
                writer.writerow([key, "" if value is None else value])


def evaluate_predictions(pred_labels, true_labels, probabilities,
                         volume_maes: list[float] | None = None) -> EvalReport:
    """Assemble an EvalReport from per-sample predictions."""
    p = _validate_labels(pred_labels, "predictions")
    y = _validate_labels(true_labels, "labels")
    aucs = auc_ovr(probabilities, y)
    confusion = [[0] * NUM_CLASSES for _ in range(NUM_CLASSES)]
    for yi, pi in zip(y, p):
        confusion[yi][pi] += 1
    maes = volume_maes or []
    return EvalReport(
        accuracy=accuracy(p, y),
        f1_macro=f1_macro(p, y),
        auc_cn=aucs[0],
        auc_mci=aucs[1],
        auc_ad=aucs[2],
        mae=float(np.mean(maes)) if maes else None,
        confusion=confusion,
        n_samples=int(y.size),
        n_paired=len(maes),
    )
