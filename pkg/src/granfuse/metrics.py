"""Evaluation metrics: confusion matrix, accuracy, per-class P/R/F1, macro-F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import POLARITIES


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class: dict  # polarity -> ClassScores
    confusion: list  # 3x3, rows = gold, cols = predicted
    total: int

    def format(self) -> str:
        lines = [
            f"instances {self.total}",
            f"accuracy  {self.accuracy:.4f}",
            f"macro-F1  {self.macro_f1:.4f}",
        ]
        for name in POLARITIES:
            s = self.per_class[name]
            lines.append(
                f"{name:9s} precision={s.precision:.4f} recall={s.recall:.4f} "
                f"f1={s.f1:.4f} support={s.support}"
            )
        header = "confusion (rows gold: " + " ".join(POLARITIES) + ")"
        lines.append(header)
        for row in self.confusion:
            lines.append("  " + " ".join(f"{int(v):4d}" for v in row))
        return "\n".join(lines)


def confusion_matrix(gold, pred) -> np.ndarray:
    """3x3 counts with gold labels on rows, class order positive/neutral/negative."""
    cm = np.zeros((3, 3), dtype=np.int64)
    for g, p in zip(gold, pred):
        cm[g, p] += 1
    return cm


def report_from_confusion(cm) -> EvalReport:
    """Metrics from a confusion matrix; a class with no support scores F1 = 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = float(np.trace(cm)) / total
    per_class = {}
    f1s = []
    for idx, name in enumerate(POLARITIES):
        tp = float(cm[idx, idx])
        fp = float(cm[:, idx].sum() - cm[idx, idx])
        fn = float(cm[idx, :].sum() - cm[idx, idx])
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[name] = ClassScores(
            precision=precision, recall=recall, f1=f1, support=int(cm[idx, :].sum())
        )
        f1s.append(f1)
    return EvalReport(
        accuracy=accuracy,
        macro_f1=float(np.mean(f1s)),
        per_class=per_class,
        confusion=cm.tolist(),
        total=total,
    )


def report_from_predictions(gold, pred) -> EvalReport:
    return report_from_confusion(confusion_matrix(gold, pred))
