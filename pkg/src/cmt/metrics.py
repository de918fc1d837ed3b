"""Confusion matrix, macro precision/recall/F1, and model evaluation.

Zero-division convention: a class never predicted (precision) or never
present (recall) scores 0 for that rate and the class is flagged in the
report rather than dropped or NaN-ed. Macro averages are unweighted class
means; per-class F1 is the harmonic mean of that class's precision and
recall, and macro F1 averages those per-class values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EvaluationError, InputError
from .fusion import CmtModel, cross_entropy


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    flagged: bool  # a zero-division rule was applied


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    mean_cross_entropy: float
    per_class: list[ClassMetrics]
    total: int

    def text(self, labels: Sequence[str] | None = None) -> str:
        lines = [
            f"samples: {self.total}",
            f"accuracy: {self.accuracy:.4f}",
            f"macro precision: {self.macro_precision:.4f}",
            f"macro recall: {self.macro_recall:.4f}",
            f"macro F1: {self.macro_f1:.4f}",
            f"mean cross-entropy: {self.mean_cross_entropy:.4f}",
        ]
        for i, cm in enumerate(self.per_class):
            name = labels[i] if labels else f"class {i}"
            flag = " [zero-division]" if cm.flagged else ""
            lines.append(
                f"  {name}: P={cm.precision:.4f} R={cm.recall:.4f} "
                f"F1={cm.f1:.4f} n={cm.support}{flag}"
            )
        return "\n".join(lines)

    def csv_row(self, model_name: str, latency_ms: float | None = None) -> str:
        """One row shaped like the summary table: model name, accuracy, F1,
        precision, recall, cross-entropy loss, average response latency."""
        latency = f"{latency_ms:.1f}" if latency_ms is not None else ""
        return (
            f"{model_name},{self.accuracy:.4f},{self.macro_f1:.4f},"
            f"{self.macro_precision:.4f},{self.macro_recall:.4f},"
            f"{self.mean_cross_entropy:.4f},{latency}"
        )


CSV_HEADER = "model,accuracy,f1,precision,recall,cross_entropy,avg_latency_ms"


def confusion(true_labels: Sequence[int], pred_labels: Sequence[int],
              num_classes: int) -> np.ndarray:
    """counts[true][pred], integer matrix."""
    if len(true_labels) != len(pred_labels):
        raise InputError(
            f"{len(true_labels)} true labels vs {len(pred_labels)} predictions"
        )
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise InputError(f"label pair ({t}, {p}) outside {num_classes} classes")
        cm[t, p] += 1
    return cm


def metrics(cm: np.ndarray, losses: Sequence[float] = ()) -> MetricReport:
    total = int(cm.sum())
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    c = cm.shape[0]
    per_class: list[ClassMetrics] = []
    for k in range(c):
        tp = int(cm[k, k])
        predicted = int(cm[:, k].sum())
        present = int(cm[k, :].sum())
        flagged = predicted == 0 or present == 0
        precision = tp / predicted if predicted else 0.0
        recall = tp / present if present else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class.append(ClassMetrics(precision, recall, f1, present, flagged))
    return MetricReport(
        accuracy=float(np.trace(cm)) / total,
        macro_precision=sum(m.precision for m in per_class) / c,
        macro_recall=sum(m.recall for m in per_class) / c,
        macro_f1=sum(m.f1 for m in per_class) / c,
        mean_cross_entropy=float(np.mean(losses)) if len(losses) else 0.0,
        per_class=per_class,
        total=total,
    )


def evaluate(model: CmtModel, samples) -> tuple[MetricReport, list[int]]:
    """Inference-mode forward per sample; returns (report, predictions).

    Samples are processed in ascending id order so reports are deterministic
    regardless of input ordering.
    """
    if not samples:
        raise EvaluationError("cannot evaluate an empty dataset")
    ordered = sorted(samples, key=lambda s: s.id)
    trues, preds, losses = [], [], []
    by_input_order = {}
    for s in ordered:
        try:
            dist = model.forward(s.visual, s.audio, s.text)
        except Exception as e:
            raise EvaluationError(f"evaluation failed on sample {s.id}: {e}") from e
        trues.append(s.label)
        preds.append(dist.argmax)
        losses.append(cross_entropy(dist, s.label).item())
        by_input_order[s.id] = dist.argmax
    cm = confusion(trues, preds, model.cfg.num_classes)
    report = metrics(cm, losses)
    return report, [by_input_order[s.id] for s in samples]
