"""Set-overlap metrics for comparing a produced bundle with a target."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .data import Bundle


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
        }


def bundle_metrics(predicted: Iterable[int] | Bundle, target: Bundle) -> MetricReport:
    """Precision/recall/F1 plus Jaccard accuracy between item sets.

    Empty prediction yields precision 0 by convention; empty intersection
    yields F1 0 rather than a 0/0 division.
    """
    pred = frozenset(predicted.items if isinstance(predicted, Bundle) else predicted)
    truth = target.items
    hit = len(pred & truth)
    precision = hit / len(pred) if pred else 0.0
    recall = hit / len(truth)
    f1 = 2 * precision * recall / (precision + recall) if hit else 0.0
    union = len(pred | truth)
    accuracy = hit / union if union else 0.0
    return MetricReport(precision=precision, recall=recall, f1=f1, accuracy=accuracy)
