"""Multi-label classification metrics: macro AUC, macro F1 and Hamming loss.

Conventions:

* AUC is the Mann-Whitney statistic (ties earn half credit), computed from
  average ranks. A class without both positives and negatives is excluded
  from the macro mean and listed in ``excluded_classes``.
* Predictions are positive when ``score >= threshold`` (default 0.5).
* F1 of a class with no positive labels and no positive predictions is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from hetdistill.errors import DimensionError, InputError


@dataclass
class MetricsReport:
    macro_auc: float
    macro_f1: float
    hamming_loss: float
    per_class_auc: list
    per_class_f1: list
    excluded_classes: list = field(default_factory=list)
    seed: int | None = None
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "macro_auc": self.macro_auc,
            "macro_f1": self.macro_f1,
            "hamming_loss": self.hamming_loss,
            "per_class_auc": list(self.per_class_auc),
            "per_class_f1": list(self.per_class_f1),
            "excluded_classes": list(self.excluded_classes),
            "seed": self.seed,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def binary_auc(labels, scores) -> float:
    """ROC-AUC of one class; NaN when only one label value is present."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_f1(labels, predicted) -> float:
    y = np.asarray(labels).astype(bool)
    p = np.asarray(predicted).astype(bool)
    tp = int((y & p).sum())
    fp = int((~y & p).sum())
    fn = int((y & ~p).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def hamming_loss(labels, predicted) -> float:
    y = np.asarray(labels).astype(bool)
    p = np.asarray(predicted).astype(bool)
    return float((y != p).mean())


def multilabel_report(labels, scores, threshold: float = 0.5, seed=None) -> MetricsReport:
    """Metrics for ``(N, K)`` 0/1 labels against ``(N, K)`` probability scores."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 2:
        raise DimensionError(f"labels {y.shape} and scores {s.shape} must be equal (N, K) arrays")
    if y.shape[0] == 0:
        raise InputError("empty evaluation set")
    predicted = s >= threshold
    aucs = [binary_auc(y[:, k], s[:, k]) for k in range(y.shape[1])]
    f1s = [binary_f1(y[:, k], predicted[:, k]) for k in range(y.shape[1])]
    excluded = [k for k, a in enumerate(aucs) if np.isnan(a)]
    kept = [a for a in aucs if not np.isnan(a)]
    return MetricsReport(
        macro_auc=float(np.mean(kept)) if kept else float("nan"),
        macro_f1=float(np.mean(f1s)),
        hamming_loss=hamming_loss(y, predicted),
        per_class_auc=[None if np.isnan(a) else a for a in aucs],
        per_class_f1=f1s,
        excluded_classes=excluded,
        seed=seed,
        n_samples=int(y.shape[0]),
    )
