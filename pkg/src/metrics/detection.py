"""Confusion matrices and macro-averaged detection scores."""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from ..faults.injector import FaultLabel

CLASS_KEYS = tuple(lbl.key for lbl in FaultLabel)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (len(CLASS_KEYS), len(CLASS_KEYS)):
            raise ValueError(f"confusion matrix must be {len(CLASS_KEYS)}x{len(CLASS_KEYS)}, "
                             f"got {counts.shape}")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("confusion counts must be non-negative integers")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        """Rows are true labels, columns predictions."""
        return cls(confusion_matrix(np.asarray(y_true, dtype=np.int64),
                                    np.asarray(y_pred, dtype=np.int64),
                                    labels=list(range(len(CLASS_KEYS)))))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=pd.Index(CLASS_KEYS, name="true"),
                            columns=list(CLASS_KEYS))


@dataclass
class DetectionScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def to_dict(self) -> dict:
        out = {k: {"precision": float(self.precision[i]), "recall": float(self.recall[i]),
                   "f1": float(self.f1[i]), "support": int(self.support[i])}
               for i, k in enumerate(CLASS_KEYS)}
        out["macro"] = {"precision": self.macro_precision, "recall": self.macro_recall,
                        "f1": self.macro_f1, "support": int(self.support.sum())}
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = self.to_dict()
        return pd.DataFrame([{"class": k, **v} for k, v in rows.items()])


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(num.shape), where=den > 0)


def macro_scores(cm: ConfusionMatrix) -> DetectionScores:
    """Per-class precision/recall/F1; a class never predicted has precision 0."""
    if cm.total == 0:
        raise ValueError("confusion matrix is all zero")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    precision = _safe_ratio(tp, counts.sum(axis=0))
    recall = _safe_ratio(tp, counts.sum(axis=1))
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    return DetectionScores(precision, recall, f1, cm.counts.sum(axis=1))
