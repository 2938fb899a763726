"""Ranking metric and score normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class SingleClass(ValueError):
    pass


class DegenerateDenominator(ValueError):
    pass


class EmptyList(ValueError):
    pass


def auc(labels, scores) -> float:
    """Area under the ROC curve via mid-ranks (ties count one half)."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"labels {y.shape} and scores {s.shape} differ in shape")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def competition_score(auc_value: float, auc_base: float, auc_max: float) -> float:
    """Rescale an AUC so the baseline maps to 0 and the best entry to 1."""
    denom = auc_max - auc_base
    if denom == 0:
        raise DegenerateDenominator("auc_max equals auc_base")
    return (auc_value - auc_base) / denom


def average_score(scores: Sequence[float]) -> float:
    if len(scores) == 0:
        raise EmptyList("no scores to average")
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


@dataclass(frozen=True)
class EvaluationRecord:
    auc: float
    auc_base: float | None = None
    auc_max: float | None = None

    @property
    def score(self) -> float | None:
        if self.auc_base is None or self.auc_max is None:
            return None
        return competition_score(self.auc, self.auc_base, self.auc_max)

    def format(self) -> str:
        lines = [f"auc\t{self.auc:.6f}"]
        if self.score is not None:
            lines.append(f"score\t{self.score:.4f}")
        return "\n".join(lines)
