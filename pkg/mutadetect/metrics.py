"""ROC, AUC and thresholded classification metrics.

Reports are phrased in terms of mutation detection: the positive class is a
mutated site, which is label 0 in the training convention. A sample is
predicted mutated when its anomaly score is strictly above the threshold.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from mutadetect.errors import ContractError, DataError, DimensionError
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()


def _as_arrays(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0 (mutated) or 1 (normal)")
    return s, y


@dataclass(frozen=True)
class RocCurve:
    """ROC points in descending threshold order, from (0, 0) to (1, 1).

    Row i counts every sample with score >= thresholds[i] as mutated; the
    first row (threshold +inf) predicts nothing.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> List[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def rows(self) -> List[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Sweep every distinct score, tied scores in one step; trapezoidal AUC.

    Raises:
        DataError: If only one class is present.
    """
    s, y = _as_arrays(scores, labels)
    positive = y == 0
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"AUC undefined with {n_pos} mutated and {n_neg} normal samples",
            hint="Both classes must be present",
        )
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], positive[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def mann_whitney_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Fraction of (mutated, normal) pairs ranked correctly, ties counted 1/2."""
    s, y = _as_arrays(scores, labels)
    positive = y == 0
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("Mann-Whitney AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        denominator = self.tp + self.fp
        return self.tp / denominator if denominator else 0.0

    @property
    def recall(self) -> float:
        denominator = self.tp + self.fn
        return self.tp / denominator if denominator else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float) -> Confusion:
    s, y = _as_arrays(scores, labels)
    predicted = s > threshold
    actual = y == 0
    return Confusion(
        tp=int((predicted & actual).sum()),
        fp=int((predicted & ~actual).sum()),
        tn=int((~predicted & ~actual).sum()),
        fn=int((~predicted & actual).sum()),
    )


class MetricsReport(BaseModel):
    """Metrics of one scored split at one threshold."""

    auc: Optional[float]
    auc_mann_whitney: Optional[float] = None
    f1: float
    precision: float
    recall: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def classify_report(
    scores: Sequence[float], labels: Sequence[int], threshold: float
) -> MetricsReport:
    """Confusion counts and P/R/F1 under "score > threshold means mutated".

    AUC is None when the split holds only one class. The rank-statistic AUC
    is reported next to the trapezoid one; the two agree up to rounding.
    """
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ContractError("classify_report needs at least one sample")
    counts = confusion(s, y, threshold)
    if counts.tp + counts.fp == 0:
        logger.warning("No predicted mutations, precision set to 0", threshold=threshold)
    auc: Optional[float] = None
    rank_auc: Optional[float] = None
    if 0 < counts.tp + counts.fn < s.size:
        auc = roc_auc(s, y).auc
        rank_auc = mann_whitney_auc(s, y)
    else:
        logger.warning("Single-class split, AUC undefined", samples=int(s.size))
    return MetricsReport(
        auc=auc,
        auc_mann_whitney=rank_auc,
        f1=counts.f1,
        precision=counts.precision,
        recall=counts.recall,
        threshold=threshold,
        tp=counts.tp,
        fp=counts.fp,
        tn=counts.tn,
        fn=counts.fn,
    )


@dataclass(frozen=True)
class SiteRow:
    position: int
    samples: int
    predicted: int
    actual: int
    precision: float
    recall: float


SITE_HEADER = ("position", "samples", "predicted_mutations", "actual_mutations", "precision", "recall")


def site_report(
    positions: Sequence[int],
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float,
) -> List[SiteRow]:
    """Per-position counts, most predicted mutations first (ties by position)."""
    s, y = _as_arrays(scores, labels)
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != s.shape:
        raise DimensionError(f"{pos.size} positions for {s.size} scores")
    by_site: Dict[int, np.ndarray] = {int(p): np.flatnonzero(pos == p) for p in np.unique(pos)}
    rows = []
    for position, idx in by_site.items():
        counts = confusion(s[idx], y[idx], threshold)
        rows.append(
            SiteRow(
                position=position,
                samples=int(idx.size),
                predicted=counts.tp + counts.fp,
                actual=counts.tp + counts.fn,
                precision=counts.precision,
                recall=counts.recall,
            )
        )
    rows.sort(key=lambda r: (-r.predicted, r.position))
    return rows
