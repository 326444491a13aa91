"""Distribution-matching metrics for sets of binary segmentations.

The distance between two masks is ``1 - IoU`` (two empty masks are at
distance 0). The generalized energy distance between a set of predicted
masks S and rater masks Y is reported in squared form:

    GED² = 2·E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')]

with the cross expectation over all (prediction, label) pairs and the
diversity expectations over ordered pairs of distinct indices.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.stats import norm


def _flat(masks) -> np.ndarray:
    arr = np.asarray(masks)
    return arr.reshape(arr.shape[0], -1).astype(bool)


def iou(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def distance(a, b) -> float:
    return 1.0 - iou(a, b)


def pairwise_distances(A, B) -> np.ndarray:
    """``1 - IoU`` for every pair of rows of two stacks of masks."""
    fa, fb = _flat(A), _flat(B)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"pairwise_distances: masks of different sizes ({fa.shape[1]} vs {fb.shape[1]} pixels)")
    inter = fa.astype(np.int64) @ fb.astype(np.int64).T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return 1.0 - out


def _offdiag_mean(D: np.ndarray) -> float:
    n = D.shape[0]
    if n < 2:
        return 0.0
    return float((D.sum() - np.trace(D)) / (n * (n - 1)))


@dataclass(frozen=True)
class GedReport:
    ged2: float
    cross: float  # 2·E[d(S, Y)]
    pred_diversity: float
    label_diversity: float
    n_pred: int
    n_label: int

    def as_dict(self) -> dict:
        return asdict(self)


def ged(pred_samples, label_masks, paired: bool = False) -> GedReport:
    """Monte-Carlo GED² with exhaustive pair means.

    ``paired=True`` declares the two sets to be the same draws (index i of
    both is one sample), so coincident pairs are left out of the cross term
    as they are from the diversity terms. A set scored against itself then
    gives exactly 0.
    """
    preds, labels = np.asarray(pred_samples), np.asarray(label_masks)
    if preds.shape[0] < 2:
        raise ValueError("ged: at least two prediction samples are needed for the diversity term")
    if labels.shape[0] < 1:
        raise ValueError("ged: at least one label mask is needed")
    if preds.shape[1:] != labels.shape[1:]:
        raise ValueError(f"ged: prediction shape {preds.shape[1:]} != label shape {labels.shape[1:]}")
    D = pairwise_distances(preds, labels)
    if paired:
        if preds.shape[0] != labels.shape[0]:
            raise ValueError("ged: paired sets must have equal size")
        cross = 2.0 * _offdiag_mean(D)
    else:
        cross = 2.0 * float(D.mean())
    ds = _offdiag_mean(pairwise_distances(preds, preds))
    dy = _offdiag_mean(pairwise_distances(labels, labels))
    return GedReport(cross - ds - dy, cross, ds, dy, preds.shape[0], labels.shape[0])


def cross_term(pred_samples, label_masks) -> float:
    """``2·E[d(S, Y)]``; defined for a single deterministic prediction too."""
    preds, labels = np.asarray(pred_samples), np.asarray(label_masks)
    if preds.ndim == labels.ndim - 1:
        preds = preds[None]
    return 2.0 * float(pairwise_distances(preds, labels).mean())


def label_diversity(label_masks) -> float:
    return _offdiag_mean(pairwise_distances(label_masks, label_masks))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"count": int(v.size), "mean": float(v.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3)}


def aggregate(values: Sequence[float], groups: Sequence[Hashable] | None = None,
              all_groups: Sequence[Hashable] | None = None) -> dict:
    """Median, quartiles, mean and count per group (single group ``"all"`` when ungrouped).

    Groups listed in ``all_groups`` that have no members are omitted with a warning.
    """
    values = list(values)
    if not values:
        raise ValueError("aggregate: no values")
    if groups is None:
        return {"all": summarize(values)}
    if len(groups) != len(values):
        raise ValueError("aggregate: groups and values differ in length")
    buckets: dict = {}
    for g, v in zip(groups, values):
        buckets.setdefault(g, []).append(v)
    for g in all_groups or ():
        if g not in buckets:
            warnings.warn(f"aggregate: group {g!r} is empty and was omitted", stacklevel=2)
    return {g: summarize(buckets[g]) for g in sorted(buckets, key=str)}


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

@dataclass
class PairedMetricSeries:
    ids: list
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.shape != self.b.shape or self.a.ndim != 1 or self.a.size < 1:
            raise ValueError(f"PairedMetricSeries: need equal-length non-empty series, got {self.a.shape} and {self.b.shape}")
        if len(self.ids) != self.a.size:
            raise ValueError("PairedMetricSeries: ids do not match series length")

    @classmethod
    def align(cls, a: Mapping, b: Mapping) -> "PairedMetricSeries":
        """Pair two id->value maps; their id sets must match exactly."""
        if set(a) != set(b):
            missing = sorted(set(a) ^ set(b), key=str)[:5]
            raise ValueError(f"PairedMetricSeries: sample ids differ (e.g. {missing})")
        ids = sorted(a, key=str)
        return cls(ids, [a[i] for i in ids], [b[i] for i in ids])


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


EXACT_MAX_N = 12


def rank_average(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties receiving the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of 2·W+ (subset-sum DP)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(series: PairedMetricSeries | tuple, y=None) -> WilcoxonResult:
    """Two-sided signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes share average ranks. The
    null distribution is enumerated exactly for up to 12 non-zero pairs; above
    that a normal approximation with tie and continuity corrections is used.
    The reported statistic is ``min(W+, W-)``.
    """
    if y is not None:
        x = np.asarray(series, dtype=float)
        y = np.asarray(y, dtype=float)
    elif isinstance(series, PairedMetricSeries):
        x, y = series.a, series.b
    else:
        x, y = (np.asarray(s, dtype=float) for s in series)
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < 5:
        raise ValueError(f"wilcoxon_signed_rank: need at least 5 non-zero differences, got {n}")
    # float noise in differences must not break ties
    mags = np.round(np.abs(d), 12)
    ranks = rank_average(mags)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        counts = _exact_counts(2 * ranks)
        obs = int(round(2 * w_plus))
        total = counts.sum()
        lower = counts[:obs + 1].sum() / total
        upper = counts[obs:].sum() / total
        return WilcoxonResult(stat, float(min(1.0, 2.0 * min(lower, upper))), n, "exact")
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(mags, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    dev = max(abs(w_plus - mu) - 0.5, 0.0)
    p = 2.0 * norm.sf(dev / math.sqrt(var)) if var > 0 else 1.0
    return WilcoxonResult(stat, float(min(1.0, p)), n, "normal")
