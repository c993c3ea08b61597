"""Evaluation statistics: confusion-matrix metrics, macro-AUC,
stratified percentile bootstrap and the Wilcoxon signed-rank test.

The bootstrap resamples the evaluation set with replacement while
preserving per-class counts; replicate i draws its indices from a seed
stream derived from (seed, i), so two models evaluated with the same
seed see the same replicate index streams and their per-replicate
metrics form valid Wilcoxon pairs. Wilcoxon p-values are exact (signed
rank-sum distribution) for n <= 25 and use a tie-corrected normal
approximation with continuity correction above that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class BootstrapConfig:
    n_replicates: int = 100
    ci_level: float = 0.95
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must be in (0, 1)")
        if self.n_replicates < 2:
            raise ValueError("n_replicates must be >= 2")


@dataclass
class MetricCI:
    point: float
    low: float
    high: float
    replicates: list[float]


@dataclass
class ComparisonResult:
    statistic: float     # W = min(W+, W-)
    p_value: float
    significant: bool


@dataclass
class EvalReport:
    name: str
    metrics: dict[str, MetricCI]
    n_samples: int
    n_positive: int
    bootstrap: BootstrapConfig
    comparison: ComparisonResult | None = None
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "n_samples": self.n_samples,
            "n_positive": self.n_positive,
            "bootstrap": {
                "n_replicates": self.bootstrap.n_replicates,
                "ci_level": self.bootstrap.ci_level,
                "alpha": self.bootstrap.alpha,
                "seed": self.bootstrap.seed,
                "ci_method": "percentile",
            },
            "metrics": {
                k: {"point": v.point, "ci_low": v.low, "ci_high": v.high,
                    "replicates": v.replicates}
                for k, v in self.metrics.items()
            },
            "notes": self.notes,
        }
        if self.comparison is not None:
            d["comparison"] = {
                "wilcoxon_w": self.comparison.statistic,
                "p_value": self.comparison.p_value,
                "significant": self.comparison.significant,
            }
        return d


# ---------------------------------------------------------------------------
# point metrics
# ---------------------------------------------------------------------------

def binary_metrics(predictions, labels) -> dict[str, float]:
    """Accuracy/precision/recall/F1 plus sensitivity/specificity.

    Positive class is the lesion (label 1). Zero-denominator cases return
    0.0 and set the ``degenerate`` flag.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise ValueError("binary_metrics: empty input")
    if predictions.shape != labels.shape:
        raise ValueError("binary_metrics: length mismatch")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary_metrics: labels must be in {0, 1}")

    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))

    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f1 = ratio(2 * precision * recall, precision + recall)
    specificity = ratio(tn, tn + fp)
    return {
        "accuracy": (tp + tn) / predictions.size,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "sensitivity": recall,
        "specificity": specificity,
        "degenerate": float(degenerate),
    }


def _auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest AUC via the rank (Mann-Whitney) statistic, ties = 0.5."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    # mid-ranks for ties
    i = 0
    r = np.empty(scores.size)
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        r[i : j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    ranks[order] = r
    n_pos, n_neg = pos.size, neg.size
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auc(scores, labels) -> float:
    """Mean of the two one-vs-rest AUCs; class 0 is scored by ``-s``.

    For complementary scores this equals the plain AUC exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("macro_auc: both classes must be present")
    auc_pos = _auc_rank(scores, labels)
    auc_neg = _auc_rank(-scores, 1 - labels)
    return 0.5 * (auc_pos + auc_neg)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def replicate_indices(labels: np.ndarray, seed: int, replicate: int) -> np.ndarray:
    """Index stream of one stratified resample; pure function of (seed, i)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(replicate,)))
    parts = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        parts.append(rng.choice(idx, size=idx.size, replace=True))
    return np.concatenate(parts)


def bootstrap_ci(metric_fn, scores, labels, config: BootstrapConfig) -> MetricCI:
    """Stratified percentile bootstrap of ``metric_fn(scores, labels)``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < 2:
        raise ValueError("bootstrap_ci: need at least 2 samples")
    point = float(metric_fn(scores, labels))
    reps = []
    for i in range(config.n_replicates):
        idx = replicate_indices(labels, config.seed, i)
        reps.append(float(metric_fn(scores[idx], labels[idx])))
    tail = (1.0 - config.ci_level) / 2.0
    low, high = np.percentile(reps, [100 * tail, 100 * (1 - tail)], method="linear")
    return MetricCI(point=point, low=float(low), high=float(high), replicates=reps)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_signed_rank_p(ranks: np.ndarray, w_obs: float) -> float:
    """Two-sided p for W = min(W+, W-) from the exact null distribution.

    Mid-ranks are doubled so all rank values are integers; the
    distribution of 2*W+ over the 2^n equiprobable sign assignments is
    built by dynamic programming (equivalent to full enumeration).
    """
    doubled = np.round(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = 0.5 * (dist + shifted)
    w2 = int(round(2 * w_obs))
    p = dist[: w2 + 1].sum() + dist[total - w2 :].sum()
    return float(min(1.0, p))


def _normal_approx_p(ranks: np.ndarray, w_obs: float) -> float:
    """Normal approximation with continuity correction; Var(W+) = sum(r^2)/4."""
    mean = ranks.sum() / 2.0
    sd = math.sqrt(np.sum(ranks**2) / 4.0)
    z = (w_obs - mean + 0.5) / sd
    return float(min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))))


def wilcoxon_signed_rank(a, b, exact_limit: int = 25) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test; returns (W, p).

    Zero differences are discarded, tied |differences| get mid-ranks and
    W = min(W+, W-). Needs at least 5 nonzero differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("wilcoxon_signed_rank: length mismatch")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("wilcoxon_signed_rank: degenerate comparison (all differences zero)")
    if d.size < 5:
        raise ValueError(f"wilcoxon_signed_rank: need >= 5 nonzero differences, got {d.size}")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if d.size <= exact_limit:
        p = _exact_signed_rank_p(ranks, w)
    else:
        p = _normal_approx_p(ranks, w)
    return w, p


def compare_models(replicates_a, replicates_b, config: BootstrapConfig) -> ComparisonResult:
    """Paired Wilcoxon over per-replicate metric values of two models."""
    a = np.asarray(replicates_a, dtype=np.float64)
    b = np.asarray(replicates_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("compare_models: replicate vectors must have equal length")
    w, p = wilcoxon_signed_rank(a, b)
    return ComparisonResult(statistic=w, p_value=p, significant=bool(p < config.alpha))
