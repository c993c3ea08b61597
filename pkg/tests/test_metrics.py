"""Tests for classification metrics, macro-AUC, bootstrap CIs, and Wilcoxon."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvood.metrics import (
    BootstrapConfig,
    bootstrap_ci,
    binary_metrics,
    compare_models,
    macro_auc,
    replicate_indices,
    wilcoxon_signed_rank,
)


# ---------------------------------------------------------------------------
# binary metrics
# ---------------------------------------------------------------------------

class TestBinaryMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 0, 1, 1])
        m = binary_metrics(labels, labels)
        for key in ("accuracy", "precision", "recall", "f1", "sensitivity", "specificity"):
            assert m[key] == 1.0
        assert m["degenerate"] == 0.0

    def test_hand_confusion_oracle(self):
        """TP=2, FP=1, FN=1, TN=6."""
        labels = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
        preds = np.array([1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
        m = binary_metrics(preds, labels)
        assert m["precision"] == pytest.approx(2 / 3)
        assert m["recall"] == pytest.approx(2 / 3)
        assert m["f1"] == pytest.approx(2 / 3)
        assert m["accuracy"] == pytest.approx(0.8)
        assert m["sensitivity"] == m["recall"]
        assert m["specificity"] == pytest.approx(6 / 7)

    def test_all_negative_predictions_flagged(self):
        labels = np.array([0, 1, 0, 1])
        preds = np.zeros(4, dtype=int)
        m = binary_metrics(preds, labels)
        assert m["recall"] == 0.0
        assert m["precision"] == 0.0
        assert m["degenerate"] == 1.0

    def test_empty_input_errors(self):
        with pytest.raises(ValueError, match="empty"):
            binary_metrics([], [])

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            binary_metrics([0, 1], [0, 2])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
    def test_accuracy_is_agreement_fraction(self, pairs):
        preds = np.array([p for p, _ in pairs])
        labels = np.array([l for _, l in pairs])
        m = binary_metrics(preds, labels)
        assert m["accuracy"] == pytest.approx(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# macro-AUC
# ---------------------------------------------------------------------------

def _pair_counting_auc(scores, labels):
    """Brute-force AUC: fraction of (pos, neg) pairs ranked pos > neg, ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _pair_counting_macro_auc(scores, labels):
    a = _pair_counting_auc(scores, labels)
    b = _pair_counting_auc(-np.asarray(scores, dtype=np.float64), 1 - np.asarray(labels))
    return 0.5 * (a + b)


class TestMacroAUC:
    def test_perfect_separation(self):
        assert macro_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_pair_counting_example(self):
        assert macro_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_all_ties_half(self):
        assert macro_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == pytest.approx(0.5)

    def test_single_class_errors(self):
        with pytest.raises(ValueError, match="both classes"):
            macro_auc([0.1, 0.2], [1, 1])

    def test_equals_plain_auc_for_complementary_scores(self):
        rng = np.random.default_rng(0)
        scores = rng.random(40)
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        assert abs(macro_auc(scores, labels) - _pair_counting_auc(scores, labels)) < 1e-12

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_pair_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 30))
        scores = np.round(rng.random(n), 2)  # rounding forces ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert macro_auc(scores, labels) == pytest.approx(
            _pair_counting_macro_auc(scores, labels), abs=1e-12
        )

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        base = macro_auc(scores, labels)
        assert macro_auc(np.exp(5 * scores), labels) == pytest.approx(base, abs=1e-12)
        assert macro_auc(scores**3 + 2, labels) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

class TestBootstrap:
    def test_constant_metric_collapses(self):
        ci = bootstrap_ci(lambda s, l: 0.42, np.zeros(10), np.array([0] * 5 + [1] * 5),
                          BootstrapConfig(seed=0))
        assert ci.low == ci.high == ci.point == 0.42

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(2)
        scores = rng.random(30)
        labels = np.array([0] * 20 + [1] * 10)
        a = bootstrap_ci(macro_auc, scores, labels, BootstrapConfig(seed=9))
        b = bootstrap_ci(macro_auc, scores, labels, BootstrapConfig(seed=9))
        assert a.replicates == b.replicates

    def test_stratified_replicates_preserve_class_counts(self):
        labels = np.array([0] * 13 + [1] * 7)
        for i in range(20):
            idx = replicate_indices(labels, seed=3, replicate=i)
            assert np.sum(labels[idx] == 0) == 13
            assert np.sum(labels[idx] == 1) == 7

    def test_matches_reference_reimplementation(self):
        """Independent percentile-bootstrap with the same seed stream."""
        rng = np.random.default_rng(4)
        scores = rng.random(40)
        labels = np.array([0] * 30 + [1] * 10)
        cfg = BootstrapConfig(n_replicates=100, seed=17)
        ci = bootstrap_ci(macro_auc, scores, labels, cfg)

        reps = []
        for i in range(100):
            r = np.random.default_rng(np.random.SeedSequence(entropy=17, spawn_key=(i,)))
            idx = np.concatenate([
                r.choice(np.flatnonzero(labels == 0), 30, replace=True),
                r.choice(np.flatnonzero(labels == 1), 10, replace=True),
            ])
            reps.append(macro_auc(scores[idx], labels[idx]))
        lo, hi = np.percentile(reps, [2.5, 97.5], method="linear")
        assert ci.replicates == pytest.approx(reps, abs=1e-15)
        assert ci.low == pytest.approx(lo) and ci.high == pytest.approx(hi)

    def test_ci_brackets_median_replicate(self):
        rng = np.random.default_rng(5)
        scores = rng.random(50)
        labels = np.array([0] * 40 + [1] * 10)
        ci = bootstrap_ci(macro_auc, scores, labels, BootstrapConfig(seed=1))
        med = np.median(ci.replicates)
        assert ci.low <= med <= ci.high

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BootstrapConfig(n_replicates=1)
        with pytest.raises(ValueError):
            BootstrapConfig(ci_level=1.5)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _enumerate_wilcoxon_p(d):
    """Exact two-sided p over all 2^n sign assignments (midranks on |d|)."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    w_obs = min(w_plus, w_minus)
    total = ranks.sum()
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        wp = sum(r for s, r in zip(signs, ranks) if s)
        if min(wp, total - wp) <= w_obs + 1e-12:
            count += 1
    return count / 2**n


class TestWilcoxon:
    def test_strictly_greater_n6(self):
        a = np.array([5.0, 6, 7, 8, 9, 10])
        b = a - 1.0
        w, p = wilcoxon_signed_rank(a, b)
        assert w == 0.0
        assert p == pytest.approx(2 / 64)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 11))
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        if not (a - b).any():
            a[0] += 1.0
        if np.count_nonzero(a - b) < 5:
            return
        _, p = wilcoxon_signed_rank(a, b)
        assert p == pytest.approx(_enumerate_wilcoxon_p(a - b), abs=1e-12)

    def test_degenerate_all_zero_errors(self):
        a = np.ones(6)
        with pytest.raises(ValueError, match="degenerate"):
            wilcoxon_signed_rank(a, a.copy())

    def test_too_few_nonzero_errors(self):
        a = np.array([1.0, 1, 1, 1, 1, 2])
        b = np.array([1.0, 1, 1, 1, 1, 1])
        with pytest.raises(ValueError, match=">= 5"):
            wilcoxon_signed_rank(a, b)

    def test_length_mismatch_errors(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.ones(5), np.ones(6))

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        wa, pa = wilcoxon_signed_rank(a, b)
        wb, pb = wilcoxon_signed_rank(b, a)
        assert wa == wb and pa == pb

    @pytest.mark.parametrize("seed", range(20))
    def test_exact_close_to_normal_at_n25(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=25)
        b = rng.normal(size=25)
        _, p_exact = wilcoxon_signed_rank(a, b, exact_limit=25)
        _, p_approx = wilcoxon_signed_rank(a, b, exact_limit=0)
        assert abs(p_exact - p_approx) <= 0.01


# ---------------------------------------------------------------------------
# model comparison
# ---------------------------------------------------------------------------

class TestCompareModels:
    def test_identical_replicates_error(self):
        reps = list(np.random.default_rng(0).random(100))
        with pytest.raises(ValueError, match="degenerate"):
            compare_models(reps, list(reps), BootstrapConfig())

    def test_constant_shift_highly_significant(self):
        a = np.random.default_rng(1).random(100)
        result = compare_models(a, a + 1.0, BootstrapConfig())
        assert result.statistic == 0.0
        assert result.p_value < 0.001
        assert result.significant

    def test_unequal_lengths_error(self):
        with pytest.raises(ValueError, match="equal length"):
            compare_models(np.ones(10), np.ones(11), BootstrapConfig())

    def test_noise_vs_itself_not_significant(self):
        rng = np.random.default_rng(2)
        a = rng.random(100)
        b = a + rng.normal(0, 1e-6, 100)  # symmetric jitter
        result = compare_models(a, b, BootstrapConfig())
        assert result.p_value > 0.05
        assert not result.significant
