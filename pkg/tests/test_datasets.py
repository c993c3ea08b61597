"""Tests for patient-level splits, leakage checks, and view triplet pairing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvood.datasets import (
    DatasetSplit,
    SplitConfig,
    ViewTriplet,
    largest_remainder_counts,
    leakage_check,
    make_view_triplets,
    merge_splits,
    stratified_patient_split,
)
from mvood.preprocess import SliceSample


def _slice(pid, view="axial", index=0, label=0):
    return SliceSample(np.zeros((2, 2), dtype=np.float32), label, pid, view, index)


def _cohort(n_controls, n_cases, slices_per_patient=4):
    samples = []
    for i in range(n_controls):
        pid = f"C{i:03d}"
        samples += [_slice(pid, index=k) for k in range(slices_per_patient)]
    for i in range(n_cases):
        pid = f"L{i:03d}"
        samples += [_slice(pid, index=k, label=int(k == 1)) for k in range(slices_per_patient)]
    return samples


# ---------------------------------------------------------------------------
# largest-remainder rounding
# ---------------------------------------------------------------------------

def test_largest_remainder_ten_controls():
    assert largest_remainder_counts(10, (0.70, 0.20, 0.10)) == [7, 2, 1]


def test_largest_remainder_examples():
    assert largest_remainder_counts(60, (0.70, 0.20, 0.10)) == [42, 12, 6]
    assert largest_remainder_counts(30, (0.80, 0.20)) == [24, 6]
    assert largest_remainder_counts(7, (0.70, 0.20, 0.10)) == [5, 1, 1]


def _brute_force_largest_remainder(total, fractions):
    exact = [total * f for f in fractions]
    counts = [int(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@given(
    st.integers(min_value=0, max_value=500),
    st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=5),
)
@settings(max_examples=200, deadline=None)
def test_largest_remainder_matches_oracle_and_sums(total, weights):
    fractions = tuple(w / sum(weights) for w in weights)
    counts = largest_remainder_counts(total, fractions)
    assert sum(counts) == total
    assert all(c >= 0 for c in counts)
    assert counts == _brute_force_largest_remainder(total, fractions)


# ---------------------------------------------------------------------------
# stratified split
# ---------------------------------------------------------------------------

class TestSplit:
    def test_ten_controls_split_7_2_1(self):
        controls, _ = stratified_patient_split(_cohort(10, 0), SplitConfig(seed=0))
        sizes = {name: len(s.patient_ids) for name, s in controls.items()}
        assert sizes == {"train": 7, "tune": 2, "eval": 1}

    def test_every_patient_in_exactly_one_split(self):
        controls, cases = stratified_patient_split(_cohort(13, 9), SplitConfig(seed=1))
        all_pids = [p for s in list(controls.values()) + list(cases.values()) for p in s.patient_ids]
        assert len(all_pids) == len(set(all_pids)) == 22

    def test_case_patients_never_in_train(self):
        controls, cases = stratified_patient_split(_cohort(10, 10), SplitConfig(seed=2))
        assert "train" not in cases
        assert all(s.label == 0 for s in controls["train"].samples)

    def test_deterministic_per_seed(self):
        a = stratified_patient_split(_cohort(12, 8), SplitConfig(seed=5))
        b = stratified_patient_split(_cohort(12, 8), SplitConfig(seed=5))
        for da, db in zip(a, b):
            for name in da:
                assert da[name].patient_ids == db[name].patient_ids

    def test_different_seed_differs(self):
        a, _ = stratified_patient_split(_cohort(20, 0), SplitConfig(seed=0))
        b, _ = stratified_patient_split(_cohort(20, 0), SplitConfig(seed=1))
        assert any(a[name].patient_ids != b[name].patient_ids for name in a)

    def test_too_few_patients_errors(self):
        with pytest.raises(ValueError, match="buckets"):
            stratified_patient_split(_cohort(2, 0), SplitConfig(seed=0))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitConfig(control_fractions=(0.5, 0.2, 0.1))
        with pytest.raises(ValueError):
            SplitConfig(case_fractions=(0.5, 0.2))

    def test_whole_patients_move_together(self):
        controls, cases = stratified_patient_split(_cohort(10, 5), SplitConfig(seed=3))
        for splits in (controls, cases):
            for split in splits.values():
                for s in split.samples:
                    assert s.patient_id in split.patient_ids

    @pytest.mark.parametrize("seed", range(10))
    def test_merge_keeps_train_controls_only(self, seed):
        controls, cases = stratified_patient_split(_cohort(14, 10), SplitConfig(seed=seed))
        merged = merge_splits(controls, cases)
        assert all(s.label == 0 for s in merged["train"].samples)
        assert leakage_check(list(merged.values())).ok
        assert sum(len(s.patient_ids) for s in merged.values()) == 24


# ---------------------------------------------------------------------------
# leakage check
# ---------------------------------------------------------------------------

class TestLeakage:
    def test_disjoint_ok(self):
        a = DatasetSplit("train", patient_ids={"P0"})
        b = DatasetSplit("eval", patient_ids={"P1"})
        assert leakage_check([a, b]).ok

    def test_violation_names_patient(self):
        a = DatasetSplit("train", patient_ids={"P7"})
        b = DatasetSplit("eval", patient_ids={"P7"})
        report = leakage_check([a, b])
        assert not report.ok
        assert any("P7" in v for v in report.violations)

    def test_empty_ok(self):
        assert leakage_check([]).ok
        assert leakage_check([DatasetSplit("train")]).ok


# ---------------------------------------------------------------------------
# view triplets
# ---------------------------------------------------------------------------

def _patient_views(pid, counts=(16, 16, 16), label_at=None):
    samples = []
    for view, n in zip(("axial", "coronal", "sagittal"), counts):
        for k in range(n):
            label = int(label_at is not None and (view, k) in label_at)
            samples.append(_slice(pid, view=view, index=k, label=label))
    return samples


class TestTriplets:
    def test_16_16_16_gives_16(self):
        triplets = make_view_triplets(_patient_views("P0"))
        assert len(triplets) == 16

    def test_min_count_16_12_16_gives_12(self):
        triplets = make_view_triplets(_patient_views("P0", counts=(16, 12, 16)))
        assert len(triplets) == 12

    def test_all_triplets_share_patient(self):
        triplets = make_view_triplets(_patient_views("P0") + _patient_views("P1"))
        assert len(triplets) == 32
        for t in triplets:
            assert t.axial.patient_id == t.coronal.patient_id == t.sagittal.patient_id

    def test_missing_view_patient_skipped_with_warning(self, caplog):
        samples = _patient_views("P0") + [
            _slice("P1", view="axial", index=k) for k in range(16)
        ]
        with caplog.at_level("WARNING"):
            triplets = make_view_triplets(samples)
        assert len(triplets) == 16
        assert all(t.patient_id == "P0" for t in triplets)
        assert any("P1" in rec.message for rec in caplog.records)

    def test_pairing_by_sorted_index(self):
        samples = _patient_views("P0", counts=(3, 3, 3))
        np.random.default_rng(0).shuffle(samples)
        triplets = make_view_triplets(samples)
        for t in triplets:
            assert t.axial.index == t.coronal.index == t.sagittal.index

    def test_triplet_label_is_max_over_views(self):
        samples = _patient_views("P0", counts=(2, 2, 2), label_at={("coronal", 1)})
        triplets = make_view_triplets(samples)
        assert [t.label for t in triplets] == [0, 1]

    def test_triplet_validates_views_and_patient(self):
        with pytest.raises(ValueError, match="mixed patients"):
            ViewTriplet(_slice("P0"), _slice("P1", view="coronal"), _slice("P0", view="sagittal"))
        with pytest.raises(ValueError, match="slot"):
            ViewTriplet(_slice("P0"), _slice("P0"), _slice("P0", view="sagittal"))


# ---------------------------------------------------------------------------
# property: splits never leak across many seeds / cohort shapes
# ---------------------------------------------------------------------------

@given(
    st.integers(min_value=3, max_value=30),
    st.integers(min_value=2, max_value=20),
    st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_split_never_leaks(n_controls, n_cases, seed):
    controls, cases = stratified_patient_split(
        _cohort(n_controls, n_cases), SplitConfig(seed=seed)
    )
    merged = merge_splits(controls, cases)
    assert leakage_check(list(merged.values())).ok
    assert all(s.label == 0 for s in merged["train"].samples)
