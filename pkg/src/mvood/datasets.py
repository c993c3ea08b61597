"""Patient-level stratified splits, leakage guards and view triplets.

Splitting is always by patient: a patient whose slices are all controls
follows the control fractions (train/tune/eval), a patient with any
lesion slice follows the case fractions (eval/tune, no train). Counts
per bucket come from largest-remainder rounding, patient order from a
seeded shuffle, so assignments are deterministic per seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .preprocess import SliceSample
from .volume import VIEWS

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "tune", "eval")


@dataclass
class SplitConfig:
    control_fractions: tuple[float, float, float] = (0.70, 0.20, 0.10)  # train/tune/eval
    case_fractions: tuple[float, float] = (0.80, 0.20)                  # eval/tune
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.control_fractions) - 1.0) > 1e-9:
            raise ValueError("control_fractions must sum to 1")
        if abs(sum(self.case_fractions) - 1.0) > 1e-9:
            raise ValueError("case_fractions must sum to 1")


@dataclass
class DatasetSplit:
    name: str
    samples: list = field(default_factory=list)
    patient_ids: set = field(default_factory=set)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"unknown split name {self.name!r}")


@dataclass
class ViewTriplet:
    axial: SliceSample
    coronal: SliceSample
    sagittal: SliceSample

    def __post_init__(self):
        pids = {self.axial.patient_id, self.coronal.patient_id, self.sagittal.patient_id}
        if len(pids) != 1:
            raise ValueError(f"ViewTriplet: mixed patients {pids}")
        for s, view in ((self.axial, "axial"), (self.coronal, "coronal"), (self.sagittal, "sagittal")):
            if s.view != view:
                raise ValueError(f"ViewTriplet: slot {view} holds a {s.view} slice")

    @property
    def patient_id(self) -> str:
        return self.axial.patient_id

    @property
    def label(self) -> int:
        return max(self.axial.label, self.coronal.label, self.sagittal.label)


@dataclass
class LeakageReport:
    ok: bool
    violations: list[str]


def largest_remainder_counts(total: int, fractions) -> list[int]:
    """Integer bucket sizes summing to ``total`` with targets ``fractions``."""
    exact = [total * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    short = total - sum(counts)
    remainders = sorted(
        range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def _group_by_patient(samples) -> dict[str, list]:
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.patient_id, []).append(s)
    return groups


def stratified_patient_split(
    samples: list[SliceSample], config: SplitConfig
) -> tuple[dict[str, DatasetSplit], dict[str, DatasetSplit]]:
    """Assign whole patients to splits; returns (control splits, case splits).

    Control splits use the keys train/tune/eval, case splits eval/tune.
    ``leakage_check`` over the union is run before returning.
    """
    groups = _group_by_patient(samples)
    control_pids = sorted(p for p, ss in groups.items() if all(s.label == 0 for s in ss))
    case_pids = sorted(p for p in groups if p not in set(control_pids))

    control_buckets = [n for n, f in zip(SPLIT_NAMES, config.control_fractions) if f > 0]
    case_buckets = [n for n, f in zip(("eval", "tune"), config.case_fractions) if f > 0]
    if control_pids and len(control_pids) < len(control_buckets):
        raise ValueError(
            f"{len(control_pids)} control patients cannot fill {len(control_buckets)} buckets"
        )
    if case_pids and len(case_pids) < len(case_buckets):
        raise ValueError(
            f"{len(case_pids)} case patients cannot fill {len(case_buckets)} buckets"
        )

    rng = np.random.default_rng(config.seed)

    def assign(pids, names, fractions):
        order = [pids[i] for i in rng.permutation(len(pids))]
        counts = largest_remainder_counts(len(order), fractions)
        splits = {}
        start = 0
        for name, count in zip(names, counts):
            chosen = order[start : start + count]
            start += count
            split = DatasetSplit(name=name)
            for p in sorted(chosen):
                split.patient_ids.add(p)
                split.samples.extend(groups[p])
            splits[name] = split
        return splits

    control_splits = assign(control_pids, SPLIT_NAMES, config.control_fractions)
    case_splits = assign(case_pids, ("eval", "tune"), config.case_fractions)

    report = leakage_check(list(control_splits.values()))
    if not report.ok:
        raise AssertionError(f"internal leakage among control splits: {report.violations}")
    report = leakage_check(list(case_splits.values()))
    if not report.ok:
        raise AssertionError(f"internal leakage among case splits: {report.violations}")
    return control_splits, case_splits


def leakage_check(splits: list[DatasetSplit]) -> LeakageReport:
    """List every patient appearing in more than one split."""
    seen: dict[str, set[str]] = {}
    for split in splits:
        for pid in split.patient_ids:
            seen.setdefault(pid, set()).add(split.name)
    violations = sorted(
        f"{pid} in {sorted(names)}" for pid, names in seen.items() if len(names) > 1
    )
    return LeakageReport(ok=not violations, violations=violations)


def merge_splits(
    control_splits: dict[str, DatasetSplit], case_splits: dict[str, DatasetSplit]
) -> dict[str, DatasetSplit]:
    """Combine control and case assignments into train/tune/eval splits.

    train stays controls-only; tune and eval take both populations.
    """
    merged = {}
    for name in SPLIT_NAMES:
        split = DatasetSplit(name=name)
        for source in (control_splits, case_splits):
            if name in source:
                split.samples.extend(source[name].samples)
                split.patient_ids.update(source[name].patient_ids)
        merged[name] = split
    return merged


def make_view_triplets(samples: list[SliceSample]) -> list[ViewTriplet]:
    """Pair each patient's axial/coronal/sagittal slices by sorted index.

    Triplet count per patient is the minimum slice count over the three
    views; patients missing a view are skipped with a warning.
    """
    by_patient: dict[str, dict[str, list[SliceSample]]] = {}
    for s in samples:
        if s.view not in VIEWS:
            raise ValueError(f"make_view_triplets: sample with view {s.view!r}")
        by_patient.setdefault(s.patient_id, {}).setdefault(s.view, []).append(s)

    triplets = []
    for pid in sorted(by_patient):
        views = by_patient[pid]
        if set(views) != set(VIEWS):
            log.warning("make_view_triplets: patient %s missing views %s, skipped",
                        pid, sorted(set(VIEWS) - set(views)))
            continue
        stacks = {v: sorted(views[v], key=lambda s: s.index) for v in VIEWS}
        n = min(len(stacks[v]) for v in VIEWS)
        for i in range(n):
            triplets.append(
                ViewTriplet(stacks["axial"][i], stacks["coronal"][i], stacks["sagittal"][i])
            )
    return triplets
