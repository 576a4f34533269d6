"""End-to-end preparation: raw events to split, standardised, vectorised datasets."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    MIN_MONTHS,
    AlignedDataset,
    AlignedObservation,
    CompletenessReport,
    EventDefinition,
    PatientRecord,
    RawEvent,
    Standardizer,
    align,
    bin_monthly,
    build_registry,
    completeness_report,
    group_events,
    vectorize,
)
from .model import REAL_GROUPS, ChannelRegistry

SPLITS = ("train", "validation", "test")
# 263k / 25k / 25k patients
DEFAULT_FRACTIONS = (263 / 313, 25 / 313, 25 / 313)


def split_of(patient_id: str, fractions=DEFAULT_FRACTIONS) -> str:
    """Stable split assignment from the SHA-256 of the patient id."""
    if len(fractions) != len(SPLITS) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    edge = 0.0
    for name, f in zip(SPLITS, fractions):
        edge += f
        if u < edge:
            return name
    return SPLITS[-1]


@dataclass
class Prepared:
    """Aligned observations per split plus the training-split registry and scaling."""

    observations: dict[str, list[AlignedObservation]]
    registry: ChannelRegistry
    stats: Standardizer
    report: CompletenessReport
    excluded_short: list[str] = field(default_factory=list)
    groups: dict[str, str] = field(default_factory=dict)

    def dataset(self, split: str) -> AlignedDataset:
        return vectorize(self.observations[split], self.registry, self.stats, warn_unknown=False)


def prepare(events: list[RawEvent], definition: EventDefinition | None = None, fractions=DEFAULT_FRACTIONS,
            critical_channels=None, min_months: int = MIN_MONTHS, delta: float = 0.5) -> Prepared:
    """Bin, align, split and standardise a cohort.

    Patients with fewer than ``min_months`` aligned observations are
    excluded. Standardisation statistics and the channel registry come from
    the training split only.
    """
    definition = definition or EventDefinition()
    records: list[PatientRecord] = [bin_monthly(ev) for ev in group_events(events).values()]
    groups: dict[str, str] = {}
    for r in records:
        groups.update(r.groups)
    if critical_channels is None:
        critical_channels = sorted(c for c, g in groups.items() if g in REAL_GROUPS)
    report = completeness_report(records, critical_channels)
    obs = {s: [] for s in SPLITS}
    excluded = []
    for r in records:
        aligned = align(r, definition, delta)
        if len(aligned) < min_months:
            excluded.append(r.patient_id)
            continue
        obs[split_of(r.patient_id, fractions)].extend(aligned)
    real = sorted(c for c, g in groups.items() if g in REAL_GROUPS)
    stats = Standardizer.fit(obs["train"], real)
    registry = build_registry(obs["train"], groups, stats)
    return Prepared(obs, registry, stats, report, excluded, groups)


def cohort_datasets(events, definition=None, fractions=DEFAULT_FRACTIONS, **kwargs):
    """Shortcut returning ``(prepared, {split: AlignedDataset})``."""
    prep = prepare(events, definition, fractions, **kwargs)
    return prep, {s: prep.dataset(s) for s in SPLITS}


def stack_truth_times(truth: dict, data: AlignedDataset) -> np.ndarray:
    """Ground-truth per-bin failure times aligned to the rows of ``data``."""
    lookup = {}
    for p in truth["patients"]:
        for b in p["bins"]:
            lookup[(p["patient_id"], b["month"])] = b["t"]
    return np.array([lookup[(pid, int(m))] for pid, m in zip(data.patient_ids, data.months)], dtype=np.float64)
