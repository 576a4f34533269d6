"""Raw events to failure-aligned observations.

Pipeline per patient: parse raw event lines, bin them by calendar month,
find the first month carrying an event code, and emit one observation per
month bin labelled with its distance to the event (or to the end of the
record, for censored patients).
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .model import BINARY_GROUPS, GROUPS, REAL_GROUPS, Batch, ChannelRegistry

log = logging.getLogger(__name__)

CENSOR_OFFSET = 0.5
MIN_MONTHS = 5


@dataclass(frozen=True)
class RawEvent:
    patient_id: str
    date: dt.date
    group: str
    channel: str
    value: float = 1.0

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}")
        if self.group in BINARY_GROUPS and self.value not in (0, 1):
            raise ValueError(f"{self.group} events carry a presence flag, got {self.value!r}")
        if self.group in REAL_GROUPS and not math.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.channel}")

    @property
    def month(self) -> int:
        return month_index(self.date)

    def to_json(self) -> str:
        return json.dumps(
            {"patient_id": self.patient_id, "date": self.date.isoformat(), "group": self.group,
             "channel": self.channel, "value": self.value},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "RawEvent":
        d = json.loads(line)
        try:
            date = dt.date.fromisoformat(d["date"])
        except (TypeError, ValueError) as e:
            raise ValueError(f"bad date {d.get('date')!r}") from e
        return cls(str(d["patient_id"]), date, d["group"], str(d["channel"]), float(d.get("value", 1.0)))


@dataclass
class ParseError:
    line_no: int
    message: str


def month_index(date: dt.date) -> int:
    return date.year * 12 + date.month - 1


def month_start(index: int) -> dt.date:
    return dt.date(index // 12, index % 12 + 1, 1)


def read_events(lines) -> tuple[list[RawEvent], list[ParseError]]:
    """Parse line-delimited events, collecting per-line errors instead of raising."""
    events, errors = [], []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(RawEvent.from_json(line))
        except (ValueError, KeyError, TypeError) as e:
            errors.append(ParseError(no, f"{type(e).__name__}: {e}"))
    return events, errors


@dataclass
class PatientRecord:
    patient_id: str
    bins: dict[int, dict[str, float]]
    groups: dict[str, str]
    event_month: int | None = None

    @property
    def last_month(self) -> int:
        return max(self.bins)

    @property
    def months(self) -> list[int]:
        return sorted(self.bins)


def bin_monthly(events: list[RawEvent]) -> PatientRecord:
    """Average real channels within each month; binary channels become presence bits."""
    if not events:
        raise ValueError("no events to bin")
    pids = {e.patient_id for e in events}
    if len(pids) != 1:
        raise ValueError(f"events span several patients: {sorted(pids)[:3]}")
    sums: dict[int, dict[str, float]] = defaultdict(dict)
    counts: dict[int, dict[str, int]] = defaultdict(dict)
    groups: dict[str, str] = {}
    for e in events:
        if groups.setdefault(e.channel, e.group) != e.group:
            raise ValueError(f"channel {e.channel} appears in groups {groups[e.channel]} and {e.group}")
        m = e.month
        if e.group in REAL_GROUPS:
            sums[m][e.channel] = sums[m].get(e.channel, 0.0) + e.value
            counts[m][e.channel] = counts[m].get(e.channel, 0) + 1
        elif e.value:
            sums[m][e.channel] = 1.0
            counts[m][e.channel] = 1
        else:
            sums[m].setdefault(e.channel, 0.0)
            counts[m].setdefault(e.channel, 1)
    bins = {}
    for m in sorted(sums):
        bins[m] = {
            c: (v / counts[m][c] if groups[c] in REAL_GROUPS else v)
            for c, v in sorted(sums[m].items())
        }
    return PatientRecord(events[0].patient_id, bins, groups)


@dataclass(frozen=True)
class EventDefinition:
    code_prefixes: tuple[str, ...] = ("410", "411", "413")

    def __post_init__(self):
        object.__setattr__(self, "code_prefixes", tuple(self.code_prefixes))
        if not self.code_prefixes or any(not p for p in self.code_prefixes):
            raise ValueError("event definition needs non-empty code prefixes")

    def matches(self, channel: str) -> bool:
        return channel.startswith(self.code_prefixes)


def detect_event(record: PatientRecord, definition: EventDefinition) -> int | None:
    """Earliest month with a diagnosis code matching any prefix."""
    for m in record.months:
        for channel, v in record.bins[m].items():
            if record.groups[channel] == "diagnoses" and v and definition.matches(channel):
                return m
    return None


@dataclass
class AlignedObservation:
    patient_id: str
    month: int
    t: float
    event: bool
    covariates: dict[str, float] = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"aligned time must be positive, got {self.t}")

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "month": self.month, "t": self.t, "event": self.event,
                "covariates": self.covariates, "weight": self.weight}

    @classmethod
    def from_dict(cls, d: dict) -> "AlignedObservation":
        return cls(d["patient_id"], int(d["month"]), float(d["t"]), bool(d["event"]),
                   dict(d["covariates"]), float(d.get("weight", 1.0)))


def align(record: PatientRecord, definition: EventDefinition, delta: float = CENSOR_OFFSET,
          drop_after_event: bool = True) -> list[AlignedObservation]:
    """Label each month bin with its time to failure (or to censoring).

    Event patients: bins before the event month get ``t = E - m``; the event
    month and later bins are dropped. Censored patients: every bin gets
    ``t = M - m + delta`` with ``M`` the last observed month.
    """
    event_month = detect_event(record, definition)
    record.event_month = event_month
    out = []
    for m in record.months:
        covs = {c: v for c, v in record.bins[m].items() if not (record.groups[c] == "diagnoses" and definition.matches(c))}
        if event_month is not None:
            if m >= event_month:
                if drop_after_event:
                    continue
                # kept post-event bins are censored at the record end
                out.append(AlignedObservation(record.patient_id, m, record.last_month - m + delta, False, covs))
                continue
            out.append(AlignedObservation(record.patient_id, m, float(event_month - m), True, covs))
        else:
            out.append(AlignedObservation(record.patient_id, m, record.last_month - m + delta, False, covs))
    return out


@dataclass
class Standardizer:
    """Per-channel mean/sd for real channels, frozen from the training split."""

    mean: dict[str, float]
    sd: dict[str, float]
    constant: tuple[str, ...] = ()

    @classmethod
    def fit(cls, observations: list[AlignedObservation], real_channels) -> "Standardizer":
        vals: dict[str, list[float]] = {c: [] for c in real_channels}
        for o in observations:
            for c in vals:
                if c in o.covariates:
                    vals[c].append(o.covariates[c])
        mean, sd, constant = {}, {}, []
        for c, v in vals.items():
            arr = np.asarray(v, dtype=np.float64)
            s = float(arr.std()) if arr.size > 1 else 0.0
            if s > 0:
                mean[c], sd[c] = float(arr.mean()), s
            else:
                constant.append(c)
        return cls(mean, sd, tuple(constant))

    def transform(self, channel: str, x):
        return (np.asarray(x, dtype=np.float64) - self.mean[channel]) / self.sd[channel]

    def inverse(self, channel: str, z):
        return np.asarray(z, dtype=np.float64) * self.sd[channel] + self.mean[channel]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "constant": list(self.constant)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(dict(d["mean"]), dict(d["sd"]), tuple(d.get("constant", ())))


def standardize(values: dict[str, float], stats: Standardizer) -> dict[str, float]:
    """Standardise the real channels of one covariate dict; unknown real channels are dropped."""
    out = {}
    for c, v in values.items():
        if c in stats.mean:
            out[c] = float(stats.transform(c, v))
    return out


def build_registry(observations: list[AlignedObservation], groups: dict[str, str],
                   stats: Standardizer) -> ChannelRegistry:
    """Registry over channels seen in ``observations``; constant real channels are excluded."""
    seen = set()
    for o in observations:
        seen.update(o.covariates)
    pairs = []
    for group in GROUPS:
        for c in sorted(seen):
            if groups.get(c) != group:
                continue
            if group in REAL_GROUPS and c not in stats.mean:
                continue
            pairs.append((c, group))
    return ChannelRegistry.from_pairs(pairs)


@dataclass
class AlignedDataset:
    """Row-stacked aligned observations in registry channel order."""

    batch: Batch
    patient_ids: list[str]
    months: np.ndarray

    def __len__(self) -> int:
        return len(self.batch)

    @property
    def record_lengths(self) -> np.ndarray:
        """Per-observation count of observations from the same patient."""
        _, inverse, counts = np.unique(np.asarray(self.patient_ids, dtype=object).astype(str),
                                       return_inverse=True, return_counts=True)
        return counts[inverse]

    def take(self, idx) -> "AlignedDataset":
        idx = np.asarray(idx)
        return AlignedDataset(self.batch.take(idx), [self.patient_ids[i] for i in idx], self.months[idx])


def vectorize(observations: list[AlignedObservation], registry: ChannelRegistry,
              stats: Standardizer | None = None, warn_unknown: bool = True) -> AlignedDataset:
    """Stack observations; binary channels are observed (0 when absent) in every bin."""
    R, C = registry.num_real, registry.num_binary
    real_pos = {c: i for i, c in enumerate(registry.real_names)}
    bin_pos = {c: i for i, c in enumerate(registry.binary_names)}
    n = len(observations)
    x_real = np.zeros((n, R))
    m_real = np.zeros((n, R), dtype=bool)
    x_bin = np.zeros((n, C))
    unknown = set()
    for r, o in enumerate(observations):
        for c, v in o.covariates.items():
            if c in real_pos:
                x_real[r, real_pos[c]] = stats.transform(c, v) if stats is not None else v
                m_real[r, real_pos[c]] = True
            elif c in bin_pos:
                x_bin[r, bin_pos[c]] = 1.0 if v else 0.0
            else:
                unknown.add(c)
    if unknown and warn_unknown:
        log.warning("ignoring %d channel(s) absent from the registry: %s", len(unknown), sorted(unknown)[:10])
    batch = Batch(
        x_real, m_real, x_bin, np.ones((n, C), dtype=bool),
        t=np.array([o.t for o in observations], dtype=np.float64),
        event=np.array([o.event for o in observations], dtype=bool),
    )
    return AlignedDataset(batch, [o.patient_id for o in observations],
                          np.array([o.month for o in observations], dtype=np.int64))


@dataclass
class CompletenessReport:
    patient_fraction: float
    month_fraction: float
    channel_missingness: dict[str, float]
    num_patients: int
    num_months: int

    def to_dict(self) -> dict:
        return {
            "patient_fraction": self.patient_fraction,
            "month_fraction": self.month_fraction,
            "channel_missingness": self.channel_missingness,
            "num_patients": self.num_patients,
            "num_months": self.num_months,
        }


def completeness_report(records: list[PatientRecord], critical_channels) -> CompletenessReport:
    """Fraction of patients with a complete month and of complete months.

    A month is complete when every critical channel is present in it.
    """
    critical = set(critical_channels)
    channels = sorted({c for r in records for b in r.bins.values() for c in b})
    present = dict.fromkeys(channels, 0)
    n_months = complete_months = complete_patients = 0
    for r in records:
        any_complete = False
        for b in r.bins.values():
            n_months += 1
            for c in b:
                present[c] += 1
            if critical and critical.issubset(b):
                complete_months += 1
                any_complete = True
        complete_patients += any_complete
    miss = {c: 1.0 - present[c] / n_months for c in channels} if n_months else {}
    return CompletenessReport(
        patient_fraction=complete_patients / len(records) if records else 0.0,
        month_fraction=complete_months / n_months if n_months else 0.0,
        channel_missingness=miss,
        num_patients=len(records),
        num_months=n_months,
    )


def group_events(events: list[RawEvent]) -> dict[str, list[RawEvent]]:
    """Events per patient, patients in sorted id order."""
    by: dict[str, list[RawEvent]] = defaultdict(list)
    for e in events:
        by[e.patient_id].append(e)
    return {pid: by[pid] for pid in sorted(by)}
