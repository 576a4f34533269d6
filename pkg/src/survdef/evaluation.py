"""Concordance, predictive likelihood and Kaplan-Meier curves."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

from . import distributions as dist
from .compute import RngStream
from .model import DefConfig, DefModelParams, weibull_scale


@dataclass(frozen=True)
class RiskPrediction:
    ref: object
    predicted_mean_time: float

    @property
    def risk(self) -> float:
        return -self.predicted_mean_time


@dataclass(frozen=True)
class ConcordanceResult:
    concordant: int
    tied: int
    comparable: int

    @property
    def defined(self) -> bool:
        return self.comparable > 0

    @property
    def value(self) -> float | None:
        """Harrell's C, or None when no pair is comparable."""
        if not self.comparable:
            return None
        return (self.concordant + 0.5 * self.tied) / self.comparable


def _validate(risk, time, event):
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    if not (risk.shape == time.shape == event.shape) or risk.ndim != 1:
        raise ValueError("risk, time and event must be aligned 1-d arrays")
    if risk.size == 0:
        raise ValueError("concordance needs at least one observation")
    return risk, time, event


def concordance_naive(risk, time, event) -> ConcordanceResult:
    """O(n^2) enumeration: (i, j) is comparable when t_i < t_j and i had the event."""
    risk, time, event = _validate(risk, time, event)
    conc = tied = comp = 0
    n = risk.size
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                comp += 1
                if risk[i] > risk[j]:
                    conc += 1
                elif risk[i] == risk[j]:
                    tied += 1
    return ConcordanceResult(conc, tied, comp)


class _Fenwick:
    def __init__(self, n: int):
        self.tree = np.zeros(n + 1, dtype=np.int64)

    def add(self, i: int):
        i += 1
        while i < self.tree.size:
            self.tree[i] += 1
            i += i & -i

    def prefix(self, i: int) -> int:
        """Count of inserted positions < i."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return int(s)


def concordance(risk, time, event) -> ConcordanceResult:
    """Harrell's C in O(n log n).

    Observations are visited in decreasing time; all strictly later
    observations sit in a Fenwick tree over risk ranks, so each event can
    count later observations with lower and equal risk.
    """
    risk, time, event = _validate(risk, time, event)
    ranks_sorted = np.unique(risk)
    rank = np.searchsorted(ranks_sorted, risk)
    tree = _Fenwick(ranks_sorted.size)
    order = np.argsort(-time, kind="stable")
    conc = tied = comp = 0
    inserted = 0
    pos = 0
    n = risk.size
    while pos < n:
        end = pos
        while end < n and time[order[end]] == time[order[pos]]:
            end += 1
        group = order[pos:end]
        for i in group:
            if event[i]:
                lower = tree.prefix(rank[i])
                le = tree.prefix(rank[i] + 1)
                conc += lower
                tied += le - lower
                comp += inserted
        for i in group:
            tree.add(rank[i])
        inserted += end - pos
        pos = end
    return ConcordanceResult(conc, tied, comp)


@dataclass
class SurvivalCurve:
    """Right-continuous step function; ``survival[i]`` holds on ``[times[i], times[i+1])``."""

    times: np.ndarray
    survival: np.ndarray

    def at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[idx]

    def to_text(self) -> str:
        rows = ["time\tsurvival", "0\t1"]
        rows += [f"{t!r}\t{s!r}" for t, s in zip(self.times.tolist(), self.survival.tolist())]
        return "\n".join(rows) + "\n"


def kaplan_meier(time, event) -> SurvivalCurve:
    """Product-limit estimate: at each distinct event time multiply by 1 - d / n_at_risk.

    The running product is kept as an exact fraction, so every reported
    value is the correctly rounded float of the true estimate.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    if time.size == 0:
        raise ValueError("Kaplan-Meier needs at least one observation")
    event_times = np.unique(time[event])
    s = Fraction(1)
    surv = []
    for t in event_times:
        at_risk = int(np.sum(time >= t))
        d = int(np.sum((time == t) & event))
        s *= Fraction(at_risk - d, at_risk)
        surv.append(float(s))
    return SurvivalCurve(event_times, np.asarray(surv, dtype=np.float64))


def _log_lik_samples(cfg: DefConfig, params: DefModelParams, mu0, sd0, t, event, num_mc, rng):
    N, K = mu0.shape
    eps = rng.normal((num_mc, N, K))
    z = (mu0[None] + sd0[None] * eps).reshape(-1, K)
    scales = weibull_scale(params.weibull_head, z).reshape(num_mc, N)
    t_rep = np.broadcast_to(t, (num_mc, N))
    ev = np.asarray(event, dtype=bool)
    lp = np.where(
        ev,
        dist.weibull_log_pdf(t_rep, scales, cfg.weibull_shape),
        dist.weibull_log_survival(t_rep, scales, cfg.weibull_shape),
    )
    return lp  # (S, N)


def predictive_log_likelihood(cfg: DefConfig, params: DefModelParams, mu0, sd0, t, event, num_mc: int,
                              rng: RngStream, per_observation: bool = False):
    """Average over observations of log E_q[p(t_n | z)].

    Censored observations use the survival function in place of the density.
    """
    lp = _log_lik_samples(cfg, params, np.atleast_2d(mu0), np.atleast_2d(sd0), np.asarray(t, dtype=np.float64),
                          event, num_mc, rng)
    per = logsumexp(lp, axis=0) - np.log(num_mc)
    return per if per_observation else float(per.mean())


def expected_log_likelihood(cfg, params, mu0, sd0, t, event, num_mc, rng) -> float:
    """Diagnostic E_q[log p(t_n | z)], averaged over observations."""
    lp = _log_lik_samples(cfg, params, np.atleast_2d(mu0), np.atleast_2d(sd0), np.asarray(t, dtype=np.float64),
                          event, num_mc, rng)
    return float(lp.mean())


def km_by_risk_group(risk, time, event, n_groups: int = 3) -> list[SurvivalCurve]:
    """Kaplan-Meier curve per risk quantile group, lowest risk first."""
    risk = np.asarray(risk, dtype=np.float64)
    order = np.argsort(risk, kind="stable")
    return [kaplan_meier(np.asarray(time)[g], np.asarray(event)[g]) for g in np.array_split(order, n_groups) if g.size]
