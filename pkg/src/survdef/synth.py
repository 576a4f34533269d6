"""Synthetic cohorts drawn from the generative model.

Each patient gets a run of monthly bins with an independent latent draw
per bin. Every bin also draws a failure time; the patient's event month
is the ceiling of the earliest calendar failure time over its bins, and
bins from that month on are cut (the event month itself is kept and
carries the event code). A censored patient is truncated at a uniformly
chosen bin before the event and the event is discarded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .alignment import RawEvent, month_start
from .compute import RngStream
from .inference import inverse_softplus
from .model import (
    GROUPS,
    Batch,
    ChannelRegistry,
    DefConfig,
    DefModelParams,
    init_params,
    local_log_joint,
    param_log_prior,
    sample_latents,
    sample_record,
)

GT_FORMAT_VERSION = 1
_PREFIX = {"labs": "lab", "vitals": "vital", "meds": "med", "diagnoses": "dx"}
BASE_MONTH = 2000 * 12


@dataclass
class CohortSpec:
    num_patients: int = 1000
    channels: dict = field(default_factory=lambda: {"labs": 2, "vitals": 2, "meds": 1, "diagnoses": 1})
    min_months: int = 5
    # extra months beyond the minimum ~ Geometric(length_tail_p) - 1
    length_tail_p: float = 0.1
    # gap between consecutive observed months ~ Geometric(gap_p); 1.0 gives consecutive months
    gap_p: float = 1.0
    missingness: float = 0.3
    censoring_fraction: float = 0.2
    latent_dim: int = 2
    num_layers: int = 2
    link_weight_sd: float = 1.0
    real_weight_sd: float = 1.5
    binary_weight_mean: float = 2.0
    binary_bias: float = -1.0
    survival_weight_sd: float = 1.0
    # when set, the survival weights are rescaled so that sd(z . a) under the prior equals this value
    survival_signal: float | None = 60.0
    # rescale the bottom link so the latent means are white under the prior
    whiten_latents: bool = True
    # orthogonalise the real-channel head rows
    balanced_heads: bool = True
    survival_bias: float = 30.0
    informative_groups: tuple | None = None
    critical_channels: tuple | None = None
    target_completeness: tuple | None = None
    with_units: bool = True
    # AR(1) coefficient on the top latent layer across a patient's months; 0 keeps months exchangeable
    temporal_correlation: float = 0.0
    event_code: str = "410.1"
    model_seed: int | None = None

    def __post_init__(self):
        if self.min_months < 5:
            raise ValueError("records need at least 5 months")
        for name in ("missingness", "censoring_fraction", "length_tail_p", "gap_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.length_tail_p <= 0 or self.gap_p <= 0:
            raise ValueError("geometric parameters must be positive")
        bad = set(self.channels) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown channel groups {sorted(bad)}")
        if self.target_completeness is not None:
            self.target_completeness = tuple(self.target_completeness)
            if not all(0.0 <= v <= 1.0 for v in self.target_completeness):
                raise ValueError("completeness targets must be fractions")
        if self.informative_groups is not None:
            self.informative_groups = tuple(self.informative_groups)
        if self.critical_channels is not None:
            self.critical_channels = tuple(self.critical_channels)

    def registry(self) -> ChannelRegistry:
        pairs = []
        for group in GROUPS:
            for i in range(int(self.channels.get(group, 0))):
                pairs.append((f"{_PREFIX[group]}_{i:03d}", group))
        return ChannelRegistry.from_pairs(pairs)

    def def_config(self) -> DefConfig:
        return DefConfig.with_latent_dim(self.latent_dim, self.num_layers)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("informative_groups", "critical_channels", "target_completeness"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


def random_true_params(spec: CohortSpec, cfg: DefConfig, registry: ChannelRegistry, rng: RngStream) -> DefModelParams:
    """Ground-truth parameters with spec-controlled strength per block."""
    params = init_params(cfg, registry, rng.child("base"))
    K = cfg.latent_dim
    for l, link in enumerate(params.links):
        r = rng.child(("link", l))
        link.W1 = r.child("W1").normal(link.W1.shape, scale=spec.link_weight_sd)
        link.b1 = r.child("b1").normal(link.b1.shape, scale=0.5)
        link.W2 = r.child("W2").normal(link.W2.shape, scale=spec.link_weight_sd)
        d = cfg.layer_dims[l]
        link.b2 = np.concatenate([r.child("b2").normal((d,), scale=0.5), np.full(d, float(inverse_softplus(0.3)))])
    if spec.whiten_latents:
        _whiten_bottom_link(cfg, params, rng.child("whiten"))
    a = rng.child("a").normal((K,), scale=spec.survival_weight_sd)
    if spec.survival_signal is not None:
        z0 = sample_latents(cfg, params, rng.child("calibration"), 20000)[0]
        a = a * (spec.survival_signal / float(np.std(z0 @ a)))
        # centre so the median latent gives scale ~ softplus(survival_bias)
        bias = spec.survival_bias - float(np.median(z0 @ a))
    else:
        bias = spec.survival_bias
    params.weibull_head.a = a
    params.weibull_head.b = np.array(bias)
    heads = params.obs_heads
    heads.real_W = rng.child("real_W").normal(heads.real_W.shape, scale=spec.real_weight_sd)
    R = heads.real_W.shape[1]
    if spec.balanced_heads and R >= K:
        # orthogonal rows with the same average entry size: every latent direction is equally visible
        q, _ = np.linalg.qr(heads.real_W.T)
        heads.real_W = q.T * (spec.real_weight_sd * math.sqrt(R))
    heads.real_b = np.zeros_like(heads.real_b)
    heads.binary_U = rng.child("binary_U").normal(heads.binary_U.shape, loc=spec.binary_weight_mean)
    heads.binary_c = np.full_like(heads.binary_c, spec.binary_bias)
    if spec.informative_groups is not None:
        keep_real = np.isin(registry.real_groups, spec.informative_groups)
        keep_bin = np.isin(registry.binary_groups, spec.informative_groups)
        heads.real_W = heads.real_W * keep_real[None, :]
        # softplus(-40) ~ 4e-18: effectively zero positive weight
        heads.binary_U = np.where(keep_bin[None, :], heads.binary_U, -40.0)
    return params


def _whiten_bottom_link(cfg: DefConfig, params: DefModelParams, rng: RngStream, n: int = 20000) -> None:
    """Affinely rescale the bottom link's mean output to zero mean and identity covariance under the prior."""
    if cfg.num_layers < 2:
        return
    link = params.links[0]
    d = cfg.layer_dims[0]
    z1 = sample_latents(cfg, params, rng, n)[1]
    hidden = np.maximum(z1 @ link.W1 + link.b1, 0.0)
    mean = hidden @ link.W2[:, :d] + link.b2[:d]
    mu = mean.mean(axis=0)
    cov = np.cov(mean, rowvar=False).reshape(d, d) + 1e-2 * np.eye(d)
    vals, vecs = np.linalg.eigh(cov)
    A = vecs @ np.diag(vals ** -0.5) @ vecs.T
    link.W2 = np.concatenate([link.W2[:, :d] @ A, link.W2[:, d:]], axis=1)
    link.b2 = np.concatenate([(link.b2[:d] - mu) @ A, link.b2[d:]])


@dataclass
class _Structure:
    months: np.ndarray
    z: list[np.ndarray]
    x_real: np.ndarray
    x_bin: np.ndarray
    t: np.ndarray
    event_month: int | None
    censored: bool


@dataclass
class Cohort:
    events: list[RawEvent]
    truth: dict
    bins: dict[str, dict[int, dict[str, float]]]
    registry: ChannelRegistry
    config: DefConfig
    params: DefModelParams

    def event_lines(self) -> list[str]:
        return [e.to_json() for e in self.events]


def _geometric(u: float, p: float) -> int:
    if p >= 1.0:
        return 1
    return max(1, int(math.ceil(math.log(u) / math.log1p(-p))))


def _latents(spec, cfg, params, rng, n):
    if spec.temporal_correlation == 0.0 or n == 0:
        return sample_latents(cfg, params, rng, n)
    rho = spec.temporal_correlation
    top = cfg.num_layers - 1
    noise = rng.child("ar").normal((n, cfg.layer_dims[top]), scale=cfg.top_prior_sd)
    ztop = np.empty_like(noise)
    ztop[0] = noise[0]
    for i in range(1, n):
        ztop[i] = rho * ztop[i - 1] + math.sqrt(1.0 - rho * rho) * noise[i]
    z = [None] * cfg.num_layers
    z[top] = ztop
    from .model import link_forward
    for l in range(top - 1, -1, -1):
        mean, var = link_forward(params.links[l], z[l + 1], cfg.layer_dims[l])
        z[l] = mean + np.sqrt(var) * rng.child(("z", l)).normal(mean.shape)
    return z


def _draw_structure(spec: CohortSpec, cfg, params, rng: RngStream) -> _Structure | None:
    u = rng.child("shape").uniform(2)
    n = spec.min_months - 1 + _geometric(u[0], spec.length_tail_p)
    start = BASE_MONTH + int(u[1] * 120)
    gaps = np.ones(n, dtype=np.int64)
    if n > 1:
        gaps[1:] = [_geometric(x, spec.gap_p) for x in rng.child("gaps").uniform(n - 1)]
    months = start + np.cumsum(gaps) - 1
    z = _latents(spec, cfg, params, rng.child("latents"), n)
    draw = sample_record(cfg, params, rng.child("record"), z=z)
    event_month = int(math.ceil(float(np.min(months + draw.t))))
    keep = months < event_month
    n_pre = int(keep.sum())
    if n_pre < spec.min_months:
        return None
    # the event month gets its own bin with a fresh latent draw
    z_ev = _latents(spec, cfg, params, rng.child("event_latents"), 1)
    ev = sample_record(cfg, params, rng.child("event_record"), z=z_ev)
    months = np.append(months[keep], event_month)
    zs = [np.vstack([zl[keep], ze]) for zl, ze in zip(z, z_ev)]
    x_real = np.vstack([draw.x_real[keep], ev.x_real])
    x_bin = np.vstack([draw.x_bin[keep], ev.x_bin])
    t = np.append(draw.t[keep], ev.t)
    if rng.child("censor").uniform(1)[0] < spec.censoring_fraction:
        # keep between min_months and all pre-event bins, uniformly
        cut = spec.min_months + int(rng.child("cut").integers(0, n_pre - spec.min_months + 1, 1)[0])
        sl = slice(0, cut)
        return _Structure(months[sl], [zl[sl] for zl in zs], x_real[sl], x_bin[sl], t[sl], None, True)
    return _Structure(months, zs, x_real, x_bin, t, event_month, False)


def _structure(spec: CohortSpec, cfg, params, rng: RngStream, max_tries: int = 1000) -> _Structure:
    """Redraw until the record keeps at least ``min_months`` bins before its event."""
    for attempt in range(max_tries):
        s = _draw_structure(spec, cfg, params, rng.child(("attempt", attempt)))
        if s is not None:
            return s
    raise RuntimeError(f"no record with {spec.min_months} pre-event months in {max_tries} draws; "
                       "raise the survival scale")


def calibrate_completeness(lengths, patient_target: float, month_target: float) -> tuple[float, float]:
    """Solve for (fraction of capable patients, per-month completeness among them).

    With a capable fraction ``pi`` and per-month probability ``p`` the
    expected month fraction is ``pi * p`` and the patient fraction is
    ``pi * mean(1 - (1 - p)^L)``.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if month_target <= 0 or patient_target <= 0:
        return 0.0, 0.0
    ratio = patient_target / month_target

    def gap(p):
        return np.mean(1.0 - (1.0 - p) ** lengths) / p - ratio

    if gap(1.0) >= 0:
        p = 1.0
    elif gap(1e-12) <= 0:
        # the ratio is bounded by the mean record length as p -> 0
        raise ValueError(f"completeness targets need patient/month ratio {ratio:.2f}, but records average "
                         f"{lengths.mean():.2f} months; lengthen the records")
    else:
        p = optimize.brentq(gap, 1e-12, 1.0, xtol=1e-15)
    return min(1.0, month_target / p), p


def _masks(spec: CohortSpec, registry: ChannelRegistry, structures: list[_Structure], rng: RngStream):
    real_names = registry.real_names
    critical = spec.critical_channels if spec.critical_channels is not None else real_names
    crit_idx = np.array([real_names.index(c) for c in critical if c in real_names], dtype=np.int64)
    masks = []
    capable = None
    p_complete = None
    if spec.target_completeness is not None and crit_idx.size:
        lengths = [s.months.size for s in structures]
        pi, p_complete = calibrate_completeness(lengths, *spec.target_completeness)
        n_cap = int(round(pi * len(structures)))
        perm = np.argsort(rng.child("capable").uniform(len(structures)), kind="stable")
        capable = np.zeros(len(structures), dtype=bool)
        capable[perm[:n_cap]] = True
    for i, s in enumerate(structures):
        r = rng.child(("mask", i))
        n, R = s.x_real.shape
        m = r.child("real").uniform(n * R).reshape(n, R) >= spec.missingness
        if capable is not None:
            complete = (r.child("complete").uniform(n) < p_complete) & capable[i]
            crit = m[:, crit_idx]
            # incomplete months must miss at least one critical channel
            all_on = crit.all(axis=1) & ~complete
            forced = crit_idx[r.child("force").integers(0, crit_idx.size, n)]
            crit_full = m.copy()
            crit_full[np.arange(n)[all_on], forced[all_on]] = False
            crit_full[np.ix_(complete, crit_idx)] = True
            m = crit_full
        masks.append(m)
    return masks


def generate_cohort(spec: CohortSpec, rng: RngStream) -> Cohort:
    registry = spec.registry()
    cfg = spec.def_config()
    model_rng = RngStream(spec.model_seed) if spec.model_seed is not None else rng.child("model")
    params = random_true_params(spec, cfg, registry, model_rng)
    R = registry.num_real
    units_rng = rng.child("units")
    loc = units_rng.child("loc").uniform(R) * 100.0 + 50.0 if spec.with_units else np.zeros(R)
    scale = units_rng.child("scale").uniform(R) * 15.0 + 5.0 if spec.with_units else np.ones(R)

    structures = [_structure(spec, cfg, params, rng.child(("patient", i))) for i in range(spec.num_patients)]
    masks = _masks(spec, registry, structures, rng.child("masks"))

    events: list[RawEvent] = []
    bins_out: dict[str, dict[int, dict[str, float]]] = {}
    patients = []
    for i, (s, m) in enumerate(zip(structures, masks)):
        pid = f"P{i:06d}"
        days = rng.child(("days", i)).integers(1, 29, s.months.size)
        nonempty = m.any(axis=1) | (s.x_bin > 0).any(axis=1)
        if s.event_month is not None:
            nonempty[-1] = True
        rows = np.flatnonzero(nonempty)
        batch = Batch(s.x_real[rows], m[rows], s.x_bin[rows], np.ones_like(s.x_bin[rows], dtype=bool),
                      t=s.t[rows], event=np.ones(rows.size, dtype=bool))
        lj = local_log_joint(cfg, params, [zl[rows] for zl in s.z], batch, registry) if rows.size else np.zeros(0)
        bins = {}
        gt_bins = []
        for j, row in enumerate(rows):
            month = int(s.months[row])
            date = month_start(month).replace(day=int(days[row]))
            b = {}
            for c, name in enumerate(registry.real_names):
                if m[row, c]:
                    value = float(loc[c] + scale[c] * s.x_real[row, c])
                    b[name] = value
                    events.append(RawEvent(pid, date, registry.group_of(name), name, value))
            for c, name in enumerate(registry.binary_names):
                if s.x_bin[row, c] > 0:
                    b[name] = 1.0
                    events.append(RawEvent(pid, date, registry.group_of(name), name, 1.0))
            if s.event_month is not None and month == s.event_month:
                b[spec.event_code] = 1.0
                events.append(RawEvent(pid, date, "diagnoses", spec.event_code, 1.0))
            bins[month] = dict(sorted(b.items()))
            gt_bins.append({
                "month": month,
                "z": [zl[row].tolist() for zl in s.z],
                "t": float(s.t[row]),
                "x_real": [float(x) if mm else None for x, mm in zip(s.x_real[row], m[row])],
                "x_bin": s.x_bin[row].tolist(),
                "log_joint": float(lj[j]),
            })
        bins_out[pid] = bins
        patients.append({"patient_id": pid, "event_month": s.event_month, "censored": s.censored, "bins": gt_bins})

    truth = {
        "format_version": GT_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "def_config": cfg.to_dict(),
        "registry": registry.to_dict(),
        "params": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in params.flat().items()},
        "param_log_prior": float(param_log_prior(cfg, params)),
        "units": {"loc": loc.tolist(), "scale": scale.tolist()},
        "event_code": spec.event_code,
        "patients": patients,
    }
    return Cohort(events, truth, bins_out, registry, cfg, params)


def truth_params(truth: dict) -> DefModelParams:
    return DefModelParams.from_flat(
        {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in truth["params"].items()}
    )


def perturb_params(params: DefModelParams, noise_sd: float, rng: RngStream) -> DefModelParams:
    """Add independent Gaussian noise to every unconstrained parameter."""
    return params.map(lambda name, v: np.asarray(v) + rng.child(name).normal(np.shape(v), scale=noise_sd)
                      if noise_sd else np.array(v, copy=True))


def write_truth(truth: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth, fh, sort_keys=True, separators=(",", ":"))
