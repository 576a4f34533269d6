"""Layered Gaussian latent model with a Weibull survival head.

Layers are indexed bottom-first: ``z[0]`` is the layer the observations
and the failure time condition on, ``z[-1]`` is the top layer drawn from
``Normal(0, top_prior_sd^2)``. ``links[l]`` maps ``z[l + 1]`` to the mean
and pre-variance of ``z[l]`` through a two-layer ReLU perceptron; the
variance is ``softplus(pre_variance)``.

Every function that evaluates a density is written with the
:mod:`survdef.compute` primitives, so the same code runs on plain arrays
or on tape variables (see :meth:`DefModelParams.to_tape`).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import distributions as dist
from .compute import RngStream, Tape, Var, matmul, relu, softplus, sum_, value_of

GROUPS = ("labs", "vitals", "meds", "diagnoses")
REAL_GROUPS = ("labs", "vitals")
BINARY_GROUPS = ("meds", "diagnoses")
VARIANCE_FLOOR = 1e-6
# keeps the Weibull scale representable when softplus underflows (arguments below about -745)
SCALE_FLOOR = 1e-300


@dataclass(frozen=True)
class ChannelRegistry:
    """Ordered channel names with their data-type group."""

    names: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.names) != len(self.groups):
            raise ValueError("names and groups differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate channel names")
        bad = [g for g in self.groups if g not in GROUPS]
        if bad:
            raise ValueError(f"unknown groups {sorted(set(bad))}; expected one of {GROUPS}")

    @classmethod
    def from_pairs(cls, pairs) -> "ChannelRegistry":
        pairs = list(pairs)
        return cls(tuple(n for n, _ in pairs), tuple(g for _, g in pairs))

    @property
    def real_names(self) -> tuple[str, ...]:
        return tuple(n for n, g in zip(self.names, self.groups) if g in REAL_GROUPS)

    @property
    def binary_names(self) -> tuple[str, ...]:
        return tuple(n for n, g in zip(self.names, self.groups) if g in BINARY_GROUPS)

    @property
    def real_groups(self) -> np.ndarray:
        return np.array([g for g in self.groups if g in REAL_GROUPS], dtype=object)

    @property
    def binary_groups(self) -> np.ndarray:
        return np.array([g for g in self.groups if g in BINARY_GROUPS], dtype=object)

    @property
    def num_real(self) -> int:
        return len(self.real_names)

    @property
    def num_binary(self) -> int:
        return len(self.binary_names)

    def group_of(self, name: str) -> str:
        return self.groups[self.names.index(name)]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "groups": list(self.groups)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelRegistry":
        return cls(tuple(d["names"]), tuple(d["groups"]))


@dataclass(frozen=True)
class DefConfig:
    layer_dims: tuple[int, ...] = (5, 5)
    hidden_dim: int | None = None
    top_prior_sd: float = 1.0
    weibull_shape: float = 2.0
    prior_sd_weights: float = 1.0
    prior_sd_bias: float = 1.0
    student_dof: float = 4.0
    # per-group multiplier on the summed binary log-likelihood; None -> 1 / channels in group
    group_weights: dict | None = None
    init_sd: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 1 or min(self.layer_dims) < 1:
            raise ValueError("need at least one layer and positive layer sizes")
        if not self.weibull_shape > 0:
            raise ValueError("Weibull shape must be positive")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")

    @classmethod
    def with_latent_dim(cls, k: int, num_layers: int = 2, **kwargs) -> "DefConfig":
        return cls(layer_dims=(k,) * num_layers, hidden_dim=k, **kwargs)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def latent_dim(self) -> int:
        return self.layer_dims[0]

    def hidden(self, layer: int) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.layer_dims[layer]

    def group_weight(self, group: str, registry: ChannelRegistry) -> float:
        if self.group_weights is not None and group in self.group_weights:
            return float(self.group_weights[group])
        if group in BINARY_GROUPS:
            n = sum(1 for g in registry.groups if g == group)
            return 1.0 / n if n else 1.0
        return 1.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefConfig":
        return cls(**d)


@dataclass
class PerceptronLink:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class WeibullHead:
    a: np.ndarray
    b: np.ndarray


@dataclass
class ObservationHeads:
    real_W: np.ndarray  # (K, R)
    real_b: np.ndarray  # (R,)
    binary_U: np.ndarray  # (K, C); positive weights are softplus(binary_U)
    binary_c: np.ndarray  # (C,)


@dataclass
class DefModelParams:
    links: list[PerceptronLink]
    weibull_head: WeibullHead
    obs_heads: ObservationHeads

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for i, link in enumerate(self.links):
            for name in ("W1", "b1", "W2", "b2"):
                out[f"links.{i}.{name}"] = getattr(link, name)
        out["weibull.a"] = self.weibull_head.a
        out["weibull.b"] = self.weibull_head.b
        for name in ("real_W", "real_b", "binary_U", "binary_c"):
            out[f"obs.{name}"] = getattr(self.obs_heads, name)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "DefModelParams":
        n_links = len({k.split(".")[1] for k in flat if k.startswith("links.")})
        links = [
            PerceptronLink(*(flat[f"links.{i}.{n}"] for n in ("W1", "b1", "W2", "b2")))
            for i in range(n_links)
        ]
        return cls(
            links=links,
            weibull_head=WeibullHead(flat["weibull.a"], flat["weibull.b"]),
            obs_heads=ObservationHeads(*(flat[f"obs.{n}"] for n in ("real_W", "real_b", "binary_U", "binary_c"))),
        )

    def map(self, fn) -> "DefModelParams":
        return DefModelParams.from_flat({k: fn(k, v) for k, v in self.flat().items()})

    def copy(self) -> "DefModelParams":
        return self.map(lambda _, v: np.array(v, dtype=np.float64, copy=True))

    def to_tape(self, tape: Tape) -> tuple["DefModelParams", dict[str, Var]]:
        leaves = {k: tape.variable(v) for k, v in self.flat().items()}
        return DefModelParams.from_flat(leaves), leaves


def _is_weight(name: str) -> bool:
    return name.split(".")[-1] in ("W1", "W2", "a", "real_W", "binary_U")


def init_params(cfg: DefConfig, registry: ChannelRegistry, rng: RngStream) -> DefModelParams:
    """Weights ~ Normal(0, init_sd^2), biases zero."""
    K = cfg.latent_dim
    links = []
    for l in range(cfg.num_layers - 1):
        d_in, h, d_out = cfg.layer_dims[l + 1], cfg.hidden(l), cfg.layer_dims[l]
        links.append(PerceptronLink(
            W1=rng.child(("W1", l)).normal((d_in, h), scale=cfg.init_sd),
            b1=np.zeros(h),
            W2=rng.child(("W2", l)).normal((h, 2 * d_out), scale=cfg.init_sd),
            b2=np.zeros(2 * d_out),
        ))
    head = WeibullHead(a=rng.child("a").normal((K,), scale=cfg.init_sd), b=np.zeros(()))
    R, C = registry.num_real, registry.num_binary
    obs = ObservationHeads(
        real_W=rng.child("real_W").normal((K, R), scale=cfg.init_sd),
        real_b=np.zeros(R),
        binary_U=rng.child("binary_U").normal((K, C), scale=cfg.init_sd),
        binary_c=np.zeros(C),
    )
    return DefModelParams(links, head, obs)


def _selectors(d: int) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.vstack([eye, zero]), np.vstack([zero, eye])


def link_forward(link: PerceptronLink, z_above, d_out: int):
    """Mean and variance of the layer below given the layer above."""
    hidden = relu(matmul(z_above, link.W1) + link.b1)
    out = matmul(hidden, link.W2) + link.b2
    sel_mean, sel_var = _selectors(d_out)
    mean = matmul(out, sel_mean)
    var = softplus(matmul(out, sel_var)) + VARIANCE_FLOOR
    return mean, var


def latent_log_prior(cfg: DefConfig, params: DefModelParams, z: list) -> object:
    """Per-row log p(z) summed over layers; each ``z[l]`` has shape (B, d_l)."""
    total = sum_(dist.gaussian_log_pdf(z[-1], 0.0, cfg.top_prior_sd), axis=1)
    for l in range(cfg.num_layers - 1):
        mean, var = link_forward(params.links[l], z[l + 1], cfg.layer_dims[l])
        total = total + sum_(dist.gaussian_log_pdf_var(z[l], mean, var), axis=1)
    return total


def weibull_scale(head: WeibullHead, z):
    """softplus(z . a + b); ``z`` is (K,) or (B, K)."""
    return softplus(matmul(z, head.a) + head.b) + SCALE_FLOOR


def binary_rate(heads: ObservationHeads, z):
    return softplus(matmul(z, softplus(heads.binary_U)) + heads.binary_c)


def real_location(heads: ObservationHeads, z):
    return matmul(z, heads.real_W) + heads.real_b


@dataclass
class Batch:
    """Vectorised covariates and outcomes for a set of observations.

    Missing real values may hold anything (NaN included); they are zeroed
    before use and excluded by the mask.
    """

    x_real: np.ndarray
    m_real: np.ndarray
    x_bin: np.ndarray
    m_bin: np.ndarray
    t: np.ndarray | None = None
    event: np.ndarray | None = None

    def __post_init__(self):
        self.m_real = np.asarray(self.m_real, dtype=bool)
        self.m_bin = np.asarray(self.m_bin, dtype=bool)
        self.x_real = np.where(self.m_real, np.nan_to_num(np.asarray(self.x_real, dtype=np.float64)), 0.0)
        self.x_bin = np.where(self.m_bin, np.asarray(self.x_bin, dtype=np.float64), 0.0)
        if self.x_real.shape != self.m_real.shape or self.x_bin.shape != self.m_bin.shape:
            raise ValueError("covariate values and masks differ in shape")
        if self.x_real.shape[0] != self.x_bin.shape[0]:
            raise ValueError("real and binary blocks differ in row count")
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=np.float64)
            self.event = np.asarray(self.event if self.event is not None else np.ones_like(self.t), dtype=bool)

    def __len__(self) -> int:
        return self.x_real.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(
            self.x_real[idx], self.m_real[idx], self.x_bin[idx], self.m_bin[idx],
            None if self.t is None else self.t[idx],
            None if self.event is None else self.event[idx],
        )

    def with_masks(self, m_real, m_bin) -> "Batch":
        return replace(self, m_real=self.m_real & m_real, m_bin=self.m_bin & m_bin)


def check_shapes(params: DefModelParams, batch: Batch) -> None:
    R = value_of(params.obs_heads.real_b).shape[0]
    C = value_of(params.obs_heads.binary_c).shape[0]
    if batch.x_real.shape[1] != R or batch.x_bin.shape[1] != C:
        raise ValueError(
            f"covariates have {batch.x_real.shape[1]} real / {batch.x_bin.shape[1]} binary channels; "
            f"model expects {R} / {C}"
        )


def channel_log_lik(cfg: DefConfig, params: DefModelParams, z0, batch: Batch, registry: ChannelRegistry):
    """Masked per-channel log-likelihoods, binary columns already group-weighted.

    Returns ``(real, binary)`` with shapes (B, R) and (B, C).
    """
    heads = params.obs_heads
    real = dist.student_t_log_pdf(batch.x_real, real_location(heads, z0), cfg.student_dof) * batch.m_real
    col_w = np.array([cfg.group_weight(g, registry) for g in registry.binary_groups], dtype=np.float64)
    binary = dist.sparse_bernoulli_log_pmf(batch.x_bin, binary_rate(heads, z0)) * (batch.m_bin * col_w)
    return real, binary


def survival_log_lik(cfg: DefConfig, params: DefModelParams, z0, t, event):
    scale = weibull_scale(params.weibull_head, z0)
    ev = np.asarray(event, dtype=np.float64)
    return ev * dist.weibull_log_pdf(t, scale, cfg.weibull_shape) + (1.0 - ev) * dist.weibull_log_survival(
        t, scale, cfg.weibull_shape
    )


def local_log_joint(cfg, params, z, batch: Batch, registry, include_survival: bool = True):
    """Per-row log p(x_n, t_n, z_n | params): latent prior + observed channels + survival."""
    check_shapes(params, batch)
    total = latent_log_prior(cfg, params, z)
    real, binary = channel_log_lik(cfg, params, z[0], batch, registry)
    if batch.x_real.shape[1]:
        total = total + sum_(real, axis=1)
    if batch.x_bin.shape[1]:
        total = total + sum_(binary, axis=1)
    if include_survival:
        total = total + survival_log_lik(cfg, params, z[0], batch.t, batch.event)
    return total


def param_log_prior(cfg: DefConfig, params: DefModelParams):
    """Gaussian priors on weights and biases; log-normal prior on positive binary weights."""
    total = 0.0
    for name, v in params.flat().items():
        if name == "obs.binary_U":
            total = total + sum_(dist.lognormal_log_pdf(softplus(v), cfg.prior_sd_weights))
            continue
        sd = cfg.prior_sd_weights if _is_weight(name) else cfg.prior_sd_bias
        total = total + sum_(dist.gaussian_log_pdf(v, 0.0, sd))
    return total


def log_joint(cfg: DefConfig, params: DefModelParams, z: list, obs: Batch, registry: ChannelRegistry,
              include_param_prior: bool = True):
    """Full log density of one observation: local terms plus parameter priors.

    ``z`` holds one vector per layer (bottom-first); ``obs`` is a one-row batch.
    """
    if len(obs) != 1:
        raise ValueError("log_joint takes a single observation")
    z2 = [_as_row(zl) for zl in z]
    for l, zl in enumerate(z2):
        if value_of(zl).shape[-1] != cfg.layer_dims[l]:
            raise ValueError(f"layer {l} has length {value_of(zl).shape[-1]}, expected {cfg.layer_dims[l]}")
    total = sum_(local_log_joint(cfg, params, z2, obs, registry))
    if include_param_prior:
        total = total + param_log_prior(cfg, params)
    return total


def _as_row(z):
    # (d,) -> (1, d); broadcasting in mul keeps the gradient path for tape variables
    if isinstance(z, Var):
        return z if z.ndim == 2 else z * np.ones((1, 1))
    return np.asarray(z, dtype=np.float64).reshape(1, -1)


def sample_latents(cfg: DefConfig, params: DefModelParams, rng: RngStream, n: int = 1) -> list[np.ndarray]:
    """Ancestral draw of ``n`` latent stacks, returned bottom-first as (n, d_l) arrays."""
    z: list[np.ndarray] = [None] * cfg.num_layers  # type: ignore[list-item]
    top = cfg.num_layers - 1
    z[top] = rng.child(("z", top)).normal((n, cfg.layer_dims[top]), scale=cfg.top_prior_sd)
    for l in range(top - 1, -1, -1):
        mean, var = link_forward(params.links[l], z[l + 1], cfg.layer_dims[l])
        z[l] = mean + np.sqrt(var) * rng.child(("z", l)).normal(mean.shape)
    return z


@dataclass
class SampledRecords:
    z: list[np.ndarray]
    x_real: np.ndarray
    x_bin: np.ndarray
    t: np.ndarray


def sample_record(cfg: DefConfig, params: DefModelParams, rng: RngStream, n: int = 1,
                  z: list[np.ndarray] | None = None) -> SampledRecords:
    """Forward generative draw: latents, then every channel, then the failure time.

    Pass ``z`` (bottom-first, rows = records) to condition on fixed latents.
    All channels come back observed; missingness is applied by the caller.
    """
    if z is None:
        z = sample_latents(cfg, params, rng.child("latents"), n)
    z0 = z[0]
    n = z0.shape[0]
    heads = params.obs_heads
    R, C = heads.real_b.shape[0], heads.binary_c.shape[0]
    loc = real_location(heads, z0)
    x_real = dist.student_t_from_uniform(rng.child("real").uniform(n * R).reshape(n, R), loc, cfg.student_dof)
    p_on = -np.expm1(-binary_rate(heads, z0))
    x_bin = (rng.child("binary").uniform(n * C).reshape(n, C) < p_on).astype(np.float64)
    scale = weibull_scale(params.weibull_head, z0)
    t = dist.weibull_from_uniform(rng.child("time").uniform(n), scale, cfg.weibull_shape)
    return SampledRecords(z=z, x_real=x_real, x_bin=x_bin, t=t)


@dataclass
class PredictiveSummary:
    mean: np.ndarray  # (N,) posterior-predictive mean failure time
    quantiles: dict[float, np.ndarray]
    scales: np.ndarray  # (N, S) Weibull scale per latent draw

    @property
    def risk(self) -> np.ndarray:
        return -self.mean


def mixture_quantile(scales: np.ndarray, p: float, shape: float, iters: int = 200) -> np.ndarray:
    """Quantile of an equal-weight Weibull mixture per row, by bisection."""
    lo = np.zeros(scales.shape[0])
    # upper bound: quantile of the largest-scale component
    hi = dist.weibull_quantile(p, scales.max(axis=1), shape)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cdf = dist.weibull_cdf(mid[:, None], scales, shape).mean(axis=1)
        below = cdf < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def posterior_predictive_time(cfg: DefConfig, params: DefModelParams, mu0: np.ndarray, sd0: np.ndarray,
                              num_samples: int, rng: RngStream,
                              quantiles=(0.1, 0.5, 0.9)) -> PredictiveSummary:
    """Monte Carlo summary of p(t | x) = E_q[Weibull(t; scale(z), k)].

    ``mu0`` and ``sd0`` are the (N, K) bottom-layer factor moments; only the
    bottom layer enters the survival head.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    mu0 = np.atleast_2d(mu0)
    sd0 = np.atleast_2d(sd0)
    N, K = mu0.shape
    eps = rng.normal((num_samples, N, K))
    z = mu0[None] + sd0[None] * eps
    scales = weibull_scale(params.weibull_head, z.reshape(-1, K)).reshape(num_samples, N).T
    mean = dist.weibull_mean(scales, cfg.weibull_shape).mean(axis=1)
    qs = {q: mixture_quantile(scales, q, cfg.weibull_shape) for q in quantiles}
    return PredictiveSummary(mean=mean, quantiles=qs, scales=scales)
