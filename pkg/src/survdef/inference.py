"""Black-box variational inference with MAP estimates of the shared parameters.

Each training observation owns a mean-field Gaussian factor over every
latent layer (``sd = softplus(pre_sigma)``). An iteration draws a weighted
minibatch, builds reparameterised ELBO gradients on a tape, and takes an
RMSProp step with Nesterov momentum on the shared parameters and on the
factors of the sampled observations.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import evaluation
from .alignment import AlignedDataset
from .baselines import InterceptWeibull
from .compute import NumericDomainError, RngStream, Tape, backward, log, softplus, sum_
from .model import (
    Batch,
    ChannelRegistry,
    DefConfig,
    DefModelParams,
    init_params,
    local_log_joint,
    param_log_prior,
)

log_ = logging.getLogger(__name__)

HALF_LOG_2PIE = 0.5 * (1.0 + math.log(2.0 * math.pi))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class TrainConfig:
    batch_size: int = 240
    iterations: int = 6000
    learning_rate: float = 1e-4
    # None -> same as learning_rate
    factor_learning_rate: float | None = None
    momentum: float = 0.9
    rmsprop_decay: float = 0.9
    eps: float = 1e-8
    mc_samples_per_obs: int = 1
    seed: int = 0
    sampling: str = "inverse_length"
    chunk_size: int = 64
    workers: int = 1
    init_factor_sd: float = 0.5
    init_survival_bias: bool = True
    validation_interval: int = 200
    validation_max_obs: int = 500
    infer_steps: int = 300
    infer_learning_rate: float = 0.05
    infer_mc_samples: int = 4
    predictive_mc: int = 200
    # "constant" keeps the rates fixed; "cosine" anneals them to lr_final_fraction of the start value
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be positive and iterations non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if self.sampling not in ("inverse_length", "full"):
            raise ValueError(f"unknown sampling scheme {self.sampling!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must lie in (0, 1]")

    @property
    def factor_lr(self) -> float:
        return self.learning_rate if self.factor_learning_rate is None else self.factor_learning_rate

    def rate_multiplier(self, iteration: int) -> float:
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return 1.0
        frac = min(iteration, self.iterations - 1) / (self.iterations - 1)
        f = self.lr_final_fraction
        return f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class VariationalFactors:
    """Per-observation Gaussian factors, one (N, d_l) block per layer, bottom-first."""

    mu: list[np.ndarray]
    pre_sigma: list[np.ndarray]

    @classmethod
    def init(cls, n: int, cfg: DefConfig, sd: float = 0.5) -> "VariationalFactors":
        pre = float(inverse_softplus(sd))
        return cls([np.zeros((n, d)) for d in cfg.layer_dims], [np.full((n, d), pre) for d in cfg.layer_dims])

    def __len__(self) -> int:
        return self.mu[0].shape[0]

    @property
    def sd(self) -> list[np.ndarray]:
        return [softplus(p) for p in self.pre_sigma]

    def take(self, idx) -> "VariationalFactors":
        return VariationalFactors([m[idx] for m in self.mu], [p[idx] for p in self.pre_sigma])

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"mu.{l}": m for l, m in enumerate(self.mu)}
        out.update({f"pre_sigma.{l}": p for l, p in enumerate(self.pre_sigma)})
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "VariationalFactors":
        L = sum(1 for k in flat if k.startswith("mu."))
        return cls([flat[f"mu.{l}"] for l in range(L)], [flat[f"pre_sigma.{l}"] for l in range(L)])

    def copy(self) -> "VariationalFactors":
        return VariationalFactors([m.copy() for m in self.mu], [p.copy() for p in self.pre_sigma])


@dataclass
class OptimizerState:
    """RMSProp squared-gradient averages and momentum velocities, keyed like the values."""

    avg: dict[str, np.ndarray]
    vel: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, values: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in values.items()},
                   {k: np.zeros_like(v, dtype=np.float64) for k, v in values.items()})

    def rows(self, idx) -> "OptimizerState":
        return OptimizerState({k: v[idx] for k, v in self.avg.items()}, {k: v[idx] for k, v in self.vel.items()})

    def set_rows(self, idx, other: "OptimizerState") -> None:
        for k in self.avg:
            self.avg[k][idx] = other.avg[k]
            self.vel[k][idx] = other.vel[k]


def optimizer_step(state: OptimizerState, values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   lr: float, momentum: float = 0.9, decay: float = 0.9, eps: float = 1e-8) -> bool:
    """One ascent step of RMSProp with Nesterov momentum, applied in place.

    avg <- decay * avg + (1 - decay) * g^2
    step = lr * g / sqrt(avg + eps)
    vel <- momentum * vel + step
    x   <- x + momentum * vel + step

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if values[k].shape != np.shape(g):
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}, value has {values[k].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log_.warning("non-finite gradient; step skipped")
        return False
    for k, g in grads.items():
        avg = state.avg[k]
        avg *= decay
        avg += (1.0 - decay) * g * g
        step = lr * g / np.sqrt(avg + eps)
        vel = state.vel[k]
        vel *= momentum
        vel += step
        values[k] += momentum * vel + step
    return True


def subsample_batch(record_lengths, batch_size: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` observations with probability proportional to 1 / record length.

    Draws are with replacement; ``weights = 1 / (batch_size * p)`` makes the
    weighted batch sum unbiased for the full-data sum.
    """
    lengths = np.asarray(record_lengths, dtype=np.float64)
    if lengths.size == 0:
        raise ValueError("cannot subsample an empty dataset")
    p = 1.0 / lengths
    p /= p.sum()
    cdf = np.cumsum(p)
    idx = np.minimum(np.searchsorted(cdf, rng.uniform(batch_size) * cdf[-1], side="right"), lengths.size - 1)
    return idx, 1.0 / (batch_size * p[idx])


@dataclass
class ElboEstimate:
    value: float
    param_grads: dict[str, np.ndarray] | None
    mu_grads: list[np.ndarray]
    pre_grads: list[np.ndarray]


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def elbo_estimate(cfg: DefConfig, params: DefModelParams, factors: VariationalFactors, batch: Batch, weights,
                  registry: ChannelRegistry, rng: RngStream, mc_samples: int = 1, chunk_size: int = 64,
                  workers: int = 1, include_survival: bool = True, param_grads: bool = True,
                  include_prior: bool = True, eps: list[np.ndarray] | None = None) -> ElboEstimate:
    """Reparameterised estimate of sum_n w_n (E_q[log p(x_n, t_n, z_n)] + H[q_n]) + log p(params).

    The Gaussian entropy is exact. Rows are processed in fixed-size chunks,
    each on its own tape, and chunk results are reduced in chunk order, so
    the result does not depend on ``workers``. ``eps`` (per layer, shape
    (mc_samples, B, d_l)) overrides the noise drawn from ``rng``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    B = len(batch)
    if weights.shape != (B,):
        raise ValueError("one weight per observation required")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    if len(factors) != B:
        raise ValueError("one factor per observation required")
    if eps is None:
        eps = [rng.child(("eps", l)).normal((mc_samples, B, d)) if B else np.zeros((mc_samples, 0, d))
               for l, d in enumerate(cfg.layer_dims)]
    mc_samples = eps[0].shape[0]
    entropy_const = sum(cfg.layer_dims) * HALF_LOG_2PIE

    def run(sl: slice):
        tape = Tape()
        if param_grads:
            pv, leaves = params.to_tape(tape)
        else:
            pv, leaves = params, {}
        mu = [tape.variable(m[sl]) for m in factors.mu]
        pre = [tape.variable(p[sl]) for p in factors.pre_sigma]
        sd = [softplus(p) for p in pre]
        sub = batch.take(sl)
        local = None
        for s in range(mc_samples):
            z = [mu[l] + sd[l] * eps[l][s, sl] for l in range(cfg.num_layers)]
            term = local_log_joint(cfg, pv, z, sub, registry, include_survival)
            local = term if local is None else local + term
        entropy = entropy_const
        for l in range(cfg.num_layers):
            entropy = entropy + sum_(log(sd[l]), axis=1)
        obj = sum_((local * (1.0 / mc_samples) + entropy) * weights[sl])
        g = backward(tape, obj)
        return (
            float(obj.value),
            {k: g[v] for k, v in leaves.items()} if param_grads else None,
            [g[m] for m in mu],
            [g[p] for p in pre],
        )

    slices = _chunks(B, chunk_size)
    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, slices))
    else:
        results = [run(sl) for sl in slices]

    value = 0.0
    pgrads = {k: np.zeros_like(v) for k, v in params.flat().items()} if param_grads else None
    for v, pg, _, _ in results:
        value += v
        if param_grads:
            for k in pgrads:
                pgrads[k] += pg[k]
    L = cfg.num_layers
    mu_grads = [np.concatenate([r[2][l] for r in results]) if results else np.zeros((0, cfg.layer_dims[l]))
                for l in range(L)]
    pre_grads = [np.concatenate([r[3][l] for r in results]) if results else np.zeros((0, cfg.layer_dims[l]))
                 for l in range(L)]

    if include_prior:
        if param_grads:
            tape = Tape()
            pv, leaves = params.to_tape(tape)
            prior = param_log_prior(cfg, pv)
            g = backward(tape, prior)
            value += float(prior.value)
            for k, v in leaves.items():
                pgrads[k] += g[v]
        else:
            value += float(param_log_prior(cfg, params))
    return ElboEstimate(value, pgrads, mu_grads, pre_grads)


def _factor_grads(est: ElboEstimate) -> dict[str, np.ndarray]:
    out = {f"mu.{l}": g for l, g in enumerate(est.mu_grads)}
    out.update({f"pre_sigma.{l}": g for l, g in enumerate(est.pre_grads)})
    return out


@dataclass
class TraceEntry:
    iteration: int
    elbo: float
    validation: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "elbo": self.elbo, "validation": self.validation,
                "wall_clock": self.wall_clock}


@dataclass
class TrainState:
    iteration: int
    params: DefModelParams
    factors: VariationalFactors
    param_opt: OptimizerState
    factor_opt: OptimizerState
    nan_streak: int = 0
    skipped_steps: int = 0


@dataclass
class FitResult:
    params: DefModelParams
    factors: VariationalFactors
    trace: list[TraceEntry]
    state: TrainState


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def init_state(train: AlignedDataset, cfg: TrainConfig, def_cfg: DefConfig, registry: ChannelRegistry) -> TrainState:
    params = init_params(def_cfg, registry, RngStream(cfg.seed).child("init"))
    if cfg.init_survival_bias and len(train):
        base = InterceptWeibull.fit(train.batch.t, train.batch.event, def_cfg.weibull_shape)
        params.weibull_head.b = np.array(inverse_softplus(base.scale))
    factors = VariationalFactors.init(len(train), def_cfg, cfg.init_factor_sd)
    return TrainState(
        iteration=0,
        params=params,
        factors=factors,
        param_opt=OptimizerState.zeros_like(params.flat()),
        factor_opt=OptimizerState.zeros_like(factors.flat()),
    )


def _update_factor_rows(state: TrainState, idx: np.ndarray, est: ElboEstimate, cfg: TrainConfig,
                        lr: float) -> None:
    uniq, inverse = np.unique(idx, return_inverse=True)
    grads = {}
    for k, g in _factor_grads(est).items():
        acc = np.zeros((uniq.size, g.shape[1]))
        np.add.at(acc, inverse, g)
        grads[k] = acc
    values = {k: v[uniq] for k, v in state.factors.flat().items()}
    rows = state.factor_opt.rows(uniq)
    if optimizer_step(rows, values, grads, lr, cfg.momentum, cfg.rmsprop_decay, cfg.eps):
        for k, v in state.factors.flat().items():
            v[uniq] = values[k]
        state.factor_opt.set_rows(uniq, rows)


def fit(train: AlignedDataset, cfg: TrainConfig, def_cfg: DefConfig, registry: ChannelRegistry,
        validation: AlignedDataset | None = None, state: TrainState | None = None,
        stop_at: int | None = None, callback=None) -> FitResult:
    """Run (or resume) the training loop up to ``stop_at`` (default ``cfg.iterations``).

    Iteration ``i`` draws all of its randomness from the stream
    ``RngStream(seed).child(("iter", i))``, so a resumed run continues
    exactly where an uninterrupted one would be.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    root = RngStream(cfg.seed)
    state = state if state is not None else init_state(train, cfg, def_cfg, registry)
    stop = cfg.iterations if stop_at is None else stop_at
    lengths = train.record_lengths
    trace: list[TraceEntry] = []
    val = None
    if validation is not None and len(validation):
        val = validation.take(np.arange(min(len(validation), cfg.validation_max_obs)))
    t0 = time.perf_counter()
    while state.iteration < stop:
        it = state.iteration
        it_rng = root.child(("iter", it))
        if cfg.sampling == "full":
            idx, w = np.arange(len(train)), np.ones(len(train))
        else:
            idx, w = subsample_batch(lengths, cfg.batch_size, it_rng.child("batch"))
        try:
            est = elbo_estimate(def_cfg, state.params, state.factors.take(idx), train.batch.take(idx), w, registry,
                                it_rng.child("eps"), mc_samples=cfg.mc_samples_per_obs, chunk_size=cfg.chunk_size,
                                workers=cfg.workers)
        except NumericDomainError as e:
            log_.warning("iteration %d: %s", it, e)
            est = None
        entry = TraceEntry(it, est.value if est is not None else float("nan"))
        if est is None or not np.isfinite(est.value):
            state.nan_streak += 1
            if state.nan_streak >= 2:
                raise TrainingDiverged(
                    f"ELBO non-finite at iterations {it - 1} and {it}",
                    {"iteration": it, "params": {k: v.tolist() for k, v in state.params.flat().items()},
                     "batch_index": idx.tolist()},
                )
            state.skipped_steps += 1
        else:
            state.nan_streak = 0
            mult = cfg.rate_multiplier(it)
            if not optimizer_step(state.param_opt, state.params.flat(), est.param_grads, cfg.learning_rate * mult,
                                  cfg.momentum, cfg.rmsprop_decay, cfg.eps):
                state.skipped_steps += 1
            else:
                _update_factor_rows(state, idx, est, cfg, cfg.factor_lr * mult)
        state.iteration = it + 1
        if val is not None and cfg.validation_interval and state.iteration % cfg.validation_interval == 0:
            entry.validation = validation_score(def_cfg, state.params, val, registry, cfg,
                                                root.child(("validation", state.iteration)))
        entry.wall_clock = time.perf_counter() - t0
        trace.append(entry)
        if callback is not None:
            callback(state, entry)
    return FitResult(state.params, state.factors, trace, state)


def infer_factor_for_new(cfg: DefConfig, params: DefModelParams, batch: Batch, registry: ChannelRegistry,
                         rng: RngStream, steps: int = 300, lr: float = 0.05, mc_samples: int = 4,
                         momentum: float = 0.9, decay: float = 0.9, init_sd: float = 0.5,
                         chunk_size: int = 256, workers: int = 1) -> VariationalFactors:
    """Fit fresh factors to covariates alone (no survival term), parameters held fixed.

    Returns the average of the iterates over the last quarter of the steps.
    """
    factors = VariationalFactors.init(len(batch), cfg, init_sd)
    if len(batch) == 0 or steps == 0:
        return factors
    state = OptimizerState.zeros_like(factors.flat())
    values = factors.flat()
    avg_from = steps - max(1, steps // 4)
    running = {k: np.zeros_like(v) for k, v in values.items()}
    ones = np.ones(len(batch))
    for s in range(steps):
        est = elbo_estimate(cfg, params, factors, batch, ones, registry, rng.child(("step", s)),
                            mc_samples=mc_samples, chunk_size=chunk_size, workers=workers,
                            include_survival=False, param_grads=False, include_prior=False)
        optimizer_step(state, values, _factor_grads(est), lr, momentum, decay)
        if s >= avg_from:
            for k in running:
                running[k] += values[k]
    n_avg = steps - avg_from
    return VariationalFactors.from_flat({k: v / n_avg for k, v in running.items()})


def factors_for(cfg: DefConfig, params: DefModelParams, data: AlignedDataset, registry: ChannelRegistry,
                train_cfg: TrainConfig, rng: RngStream, mask_groups: tuple[str, ...] | None = None) -> VariationalFactors:
    """Test-time factors, optionally restricting the evidence to some channel groups."""
    batch = data.batch
    if mask_groups is not None:
        batch = batch.with_masks(np.isin(registry.real_groups, mask_groups)[None, :],
                                 np.isin(registry.binary_groups, mask_groups)[None, :])
    return infer_factor_for_new(cfg, params, batch, registry, rng, steps=train_cfg.infer_steps,
                                lr=train_cfg.infer_learning_rate, mc_samples=train_cfg.infer_mc_samples,
                                init_sd=train_cfg.init_factor_sd, workers=train_cfg.workers)


def validation_score(cfg: DefConfig, params: DefModelParams, data: AlignedDataset, registry: ChannelRegistry,
                     train_cfg: TrainConfig, rng: RngStream) -> float:
    """Held-out predictive log-likelihood per observation."""
    f = factors_for(cfg, params, data, registry, train_cfg, rng.child("factors"))
    return evaluation.predictive_log_likelihood(cfg, params, f.mu[0], f.sd[0], data.batch.t, data.batch.event,
                                                train_cfg.predictive_mc, rng.child("mc"))
