"""Log densities, survival functions and samplers.

Log densities are written against the primitives in
:mod:`survdef.compute`, so they take plain arrays or tape variables for
their parameters. Observed data (times, values, activity bits) are always
plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .compute import RngStream, Var, exp, log, log1mexp, square, value_of

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class WeibullParams:
    scale: float
    shape: float = 2.0

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError(f"Weibull scale and shape must be positive, got {self.scale}, {self.shape}")


@dataclass(frozen=True)
class StudentTParams:
    location: float
    dof: float = 4.0

    def __post_init__(self):
        if not self.dof > 0:
            raise ValueError(f"degrees of freedom must be positive, got {self.dof}")


def weibull_log_pdf(t, scale, shape=2.0):
    """log[k/scale (t/scale)^(k-1) exp(-(t/scale)^k)] for t > 0."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("Weibull density needs t > 0")
    log_ratio = np.log(t) - log(scale)
    return np.log(shape) - log(scale) + (shape - 1.0) * log_ratio - exp(shape * log_ratio)


def weibull_log_survival(t, scale, shape=2.0):
    """log P(T > t) = -(t/scale)^k."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("Weibull survival needs t >= 0")
    positive = t > 0
    log_t = np.log(np.where(positive, t, 1.0))
    return -exp(shape * (log_t - log(scale))) * positive.astype(np.float64)


def weibull_cdf(t, scale, shape=2.0):
    t = np.asarray(t, dtype=np.float64)
    return -np.expm1(-np.power(np.maximum(t, 0.0) / scale, shape))


def weibull_mean(scale, shape=2.0):
    return np.asarray(scale) * special.gamma(1.0 + 1.0 / shape)


def weibull_quantile(p, scale, shape=2.0):
    return scale * np.power(-np.log1p(-np.asarray(p)), 1.0 / shape)


def weibull_sample(params: WeibullParams, rng: RngStream, n: int | None = None):
    """Inverse-CDF draw ``scale * (-log u)^(1/k)``."""
    u = rng.uniform(1 if n is None else n)
    t = weibull_from_uniform(u, params.scale, params.shape)
    return float(t[0]) if n is None else t


def weibull_from_uniform(u, scale, shape=2.0):
    return scale * np.power(-np.log(u), 1.0 / shape)


def student_t_log_norm(dof: float) -> float:
    return float(special.gammaln((dof + 1.0) / 2.0) - special.gammaln(dof / 2.0) - 0.5 * np.log(dof * np.pi))


def student_t_log_pdf(x, location, dof=4.0):
    """Unit-scale Student-t log density centred at ``location``."""
    x = np.asarray(x, dtype=np.float64)
    return student_t_log_norm(dof) - 0.5 * (dof + 1.0) * log(1.0 + square(x - location) * (1.0 / dof))


def student_t_from_uniform(u, location, dof=4.0):
    return location + stats.t.ppf(u, dof)


def sparse_bernoulli_log_pmf(active, rate):
    """Bernoulli with success probability ``1 - exp(-rate)``.

    ``active`` is 0/1 data. The success branch uses ``log(-expm1(-rate))``.
    """
    active = np.asarray(active, dtype=np.float64)
    if isinstance(rate, Var):
        return active * log1mexp(rate) - (1.0 - active) * rate
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0):
        raise ValueError("rate must be non-negative")
    with np.errstate(divide="ignore"):
        on = np.log(-np.expm1(-rate))
    return np.where(active > 0, on, -rate)


def gaussian_log_pdf(x, mean, sd):
    if not isinstance(sd, Var) and np.any(np.asarray(sd) <= 0):
        raise ValueError("sd must be positive")
    return -0.5 * LOG_2PI - log(sd) - 0.5 * square((x - mean) / sd)


def gaussian_log_pdf_var(x, mean, var):
    """Gaussian log density parameterised by variance."""
    return -0.5 * LOG_2PI - 0.5 * log(var) - 0.5 * square(x - mean) / var


def lognormal_log_pdf(x, sd=1.0):
    """Density of ``x`` when ``log x ~ Normal(0, sd)``."""
    log_x = log(x)
    return gaussian_log_pdf(log_x, 0.0, sd) - log_x


__all__ = [
    "WeibullParams",
    "StudentTParams",
    "weibull_log_pdf",
    "weibull_log_survival",
    "weibull_cdf",
    "weibull_mean",
    "weibull_quantile",
    "weibull_sample",
    "student_t_log_pdf",
    "sparse_bernoulli_log_pmf",
    "gaussian_log_pdf",
    "gaussian_log_pdf_var",
    "lognormal_log_pdf",
    "value_of",
]
