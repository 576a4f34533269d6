"""Reference survival models without latent structure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import distributions as dist


@dataclass
class InterceptWeibull:
    """Single Weibull for every observation, fixed shape, scale by maximum likelihood."""

    scale: float
    shape: float = 2.0

    @classmethod
    def fit(cls, t, event, shape: float = 2.0) -> "InterceptWeibull":
        t = np.asarray(t, dtype=np.float64)
        d = int(np.sum(event))
        if d == 0:
            raise ValueError("no events to fit a scale")
        return cls(float((np.sum(t**shape) / d) ** (1.0 / shape)), shape)

    def log_lik(self, t, event) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        ev = np.asarray(event, dtype=bool)
        return np.where(ev, dist.weibull_log_pdf(t, self.scale, self.shape),
                        dist.weibull_log_survival(t, self.scale, self.shape))


@dataclass
class LinearWeibull:
    """Weibull regression with ``log scale = x . beta + beta0``.

    Fit on complete cases only; at prediction missing covariates are
    imputed with the training mean.
    """

    beta: np.ndarray
    beta0: float
    shape: float
    column_mean: np.ndarray

    @classmethod
    def fit(cls, x, t, event, shape: float | None = 2.0, l2: float = 1e-3) -> "LinearWeibull":
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        ev = np.asarray(event, dtype=np.float64)
        n, p = x.shape
        log_t = np.log(t)

        def nll(theta):
            beta, b0 = theta[:p], theta[p]
            k = shape if shape is not None else np.exp(theta[p + 1])
            eta = x @ beta + b0
            r = np.exp(k * (log_t - eta))
            ll = ev * (np.log(k) - eta + (k - 1.0) * (log_t - eta)) - r
            grad_eta = ev * (-k) + k * r
            g = np.concatenate([x.T @ grad_eta, [grad_eta.sum()]])
            out = -ll.sum() + 0.5 * l2 * beta @ beta
            gout = -g
            gout[:p] += l2 * beta
            if shape is None:
                dk = ev * (1.0 / k + (log_t - eta)) - r * (log_t - eta)
                gout = np.concatenate([gout, [-(dk.sum()) * k]])
            return out, gout

        base = InterceptWeibull.fit(t, ev.astype(bool), shape if shape is not None else 2.0)
        theta0 = np.concatenate([np.zeros(p), [np.log(base.scale)]] + ([[np.log(2.0)]] if shape is None else []))
        res = optimize.minimize(nll, theta0, jac=True, method="L-BFGS-B")
        k = shape if shape is not None else float(np.exp(res.x[p + 1]))
        return cls(res.x[:p].copy(), float(res.x[p]), k, x.mean(axis=0) if n else np.zeros(p))

    def scale(self, x, mask=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if mask is not None:
            x = np.where(mask, x, self.column_mean)
        return np.exp(x @ self.beta + self.beta0)

    def predicted_mean(self, x, mask=None) -> np.ndarray:
        return dist.weibull_mean(self.scale(x, mask), self.shape)
