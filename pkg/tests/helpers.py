"""Small shared builders for the test suite."""
import numpy as np

from survdef.compute import RngStream, Tape, backward
from survdef.model import Batch, ChannelRegistry, DefConfig, init_params

# one channel of each kind that carries a likelihood
THREE = ChannelRegistry.from_pairs([("lab_a", "labs"), ("vital_a", "vitals"), ("med_a", "meds")])


def random_params(cfg: DefConfig, registry: ChannelRegistry, seed: int, sd: float = 0.5):
    params = init_params(DefConfig(**{**cfg.to_dict(), "init_sd": sd}), registry, RngStream(seed))
    r = RngStream(seed).child("biases")
    return params.map(lambda k, v: v + r.child(k).normal(np.shape(v), scale=0.3) if k.endswith(("b1", "b2", "real_b", "binary_c")) else v)


def random_batch(registry: ChannelRegistry, n: int, seed: int, censored_every: int = 2) -> Batch:
    r = np.random.default_rng(seed)
    R, C = registry.num_real, registry.num_binary
    return Batch(
        x_real=r.normal(size=(n, R)),
        m_real=r.uniform(size=(n, R)) < 0.8,
        x_bin=(r.uniform(size=(n, C)) < 0.4).astype(float),
        m_bin=np.ones((n, C), dtype=bool),
        t=r.uniform(0.5, 4.0, n),
        event=np.arange(n) % censored_every != 0,
    )


def random_latents(cfg: DefConfig, n: int, seed: int) -> list[np.ndarray]:
    r = np.random.default_rng(seed)
    return [r.normal(size=(n, d)) for d in cfg.layer_dims]


def tape_gradient(fn, arrays: dict[str, np.ndarray]):
    """Value and gradient of scalar ``fn(vars)`` with respect to each named array."""
    tape = Tape()
    leaves = {k: tape.variable(v) for k, v in arrays.items()}
    out = fn(leaves)
    g = backward(tape, out)
    return float(out.value), {k: g[v] for k, v in leaves.items()}


def fd_gradient(fn, arrays: dict[str, np.ndarray], h: float = 1e-5):
    out = {}
    for k, v in arrays.items():
        g = np.zeros_like(v, dtype=np.float64)
        for i in np.ndindex(np.shape(v)):
            plus = {kk: np.array(vv, dtype=np.float64, copy=True) for kk, vv in arrays.items()}
            minus = {kk: np.array(vv, dtype=np.float64, copy=True) for kk, vv in arrays.items()}
            plus[k][i] += h
            minus[k][i] -= h
            g[i] = (float(fn(plus)) - float(fn(minus))) / (2 * h)
        out[k] = g
    return out


def three_patient_fixture():
    """Raw events for three patients plus the aligned observations worked out by hand.

    Months are calendar months of 2020 (``m`` means 2020-m).
    * E1 has bins in months 3, 5 and 9 and an MI code in month 9; two lab
      values in month 3 average to 12.
    * C2 never has an event; bins 2 and 4 are censored at 2.5 and 0.5.
    * E3 has code 410.1 in month 7 and 413 in month 4; the earlier one wins,
      so only months 1 and 2 survive with times 3 and 2.
    """
    import datetime as dt

    from survdef.alignment import AlignedObservation, RawEvent, month_index

    def ev(pid, m, group, channel, value=1.0, day=5):
        return RawEvent(pid, dt.date(2020, m, day), group, channel, value)

    events = [
        ev("E1", 3, "labs", "ldl", 10.0, day=2),
        ev("E1", 3, "labs", "ldl", 14.0, day=20),
        ev("E1", 3, "meds", "statin"),
        ev("E1", 5, "vitals", "sbp", 130.0),
        ev("E1", 9, "vitals", "sbp", 150.0),
        ev("E1", 9, "diagnoses", "410.1"),
        ev("C2", 2, "labs", "ldl", 9.0),
        ev("C2", 4, "diagnoses", "250.0"),
        ev("E3", 1, "vitals", "sbp", 120.0),
        ev("E3", 1, "meds", "statin"),
        ev("E3", 2, "labs", "ldl", 11.0),
        ev("E3", 2, "diagnoses", "250.0"),
        ev("E3", 4, "diagnoses", "413"),
        ev("E3", 4, "labs", "ldl", 13.0),
        ev("E3", 7, "diagnoses", "410.1"),
    ]
    m = lambda k: month_index(dt.date(2020, k, 1))
    expected = [
        AlignedObservation("C2", m(2), 2.5, False, {"ldl": 9.0}),
        AlignedObservation("C2", m(4), 0.5, False, {"250.0": 1.0}),
        AlignedObservation("E1", m(3), 6.0, True, {"ldl": 12.0, "statin": 1.0}),
        AlignedObservation("E1", m(5), 4.0, True, {"sbp": 130.0}),
        AlignedObservation("E3", m(1), 3.0, True, {"sbp": 120.0, "statin": 1.0}),
        AlignedObservation("E3", m(2), 2.0, True, {"ldl": 11.0, "250.0": 1.0}),
    ]
    return events, expected


def align_all(events, definition=None):
    from survdef.alignment import EventDefinition, align, bin_monthly, group_events

    definition = definition or EventDefinition()
    out = []
    for evs in group_events(events).values():
        out.extend(align(bin_monthly(evs), definition))
    return out


def elbo_crn_fd_errors(seed: int, replicates: int = 500, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error of the ELBO gradient against central differences under common random numbers.

    A small instance (dims <= 3, three channels, two observations) is
    replicated ``replicates`` times with weight ``1 / replicates`` each, so
    one evaluation averages that many reparameterised draws; the noise is
    frozen across the perturbed evaluations.
    """
    from survdef.inference import VariationalFactors, elbo_estimate
    from survdef.model import DefConfig, DefModelParams

    r = np.random.default_rng(seed)
    dims = tuple(int(d) for d in r.integers(1, 4, size=int(r.integers(1, 3))))
    cfg = DefConfig(layer_dims=dims)
    params = random_params(cfg, THREE, seed)
    batch = random_batch(THREE, 2, seed)
    factors = VariationalFactors([r.normal(size=(2, d)) * 0.5 for d in dims],
                                 [r.normal(size=(2, d)) * 0.3 - 0.5 for d in dims])
    idx = np.repeat(np.arange(2), replicates)
    rep_batch = batch.take(idx)
    w = np.full(idx.size, 1.0 / replicates)
    eps = [r.normal(size=(1, idx.size, d)) for d in dims]

    def value(flat: dict) -> float:
        p = DefModelParams.from_flat({k: v for k, v in flat.items() if not k.startswith(("mu.", "pre_sigma."))})
        f = VariationalFactors.from_flat({k: v for k, v in flat.items() if k.startswith(("mu.", "pre_sigma."))})
        est = elbo_estimate(cfg, p, f.take(idx), rep_batch, w, THREE, RngStream(0), eps=eps, chunk_size=idx.size,
                            param_grads=False)
        return est.value

    est = elbo_estimate(cfg, params, factors.take(idx), rep_batch, w, THREE, RngStream(0), eps=eps,
                        chunk_size=idx.size)
    analytic = dict(est.param_grads)
    for l in range(len(dims)):
        for name, g in (("mu", est.mu_grads[l]), ("pre_sigma", est.pre_grads[l])):
            acc = np.zeros((2, dims[l]))
            np.add.at(acc, idx, g)
            analytic[f"{name}.{l}"] = acc
    flat = {**params.flat(), **factors.flat()}
    numeric = fd_gradient(value, flat, h)
    errors = {}
    for k in flat:
        scale = max(np.max(np.abs(numeric[k])), 1e-3)
        errors[k] = float(np.max(np.abs(analytic[k] - numeric[k])) / scale)
    return errors


def elbo_bound_gap(seed: int = 0, steps: int = 1500, mc_eval: int = 200000) -> tuple[float, float]:
    """(quadrature log-evidence, converged ELBO) on a 1-latent, 1-channel, 3-observation instance.

    Parameters are held fixed; only the per-observation Gaussian factors are
    optimised. Both quantities exclude the parameter prior.
    """
    from scipy import integrate

    from survdef.compute import RngStream as Rs
    from survdef.inference import OptimizerState, VariationalFactors, elbo_estimate, inverse_softplus
    from survdef.model import Batch, ChannelRegistry, DefConfig, init_params, local_log_joint

    reg = ChannelRegistry.from_pairs([("lab_a", "labs")])
    cfg = DefConfig(layer_dims=(1,))
    p = init_params(cfg, reg, Rs(seed))
    p.obs_heads.real_W = np.array([[1.2]])
    p.obs_heads.real_b = np.array([0.1])
    p.weibull_head.a = np.array([0.7])
    p.weibull_head.b = np.array(1.0)
    batch = Batch(np.array([[1.5], [-0.4], [0.3]]), np.ones((3, 1), bool), np.zeros((3, 0)), np.zeros((3, 0), bool),
                  t=np.array([0.8, 2.5, 1.2]), event=np.array([True, True, False]))

    def log_joint_at(z, i):
        return float(local_log_joint(cfg, p, [np.array([[z]])], batch.take(np.array([i])), reg)[0])

    evidence = 0.0
    for i in range(3):
        # integrand peaks within a few units of the origin; log-shift for stability
        zs = np.linspace(-12, 12, 4001)
        peak = max(log_joint_at(z, i) for z in zs[::40])
        val, _ = integrate.quad(lambda z: np.exp(log_joint_at(z, i) - peak), -12, 12, limit=400, epsabs=1e-13)
        evidence += peak + np.log(val)

    factors = VariationalFactors([np.zeros((3, 1))], [np.full((3, 1), float(inverse_softplus(0.5)))])
    state = OptimizerState.zeros_like(factors.flat())
    values = factors.flat()
    from survdef.inference import optimizer_step

    ones = np.ones(3)
    root = Rs(seed + 1)
    for s in range(steps):
        lr = 0.02 if s < steps // 2 else 0.004
        est = elbo_estimate(cfg, p, factors, batch, ones, reg, root.child(("step", s)), mc_samples=16,
                            param_grads=False, include_prior=False)
        grads = {"mu.0": est.mu_grads[0], "pre_sigma.0": est.pre_grads[0]}
        optimizer_step(state, values, grads, lr)
    idx = np.repeat(np.arange(3), mc_eval)
    est = elbo_estimate(cfg, p, factors.take(idx), batch.take(idx), np.full(idx.size, 1.0 / mc_eval), reg,
                        root.child("eval"), chunk_size=idx.size, param_grads=False, include_prior=False)
    return float(evidence), float(est.value)
