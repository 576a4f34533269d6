import math

import numpy as np
import pytest
from scipy import special, stats

from helpers import THREE, fd_gradient, random_batch, random_latents, random_params, tape_gradient
from survdef import distributions as dist
from survdef.compute import RngStream
from survdef.model import (
    Batch,
    ChannelRegistry,
    DefConfig,
    DefModelParams,
    WeibullHead,
    channel_log_lik,
    init_params,
    latent_log_prior,
    link_forward,
    local_log_joint,
    log_joint,
    param_log_prior,
    posterior_predictive_time,
    sample_latents,
    sample_record,
    weibull_scale,
)


def test_config_validation_and_defaults():
    cfg = DefConfig()
    assert cfg.weibull_shape == 2.0
    assert cfg.num_layers == 2
    with pytest.raises(ValueError):
        DefConfig(layer_dims=())
    with pytest.raises(ValueError):
        DefConfig(weibull_shape=0.0)
    with pytest.raises(ValueError):
        ChannelRegistry(("a",), ("imaging",))
    with pytest.raises(ValueError):
        ChannelRegistry(("a", "a"), ("labs", "labs"))
    assert DefConfig.from_dict(cfg.to_dict()) == cfg


def test_param_shapes_follow_config():
    cfg = DefConfig(layer_dims=(3, 4, 2), hidden_dim=5)
    p = init_params(cfg, THREE, RngStream(0))
    assert [l.W1.shape for l in p.links] == [(4, 5), (2, 5)]
    assert [l.W2.shape for l in p.links] == [(5, 6), (5, 8)]
    assert p.weibull_head.a.shape == (3,)
    assert p.obs_heads.real_W.shape == (3, 2)
    assert p.obs_heads.binary_U.shape == (3, 1)
    z = sample_latents(cfg, p, RngStream(1), 7)
    assert [zl.shape for zl in z] == [(7, 3), (7, 4), (7, 2)]


def test_single_layer_draws_have_top_prior_sd():
    cfg = DefConfig(layer_dims=(3,), top_prior_sd=1.7)
    p = init_params(cfg, THREE, RngStream(0))
    z = sample_latents(cfg, p, RngStream(2), 10**5)
    assert len(z) == 1
    np.testing.assert_allclose(z[0].std(axis=0), 1.7, rtol=0.02)


def test_zero_link_weights_give_constant_mean():
    cfg = DefConfig(layer_dims=(2, 3))
    p = init_params(cfg, THREE, RngStream(0))
    link = p.links[0]
    link.W1[:] = 0.0
    link.W2[:] = 0.0
    link.b2 = np.array([0.4, -1.0, 0.0, 0.0])
    mean, var = link_forward(link, np.random.default_rng(0).normal(size=(10, 3)), 2)
    np.testing.assert_array_equal(mean, np.tile([0.4, -1.0], (10, 1)))
    np.testing.assert_allclose(var, math.log(2.0) + 1e-6)


def test_bottom_layer_mean_matches_nested_monte_carlo():
    cfg = DefConfig(layer_dims=(2, 2))
    p = random_params(cfg, THREE, 3, sd=0.8)
    p.links[0].b2[:2] = [1.0, -1.5]
    z0 = sample_latents(cfg, p, RngStream(4), 10**5)[0]
    # oracle: average the conditional mean over 10^6 top-layer draws
    top = np.random.default_rng(5).normal(size=(10**6, 2))
    cond_mean, _ = link_forward(p.links[0], top, 2)
    np.testing.assert_allclose(z0.mean(axis=0), cond_mean.mean(axis=0), rtol=0.02)


def test_weibull_scale_link_values():
    head = WeibullHead(a=np.zeros(3), b=np.zeros(()))
    assert weibull_scale(head, np.zeros(3)) == pytest.approx(math.log(2.0), abs=1e-15)
    head = WeibullHead(a=np.array([10.0, 0.0]), b=np.array(30.0))
    assert abs(weibull_scale(head, np.array([2.0, 5.0])) - 50.0) < 1e-9
    r = np.random.default_rng(6)
    for _ in range(1000):
        head = WeibullHead(a=r.normal(size=3) * 5, b=np.array(r.normal() * 5))
        assert weibull_scale(head, r.normal(size=3) * 5) > 0


def _single(batch: Batch, i: int) -> Batch:
    return batch.take(np.array([i]))


def test_empty_likelihood_reduction():
    cfg = DefConfig(layer_dims=(2, 2))
    p = random_params(cfg, THREE, 1)
    z = [zl[0] for zl in random_latents(cfg, 1, 2)]
    obs = Batch(np.zeros((1, 2)), np.zeros((1, 2), bool), np.zeros((1, 1)), np.zeros((1, 1), bool),
                t=np.array([1.7]), event=np.array([True]))
    scale = weibull_scale(p.weibull_head, z[0])
    expected = (float(latent_log_prior(cfg, p, [zl[None] for zl in z])[0])
                + float(dist.weibull_log_pdf(1.7, scale, 2.0)) + float(param_log_prior(cfg, p)))
    assert float(log_joint(cfg, p, z, obs, THREE)) == pytest.approx(expected, abs=1e-12)


def test_censored_at_scale_contributes_minus_one():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 1)
    z0 = np.array([[0.3, -0.2]])
    scale = float(weibull_scale(p.weibull_head, z0)[0])
    obs = Batch(np.zeros((1, 2)), np.zeros((1, 2), bool), np.zeros((1, 1)), np.zeros((1, 1), bool),
                t=np.array([scale]), event=np.array([False]))
    with_surv = local_log_joint(cfg, p, [z0], obs, THREE)
    without = local_log_joint(cfg, p, [z0], obs, THREE, include_survival=False)
    assert float((with_surv - without)[0]) == pytest.approx(-1.0, abs=1e-12)


def _independent_log_joint(cfg, p, z, x_real, m_real, x_bin, t, event):
    """Term-by-term evaluation using scipy densities and explicit loops."""
    total = 0.0
    top = z[-1]
    total += np.sum(stats.norm.logpdf(top, 0.0, cfg.top_prior_sd))
    for l in range(cfg.num_layers - 1):
        link = p.links[l]
        h = np.maximum(z[l + 1] @ link.W1 + link.b1, 0.0)
        out = h @ link.W2 + link.b2
        d = cfg.layer_dims[l]
        var = np.logaddexp(0.0, out[d:]) + 1e-6
        total += np.sum(stats.norm.logpdf(z[l], out[:d], np.sqrt(var)))
    z0 = z[0]
    heads = p.obs_heads
    for i in range(x_real.size):
        if m_real[i]:
            total += stats.t.logpdf(x_real[i] - (z0 @ heads.real_W[:, i] + heads.real_b[i]), cfg.student_dof)
    for j in range(x_bin.size):
        rate = np.logaddexp(0.0, z0 @ np.logaddexp(0.0, heads.binary_U[:, j]) + heads.binary_c[j])
        total += math.log(1 - math.exp(-rate)) if x_bin[j] else -rate
    scale = np.logaddexp(0.0, z0 @ p.weibull_head.a + p.weibull_head.b)
    wb = stats.weibull_min(2.0, scale=scale)
    total += wb.logpdf(t) if event else wb.logsf(t)
    return total


def test_log_joint_matches_term_by_term_oracle():
    cfg = DefConfig(layer_dims=(3, 2))
    for seed in range(5):
        p = random_params(cfg, THREE, seed)
        batch = random_batch(THREE, 2, seed)
        z = random_latents(cfg, 2, seed + 10)
        for i in range(2):
            zi = [zl[i] for zl in z]
            got = float(log_joint(cfg, p, zi, _single(batch, i), THREE, include_param_prior=False))
            ref = _independent_log_joint(cfg, p, zi, batch.x_real[i], batch.m_real[i], batch.x_bin[i],
                                         batch.t[i], batch.event[i])
            assert got == pytest.approx(ref, abs=1e-10)


def test_log_joint_gradients_match_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        dims = tuple(int(d) for d in r.integers(1, 5, size=int(r.integers(1, 3))))
        cfg = DefConfig(layer_dims=dims)
        p = random_params(cfg, THREE, seed)
        obs = _single(random_batch(THREE, 1, seed), 0)
        obs.event[:] = seed % 2 == 0
        z = [zl[0] for zl in random_latents(cfg, 1, seed + 100)]
        arrays = {**p.flat(), **{f"z{l}": zl for l, zl in enumerate(z)}}

        def fn(a):
            params = DefModelParams.from_flat({k: v for k, v in a.items() if not k.startswith("z")})
            return log_joint(cfg, params, [a[f"z{l}"] for l in range(len(dims))], obs, THREE)

        _, g = tape_gradient(fn, arrays)
        num = fd_gradient(fn, arrays)
        for k in arrays:
            np.testing.assert_allclose(g[k], num[k], rtol=1e-4, atol=1e-6, err_msg=f"seed {seed} {k}")


def test_masking_one_channel_removes_exactly_its_term():
    cfg = DefConfig(layer_dims=(2, 2))
    p = random_params(cfg, THREE, 7)
    batch = random_batch(THREE, 6, 7)
    batch.m_real[:] = True
    z = random_latents(cfg, 6, 8)
    full = local_log_joint(cfg, p, z, batch, THREE)
    real, binary = channel_log_lik(cfg, p, z[0], batch, THREE)
    for c in range(2):
        m = np.ones(2, bool)
        m[c] = False
        reduced = local_log_joint(cfg, p, z, batch.with_masks(m[None], np.ones((1, 1), bool)), THREE)
        np.testing.assert_allclose(full - reduced, real[:, c], rtol=0, atol=1e-12)
    reduced = local_log_joint(cfg, p, z, batch.with_masks(np.ones((1, 2), bool), np.zeros((1, 1), bool)), THREE)
    np.testing.assert_allclose(full - reduced, binary[:, 0], rtol=0, atol=1e-12)


def test_single_layer_matches_flat_linear_model():
    cfg = DefConfig(layer_dims=(2,))
    for seed in range(10):
        p = random_params(cfg, THREE, seed)
        batch = random_batch(THREE, 3, seed)
        z0 = random_latents(cfg, 3, seed + 1)[0]
        got = local_log_joint(cfg, p, [z0], batch, THREE)
        h = p.obs_heads
        t_norm = special.gammaln(2.5) - special.gammaln(2.0) - 0.5 * math.log(4 * math.pi)
        flat = -0.5 * np.sum(z0**2, axis=1) - math.log(2 * math.pi)
        loc = z0 @ h.real_W + h.real_b
        flat = flat + np.sum(batch.m_real * (t_norm - 2.5 * np.log1p((batch.x_real - loc) ** 2 / 4.0)), axis=1)
        rate = np.logaddexp(0.0, z0 @ np.logaddexp(0.0, h.binary_U) + h.binary_c)
        flat = flat + np.sum(np.where(batch.x_bin > 0, np.log(-np.expm1(-rate)), -rate), axis=1)
        lam = np.logaddexp(0.0, z0 @ p.weibull_head.a + p.weibull_head.b)
        u = (batch.t / lam) ** 2
        flat = flat + np.where(batch.event, math.log(2.0) + np.log(batch.t) - 2 * np.log(lam) - u, -u)
        np.testing.assert_allclose(got, flat, rtol=1e-12, atol=1e-12)


def test_binary_channel_with_zero_input_activates_half_the_time():
    cfg = DefConfig(layer_dims=(2,))
    p = init_params(cfg, THREE, RngStream(0))
    p.obs_heads.binary_U[:] = -40.0
    p.obs_heads.binary_c[:] = 0.0
    draws = sample_record(cfg, p, RngStream(1), 10**5)
    assert draws.x_bin.mean() == pytest.approx(0.5, abs=0.01)


def test_real_channel_and_time_means_with_fixed_latent():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 2)
    p.obs_heads.real_b = np.array([3.0, -2.0])
    z0 = np.tile([0.5, -0.3], (10**5, 1))
    draws = sample_record(cfg, p, RngStream(3), z=[z0])
    mode = z0[0] @ p.obs_heads.real_W + p.obs_heads.real_b
    np.testing.assert_allclose(draws.x_real.mean(axis=0), mode, rtol=0.02)
    scale = float(weibull_scale(p.weibull_head, z0[0]))
    assert draws.t.mean() == pytest.approx(float(dist.weibull_mean(scale, 2.0)), rel=0.01)


def test_sampled_event_times_follow_weibull():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 4)
    z0 = np.tile([0.1, 0.4], (10**5, 1))
    t = np.sort(sample_record(cfg, p, RngStream(5), z=[z0]).t)
    scale = float(weibull_scale(p.weibull_head, z0[0]))
    emp = np.arange(1, t.size + 1) / t.size
    assert np.max(np.abs(emp - dist.weibull_cdf(t, scale, 2.0))) < 0.02


def test_shared_latent_induces_marginal_dependence():
    reg = ChannelRegistry.from_pairs([("lab_a", "labs"), ("lab_b", "labs")])
    cfg = DefConfig(layer_dims=(1,))
    p = init_params(cfg, reg, RngStream(0))
    p.obs_heads.real_W = np.array([[2.0, 2.0]])
    x = sample_record(cfg, p, RngStream(1), 20000).x_real
    assert np.corrcoef(x.T)[0, 1] > 0.3
    p.obs_heads.real_W = np.zeros((1, 2))
    x = sample_record(cfg, p, RngStream(2), 20000).x_real
    assert abs(np.corrcoef(x.T)[0, 1]) < 0.03


def test_posterior_predictive_point_mass_and_convergence():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 5)
    mu = np.array([[0.2, -0.4]])
    pm = posterior_predictive_time(cfg, p, mu, np.full((1, 2), 1e-12), 100, RngStream(0))
    exact = float(dist.weibull_mean(weibull_scale(p.weibull_head, mu[0]), 2.0))
    assert pm.mean[0] == pytest.approx(exact, rel=1e-9)
    sd = np.full((1, 2), 0.8)
    small = posterior_predictive_time(cfg, p, mu, sd, 10**4, RngStream(1))
    big = posterior_predictive_time(cfg, p, mu, sd, 10**5, RngStream(2))
    per_draw = dist.weibull_mean(small.scales[0], 2.0)
    se = per_draw.std() / math.sqrt(10**4)
    assert abs(small.mean[0] - big.mean[0]) < 3 * se


def test_raising_survival_bias_raises_predicted_mean():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 6)
    mu, sd = np.zeros((3, 2)), np.full((3, 2), 0.5)
    lo = posterior_predictive_time(cfg, p, mu, sd, 500, RngStream(9)).mean
    p.weibull_head.b = p.weibull_head.b + 0.5
    hi = posterior_predictive_time(cfg, p, mu, sd, 500, RngStream(9)).mean
    assert np.all(hi > lo)


def test_predictive_quantiles_are_ordered():
    cfg = DefConfig(layer_dims=(2,))
    p = random_params(cfg, THREE, 6)
    s = posterior_predictive_time(cfg, p, np.zeros((4, 2)), np.ones((4, 2)), 300, RngStream(1))
    assert np.all(s.quantiles[0.1] < s.quantiles[0.5])
    assert np.all(s.quantiles[0.5] < s.quantiles[0.9])
    np.testing.assert_allclose(
        [np.mean(dist.weibull_cdf(s.quantiles[0.5][i], s.scales[i], 2.0)) for i in range(4)], 0.5, atol=1e-9)


def test_shape_mismatch_is_reported():
    cfg = DefConfig(layer_dims=(2,))
    p = init_params(cfg, THREE, RngStream(0))
    bad = Batch(np.zeros((1, 3)), np.ones((1, 3), bool), np.zeros((1, 1)), np.ones((1, 1), bool),
                t=np.ones(1), event=np.ones(1, bool))
    with pytest.raises(ValueError, match="channels"):
        local_log_joint(cfg, p, [np.zeros((1, 2))], bad, THREE)
