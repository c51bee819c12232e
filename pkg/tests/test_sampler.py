import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from oracles import gaussian_logpdf_sum
from ixgrpo.errors import DegenerateDensity
from ixgrpo.flowcore import Arch, VelocityNet, decode, encode_cond
from ixgrpo.sampler import (
    SamplerConfig,
    _velocity,
    draw_x0,
    kl_from_velocities,
    sample_batch,
    sample_group,
    sample_ode,
    sample_sde,
    sigma_at,
    step_kl,
    step_log_prob_under,
    step_sde,
)

SMALL = Arch(widths=(8, 8), dilations=(1, 1), time_dim=4)


def small_net(seed=0, zero=False):
    return VelocityNet(Arch(widths=(8, 8), dilations=(1, 1), time_dim=4, zero_final=zero), seed=seed, dtype=torch.float64)


def rgb(h=6, w=6, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, 3)).astype(np.float32)


def _cond_for(img):
    return torch.as_tensor(encode_cond(img))[None]


def test_sigma_schedule():
    cfg = SamplerConfig(noise_level=0.7, sigma_max=3.0)
    assert sigma_at(0.0, cfg) == 3.0
    assert sigma_at(0.5, cfg) == pytest.approx(0.7)
    assert sigma_at(0.9, cfg) == pytest.approx(0.7 * math.sqrt(0.1 / 0.9))
    assert sigma_at(0.01, cfg) == 3.0  # capped near the noise end
    assert sigma_at(0.3, SamplerConfig(noise_level=0.5, sigma_schedule="constant")) == 0.5
    assert sigma_at(0.3, SamplerConfig(noise_level=0.0)) == 0.0


def test_zero_velocity_step_is_pure_noise():
    cfg = SamplerConfig(steps=4, noise_level=0.7)
    x = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    eps = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    x_next, lp = step_sde(small_net(zero=True), x, 0.5, torch.zeros(1, 3, 3, 3), cfg, eps)
    std = 0.7 * math.sqrt(0.25)
    assert torch.allclose(x_next, x + std * eps, rtol=0, atol=1e-15)
    want = gaussian_logpdf_sum(x_next.flatten().tolist(), x.flatten().tolist(), std)
    assert abs(float(lp[0]) - want) < 1e-10


def test_deterministic_step_is_euler():
    net = small_net(1)
    cfg = SamplerConfig(steps=5, noise_level=0.0)
    x = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    c = torch.randn(1, 3, 3, 3, dtype=torch.float64)
    x_next, lp = step_sde(net, x, 0.2, c, cfg, None, want_log_prob=False)
    assert lp is None
    assert torch.equal(x_next, x + _velocity(net, x, 0.2, c) * 0.2)
    with pytest.raises(DegenerateDensity):
        step_sde(net, x, 0.2, c, cfg, None)


def test_transition_variance_monte_carlo():
    cfg = SamplerConfig(steps=10, noise_level=0.7)
    n = 100_000
    x = torch.zeros(n, 8, 1, 1, dtype=torch.float64)
    eps = torch.as_tensor(np.random.default_rng(0).standard_normal((n, 8, 1, 1)))
    x_next, _ = step_sde(small_net(zero=True), x, 0.4, torch.zeros(1, 3, 1, 1), cfg, eps, want_log_prob=False)
    want = sigma_at(0.4, cfg) ** 2 * cfg.dt
    assert abs(float(x_next.var()) / want - 1) < 0.02


def test_log_prob_matches_scalar_oracle():
    net = small_net(2)
    cfg = SamplerConfig(steps=6)
    tr = sample_sde(net, rgb(4, 4), cfg, 9)
    for k in range(cfg.steps):
        x, x1 = tr.states[k][None], tr.states[k + 1]
        mean = x + _velocity(net, x, float(tr.times[k]), _cond_for(rgb(4, 4))) * cfg.dt
        std = tr.sigmas[k] * math.sqrt(cfg.dt)
        want = gaussian_logpdf_sum(x1.flatten().tolist(), mean.flatten().tolist(), std)
        assert abs(float(tr.log_probs[k]) - want) < 1e-10
        assert abs(step_log_prob_under(net, tr, k, rgb(4, 4)) - want) < 1e-10


def test_ode_equals_zero_noise_sde_bit_exact():
    cfg = SamplerConfig(steps=8, noise_level=0.0)
    for s in range(20):
        net = VelocityNet(SMALL, seed=s, dtype=torch.float64)
        img = rgb(5, 5, s)
        ode = sample_ode(net, img, cfg, s)
        x = draw_x0(s, (5, 5))[None]
        c = _cond_for(img)
        for k in range(cfg.steps):
            x = x + _velocity(net, x, k / cfg.steps, c) * cfg.dt
        manual = decode(x[0])
        sde = sample_batch(net, img, cfg, draw_x0(s, (5, 5))[None], None)[0]
        assert sde.log_probs is None
        for name in ("albedo", "depth", "normals", "irradiance"):
            assert np.array_equal(getattr(ode, name), getattr(manual, name))
            assert np.array_equal(getattr(ode, name), getattr(sde.prediction, name))


def test_zero_velocity_ode_returns_decoded_noise():
    img = rgb(4, 4)
    out = sample_ode(small_net(zero=True), img, SamplerConfig(steps=7, noise_level=0.0), 3)
    ref = decode(draw_x0(3, (4, 4)))
    assert np.array_equal(out.depth, ref.depth)


def test_closed_form_kl_matches_quadrature():
    dt, sigma = 0.1, 0.6
    s = sigma * math.sqrt(dt)
    f, f_ref = 0.8, -0.3
    p, q = stats.norm(f * dt, s), stats.norm(f_ref * dt, s)
    quad, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -np.inf, np.inf)
    got = kl_from_velocities(torch.tensor([[f]]), torch.tensor([[f_ref]]), dt, sigma)
    assert abs(float(got[0]) - quad) < 1e-8


def test_step_kl_identical_and_distinct_nets():
    cfg = SamplerConfig()
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    c = _cond_for(rgb(4, 4))
    a, b = small_net(0), small_net(1)
    for t in (0.0, 0.3, 0.8):
        assert step_kl(a, a, x, t, c, cfg) == 0.0
        assert step_kl(a, b, x, t, c, cfg) > 0.0
    with pytest.raises(DegenerateDensity):
        step_kl(a, b, x, 0.3, c, SamplerConfig(noise_level=0.0))


def test_group_sampling():
    net = small_net(4)
    cfg = SamplerConfig(steps=5)
    g1 = sample_group(net, rgb(4, 4), cfg, 3, 11, "x")
    g2 = sample_group(net, rgb(4, 4), cfg, 3, 11, "x")
    assert len(g1) == 3
    assert g1[0].states.shape == (6, 8, 4, 4) and g1[0].log_probs.shape == (5,)
    for a, b in zip(g1, g2):
        assert torch.equal(a.states, b.states)
    assert not torch.equal(g1[0].states[0], g1[1].states[0])
    with pytest.raises(ValueError):
        sample_group(net, rgb(4, 4), cfg, 1, 0)
    with pytest.raises(ValueError):
        sample_group(net, rgb(4, 4), SamplerConfig(noise_level=0.0), 2, 0)
