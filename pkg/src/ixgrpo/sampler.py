"""Deterministic (ODE) and stochastic (Euler-Maruyama) sampling of the flow.

One step of the stochastic sampler is

    x_next = x_t + f(x_t, t, c) dt + sigma_t sqrt(dt) eps,

so the transition is Gaussian with mean x_t + f dt and per-coordinate
variance sigma_t^2 dt. With sigma_t = 0 it is a plain Euler step, which is
exactly what the ODE sampler runs.

All state arithmetic is float64; the network runs in its own dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DegenerateDensity
from .flowcore import STACK_CHANNELS, VelocityNet, decode, encode_cond
from .rng import stream
from .scenegen import IntrinsicStack

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 15
    noise_level: float = 0.7
    sigma_schedule: str = "flow_ratio"  # or "constant"
    sigma_max: float = 3.0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.sigma_schedule not in ("flow_ratio", "constant"):
            raise ConfigError(f"unknown sigma schedule {self.sigma_schedule!r}")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1, dtype=np.float64) / self.steps


def sigma_at(t: float, cfg: SamplerConfig) -> float:
    """Noise scale of the step that starts at time t.

    ``flow_ratio`` is a*sqrt(s/(1-s)) in noise-time s = 1-t: large near the
    noise end, vanishing as the sample reaches the data end.
    """
    a = cfg.noise_level
    if a == 0.0:
        return 0.0
    if cfg.sigma_schedule == "constant":
        return a
    if t <= 0.0:
        return cfg.sigma_max
    return min(cfg.sigma_max, a * math.sqrt((1.0 - t) / t))


def _velocity(net: VelocityNet, x: torch.Tensor, t: float, cond: torch.Tensor, grad: bool = False) -> torch.Tensor:
    tt = torch.full((x.shape[0],), t, dtype=net.dtype)
    if cond.shape[0] == 1 and x.shape[0] > 1:
        cond = cond.expand(x.shape[0], *cond.shape[1:])
    if grad:
        return net(x.to(net.dtype), tt, cond.to(net.dtype)).to(torch.float64)
    with torch.no_grad():
        return net(x.to(net.dtype), tt, cond.to(net.dtype)).to(torch.float64)


def gaussian_log_prob(x_next: torch.Tensor, mean: torch.Tensor, std: float) -> torch.Tensor:
    """Isotropic Gaussian log-density per batch member (float64, pairwise sums)."""
    if std <= 0:
        raise DegenerateDensity("zero-variance transition has no density")
    d = x_next[0].numel()
    z = ((x_next - mean) / std).reshape(x_next.shape[0], -1)
    return -0.5 * torch.sum(z * z, dim=1) - d * math.log(std) - 0.5 * d * LOG_2PI


def step_sde(
    net: VelocityNet,
    x_t: torch.Tensor,
    t: float,
    cond: torch.Tensor,
    cfg: SamplerConfig,
    noise: torch.Tensor | None,
    want_log_prob: bool = True,
):
    """One Euler-Maruyama step. Returns (x_next, log_prob or None)."""
    dt = cfg.dt
    if t + dt > 1.0 + 1e-12:
        raise ValueError("step would overshoot t = 1")
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    cond = torch.as_tensor(cond, dtype=torch.float64)
    f = _velocity(net, x_t, t, cond)
    mean = x_t + f * dt
    sigma = sigma_at(t, cfg)
    if sigma == 0.0:
        if want_log_prob:
            raise DegenerateDensity(f"sigma is 0 at t={t}; no log-probability")
        return mean, None
    std = sigma * math.sqrt(dt)
    x_next = mean + std * torch.as_tensor(noise, dtype=torch.float64)
    lp = gaussian_log_prob(x_next, mean, std) if want_log_prob else None
    return x_next, lp


@dataclass
class Trajectory:
    states: torch.Tensor  # (T+1, 8, H, W) float64
    noises: torch.Tensor | None  # (T, 8, H, W)
    log_probs: torch.Tensor | None  # (T,) float64, None when every sigma is 0
    times: np.ndarray
    sigmas: np.ndarray
    cfg: SamplerConfig = field(default_factory=SamplerConfig)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]

    @property
    def prediction(self) -> IntrinsicStack:
        return decode(self.final)

    @property
    def has_log_probs(self) -> bool:
        return self.log_probs is not None


def _cond_tensor(cond) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(cond) if not isinstance(cond, torch.Tensor) else cond, dtype=torch.float64)
    if c.ndim == 3 and c.shape[-1] == 3:  # H x W x 3 rgb in [0, 1]
        c = torch.as_tensor(encode_cond(c.numpy()))
    if c.ndim == 3:
        c = c[None]
    return c


def sample_batch(
    net: VelocityNet,
    cond,
    cfg: SamplerConfig,
    x0: torch.Tensor,
    noises: torch.Tensor | None,
) -> list[Trajectory]:
    """Run B trajectories in one batch.

    ``x0`` is (B, 8, H, W); ``noises`` is (T, B, 8, H, W) or None when no step
    is stochastic.
    """
    cfg.validate()
    x = torch.as_tensor(x0, dtype=torch.float64)
    b = x.shape[0]
    c = _cond_tensor(cond)
    if c.shape[0] != b:
        c = c.expand(b, *c.shape[1:])
    times = cfg.times()
    sigmas = np.array([sigma_at(t, cfg) for t in times[:-1]])
    stochastic = bool(np.any(sigmas > 0))
    if stochastic and noises is None:
        raise ValueError("stochastic sampling needs noises")
    states = [x]
    lps = []
    for k in range(cfg.steps):
        eps = noises[k] if stochastic else None
        x, lp = step_sde(net, x, float(times[k]), c, cfg, eps, want_log_prob=sigmas[k] > 0)
        states.append(x)
        lps.append(lp)
    all_lp = None
    if all(lp is not None for lp in lps):
        all_lp = torch.stack(lps, dim=1)  # (B, T)
    st = torch.stack(states, dim=1)  # (B, T+1, ...)
    out = []
    for i in range(b):
        out.append(
            Trajectory(
                states=st[i],
                noises=None if not stochastic else torch.as_tensor(noises)[:, i].to(torch.float64),
                log_probs=None if all_lp is None else all_lp[i],
                times=times,
                sigmas=sigmas,
                cfg=cfg,
            )
        )
    return out


def draw_x0(seed: int, shape: tuple[int, int], *labels) -> torch.Tensor:
    h, w = shape
    return torch.as_tensor(stream(seed, "x0", *labels).standard_normal((STACK_CHANNELS, h, w)))


def draw_noises(seed: int, cfg: SamplerConfig, shape: tuple[int, int], *labels) -> torch.Tensor:
    h, w = shape
    return torch.as_tensor(stream(seed, "eps", *labels).standard_normal((cfg.steps, STACK_CHANNELS, h, w)))


def sample_sde(net: VelocityNet, cond, cfg: SamplerConfig, seed: int, *labels) -> Trajectory:
    c = _cond_tensor(cond)
    shape = tuple(c.shape[-2:])
    x0 = draw_x0(seed, shape, *labels)[None]
    noises = draw_noises(seed, cfg, shape, *labels)[:, None] if cfg.noise_level > 0 else None
    return sample_batch(net, c, cfg, x0, noises)[0]


def sample_ode(net: VelocityNet, cond, cfg: SamplerConfig = SamplerConfig(steps=50, noise_level=0.0), seed: int = 0, *labels) -> IntrinsicStack:
    """Deterministic sample; the same code path as ``sample_sde`` with a = 0."""
    if cfg.noise_level != 0.0:
        cfg = SamplerConfig(cfg.steps, 0.0, cfg.sigma_schedule, cfg.sigma_max)
    return sample_sde(net, cond, cfg, seed, *labels).prediction


def sample_group(net: VelocityNet, cond, cfg: SamplerConfig, group: int, seed: int, *labels) -> list[Trajectory]:
    """G trajectories with independent x0 and independent step noise."""
    if group < 2:
        raise ValueError("group size must be >= 2")
    if cfg.noise_level <= 0:
        raise ValueError("group sampling needs noise_level > 0")
    c = _cond_tensor(cond)
    shape = tuple(c.shape[-2:])
    x0 = torch.stack([draw_x0(seed, shape, *labels, i) for i in range(group)])
    noises = torch.stack([draw_noises(seed, cfg, shape, *labels, i) for i in range(group)], dim=1)
    return sample_batch(net, c, cfg, x0, noises)


def step_log_prob_under(net_other: VelocityNet, traj: Trajectory, k: int, cond) -> float:
    """Log-density of the recorded step k transition under another network."""
    sigma = float(traj.sigmas[k])
    if sigma == 0.0 or not traj.has_log_probs:
        raise DegenerateDensity("trajectory step was deterministic")
    dt = traj.cfg.dt
    x = traj.states[k][None]
    f = _velocity(net_other, x, float(traj.times[k]), _cond_tensor(cond))
    return float(gaussian_log_prob(traj.states[k + 1][None], x + f * dt, sigma * math.sqrt(dt))[0])


def kl_from_velocities(f: torch.Tensor, f_ref: torch.Tensor, dt: float, sigma: float) -> torch.Tensor:
    """KL between N(x + f dt, s^2) and N(x + f_ref dt, s^2), s^2 = sigma^2 dt, per member."""
    if sigma <= 0:
        raise DegenerateDensity("KL undefined for zero-noise steps")
    diff = (f - f_ref).reshape(f.shape[0], -1)
    return torch.sum(diff * diff, dim=1) * dt / (2.0 * sigma * sigma)


def step_kl(net: VelocityNet, net_ref: VelocityNet, x_t, t: float, cond, cfg: SamplerConfig) -> float:
    sigma = sigma_at(t, cfg)
    x = torch.as_tensor(x_t, dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    c = _cond_tensor(cond)
    kl = kl_from_velocities(_velocity(net, x, t, c), _velocity(net_ref, x, t, c), cfg.dt, sigma)
    return float(kl.sum())
