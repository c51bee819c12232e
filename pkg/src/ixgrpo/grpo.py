"""Group-relative policy optimization driven by pairwise judge rewards.

Per training image: pick a modality, roll out a group of stochastic
samples, score each against the judge's answers on a shared set of point
pairs, standardize the scores within the group and take one clipped
policy-gradient step with a KL penalty toward the frozen starting network.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, JudgeUnavailable, NumericError, RewardUnavailable, SamplingExhausted
from .flowcore import (
    AdamW,
    EncodedDataset,
    OptimConfig,
    VelocityNet,
    apply_update,
    clone_net,
    cosine_lr,
    flat_grad,
    flow_match_loss,
)
from .judge import AMBIGUOUS, CODE, Judge, JudgeConfig, Judgment, Modality, PointPair, relation_codes
from .metrics import poisson_integrate
from .rng import derive_seed, stream
from .sampler import SamplerConfig, Trajectory, _cond_tensor, gaussian_log_prob, kl_from_velocities, sample_group
from .scenegen import IntrinsicStack, SceneGenConfig

log = logging.getLogger(__name__)

ADV_GUARD = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    n_pairs: int = 40
    steps: int = 15
    noise_level: float = 0.7
    sigma_schedule: str = "flow_ratio"
    sigma_max: float = 3.0
    clip_eps: float = 0.2
    beta: float = 0.01
    epochs: int = 3
    lr: float = 1e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    reward: str = "judge"  # judge | dn
    ambiguous: str = "disagree"  # disagree | drop
    interleave_flow_matching: bool = False
    fm_batch_size: int = 16
    modalities: tuple[str, ...] = ("depth", "normals", "irradiance", "albedo")

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must be in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.n_pairs < 1 or self.epochs < 0 or self.steps < 1:
            raise ConfigError("n_pairs and steps must be >= 1, epochs >= 0")
        if self.noise_level <= 0:
            raise ConfigError("GRPO rollouts need noise_level > 0")
        if self.reward not in ("judge", "dn"):
            raise ConfigError(f"unknown reward {self.reward!r}")
        if self.ambiguous not in ("disagree", "drop"):
            raise ConfigError(f"unknown ambiguous policy {self.ambiguous!r}")
        for m in self.modalities:
            Modality(m)
        if not self.modalities:
            raise ConfigError("need at least one modality")

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            steps=self.steps, noise_level=self.noise_level, sigma_schedule=self.sigma_schedule, sigma_max=self.sigma_max
        )

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, weight_decay=self.weight_decay, clip_norm=self.clip_norm, cosine=True)


@dataclass
class GroupBatch:
    image_id: int
    modality: Modality | None
    trajectories: list[Trajectory]
    cond: torch.Tensor
    rewards: np.ndarray
    advantages: np.ndarray = field(init=False)
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.mean = float(self.rewards.mean())
        self.std = float(self.rewards.std())
        self.advantages = group_advantages(self.rewards)


# ---------------------------------------------------------------------------
# rewards


def agreement_reward(
    pred: IntrinsicStack,
    pairs: Sequence[PointPair],
    answers: Sequence[Judgment],
    judge_cfg: JudgeConfig = JudgeConfig(),
    ambiguous: str = "disagree",
) -> float:
    """Fraction of pairs where the relation read off ``pred`` matches the judge."""
    if not pairs:
        raise RewardUnavailable("no usable point pairs")
    by_mod: dict[Modality, list[int]] = {}
    for i, p in enumerate(pairs):
        by_mod.setdefault(Modality(p.modality), []).append(i)
    hits = 0
    counted = 0
    for m, idx in by_mod.items():
        p1 = np.array([pairs[i].p1 for i in idx])
        p2 = np.array([pairs[i].p2 for i in idx])
        codes = relation_codes(pred, m, p1, p2, judge_cfg)
        want = np.array([CODE[answers[i].label] for i in idx])
        if ambiguous == "drop":
            keep = codes != AMBIGUOUS
            hits += int(np.sum(codes[keep] == want[keep]))
            counted += int(keep.sum())
        else:
            hits += int(np.sum(codes == want))
            counted += len(idx)
    if counted == 0:
        raise RewardUnavailable("every predicted relation was ambiguous")
    return hits / counted


def alignment_reward(
    image_id: int,
    pred: IntrinsicStack,
    modality: Modality,
    judge: Judge,
    pairs: Sequence[PointPair],
    judge_cfg: JudgeConfig = JudgeConfig(),
    ambiguous: str = "disagree",
    key: int = 0,
) -> float:
    for p in pairs:
        if Modality(p.modality) is not Modality(modality):
            raise ValueError("pair modality does not match the requested modality")
    answers = judge.answers(image_id, pairs, key=key)
    return agreement_reward(pred, pairs, answers, judge_cfg, ambiguous)


def dn_consistency_reward(pred: IntrinsicStack, pixel_scale: float | None = None, eps: float = 1e-3) -> float:
    """Negative mean absolute gap between predicted depth and the depth
    integrated from predicted normals, after the best constant offset."""
    if pixel_scale is None:
        pixel_scale = SceneGenConfig().pixel_depth_scale
    normals = np.asarray(pred.normals, dtype=np.float64)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)
    res = poisson_integrate(normals, pixel_scale=pixel_scale, eps=eps)
    if res.coverage == 0.0:
        raise RewardUnavailable("no pixel has a usable normal")
    d_hat = np.asarray(pred.depth, dtype=np.float64)[res.valid]
    d_int = res.depth[res.valid]
    offset = np.median(d_hat - d_int)
    return -float(np.mean(np.abs(d_hat - (d_int + offset))))


def group_advantages(rewards: Iterable[float]) -> np.ndarray:
    r = np.asarray(list(rewards), dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    sd = r.std()
    if sd < ADV_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


# ---------------------------------------------------------------------------
# objective


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip_eps: float) -> torch.Tensor:
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


@dataclass
class ObjectiveResult:
    loss: float
    grad: np.ndarray
    kl: float
    ratio_mean: float
    clip_frac: float


def grpo_objective(
    new_net: VelocityNet,
    ref_net: VelocityNet | None,
    group: GroupBatch,
    cfg: TrainConfig,
    old_log_probs: torch.Tensor | None = None,
) -> ObjectiveResult:
    """Loss = -mean_{i,k} min(rho A, clip(rho) A) + beta * mean_{i,k} KL_k(new || ref).

    ``old_log_probs`` defaults to the log-probs stored on the trajectories,
    i.e. the policy that generated them.
    """
    trajs = group.trajectories
    if any(not tr.has_log_probs for tr in trajs):
        raise ValueError("trajectories carry no log-probs (deterministic rollouts)")
    scfg = trajs[0].cfg
    dt = scfg.dt
    n_steps = scfg.steps
    g = len(trajs)
    states = torch.stack([tr.states for tr in trajs])  # (G, T+1, ...)
    lp_old = old_log_probs if old_log_probs is not None else torch.stack([tr.log_probs for tr in trajs])
    adv = torch.as_tensor(group.advantages, dtype=torch.float64)
    cond = group.cond.expand(g, *group.cond.shape[1:]).to(new_net.dtype)

    total_grad = None
    total_loss = 0.0
    total_kl = 0.0
    ratios = []
    clipped = 0
    scale = 1.0 / (g * n_steps)
    for k in range(n_steps):
        t = float(trajs[0].times[k])
        sigma = float(trajs[0].sigmas[k])
        std = sigma * math.sqrt(dt)
        x = states[:, k]
        tt = torch.full((g,), t, dtype=new_net.dtype)
        with torch.enable_grad():
            f = new_net(x.to(new_net.dtype), tt, cond).to(torch.float64)
            lp_new = gaussian_log_prob(states[:, k + 1], x + f * dt, std)
            ratio = torch.exp(lp_new - lp_old[:, k])
            surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
            loss_k = -surr.sum() * scale
            kl_k = None
            if ref_net is not None:
                with torch.no_grad():
                    f_ref = ref_net(x.to(ref_net.dtype), tt.to(ref_net.dtype), cond.to(ref_net.dtype)).to(torch.float64)
                kl_k = kl_from_velocities(f, f_ref, dt, sigma)
                if cfg.beta > 0:
                    loss_k = loss_k + cfg.beta * kl_k.sum() * scale
            if loss_k.requires_grad:
                gk = flat_grad(new_net, loss_k)
            else:
                gk = None
        if gk is not None:
            total_grad = gk if total_grad is None else total_grad + gk
        total_loss += float(loss_k.detach())
        if kl_k is not None:
            total_kl += float(kl_k.detach().sum()) * scale
        r = ratio.detach()
        ratios.append(r)
        clipped += int(((r - 1.0).abs() > cfg.clip_eps).sum())
    if total_grad is None:
        total_grad = torch.zeros(sum(p.numel() for p in new_net.parameters()), dtype=new_net.dtype)
    allr = torch.cat(ratios)
    return ObjectiveResult(
        loss=total_loss,
        grad=total_grad.detach().cpu().numpy().astype(np.float64),
        kl=total_kl,
        ratio_mean=float(allr.mean()),
        clip_frac=clipped / allr.numel(),
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepRecord:
    step: int
    image_id: int
    modality: str | None
    rewards: list[float]
    mean_reward: float
    kl: float
    loss: float
    skipped: bool
    reason: str = ""

    def to_json(self) -> str:
        d = {
            "step": self.step,
            "image_id": self.image_id,
            "modality": self.modality,
            "rewards": self.rewards,
            "mean_reward": self.mean_reward,
            "kl": self.kl,
            "loss": self.loss,
            "skipped": self.skipped,
        }
        if self.reason:
            d["reason"] = self.reason
        return json.dumps(d)


def pick_modality(seed: int, epoch: int, image_id: int, modalities: Sequence[str]) -> Modality:
    idx = int(stream(seed, "modality", epoch, image_id).integers(0, len(modalities)))
    return Modality(modalities[idx])


def _rollout_rewards(
    trajs: Sequence[Trajectory],
    cfg: TrainConfig,
    pairs: Sequence[PointPair] | None,
    answers: Sequence[Judgment] | None,
    judge_cfg: JudgeConfig,
    pixel_scale: float | None,
) -> np.ndarray:
    out = []
    for tr in trajs:
        pred = tr.prediction
        if cfg.reward == "judge":
            out.append(agreement_reward(pred, pairs, answers, judge_cfg, cfg.ambiguous))
        else:
            out.append(dn_consistency_reward(pred, pixel_scale))
    return np.array(out)


def train_grpo(
    net: VelocityNet,
    images: Sequence[tuple[int, np.ndarray]],
    judge: Judge | None,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    judge_cfg: JudgeConfig = JudgeConfig(),
    synthetic: EncodedDataset | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
    pixel_scale: float | None = None,
) -> tuple[VelocityNet, list[StepRecord]]:
    """Fine-tune ``net`` in place on RGB-only ``images`` = [(image_id, rgb), ...].

    The judge is the only component that may hold ground truth.
    """
    cfg.validate()
    if cfg.reward == "judge" and judge is None:
        raise ConfigError("judge reward needs a judge")
    if cfg.interleave_flow_matching and synthetic is None:
        raise ConfigError("interleaved flow matching needs a synthetic dataset")
    images = list(images)
    ref = clone_net(net)
    for p in ref.parameters():
        p.requires_grad_(False)
    opt = AdamW(sum(p.numel() for p in net.parameters()), cfg.optim, dtype=net.dtype)
    total = cfg.epochs * len(images)
    records: list[StepRecord] = []
    scfg = cfg.sampler
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(seed, "order", epoch).permutation(len(images))
        for pos in order:
            image_id, rgb = images[int(pos)]
            lr = cosine_lr(cfg.optim, step, total)
            modality = pick_modality(seed, epoch, image_id, cfg.modalities) if cfg.reward == "judge" else None
            rec = _grpo_step(net, ref, opt, image_id, rgb, modality, judge, cfg, scfg, judge_cfg, seed, epoch, step, lr, pixel_scale)
            if cfg.interleave_flow_matching:
                batch = synthetic.batch(stream(seed, "interleave", step), cfg.fm_batch_size, net.dtype)
                _, g = flow_match_loss(net, batch)
                apply_update(net, opt, torch.as_tensor(g, dtype=net.dtype), lr)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            step += 1
    return net, records


def _grpo_step(net, ref, opt, image_id, rgb, modality, judge, cfg, scfg, judge_cfg, seed, epoch, step, lr, pixel_scale):
    mod_name = None if modality is None else modality.value
    pairs = answers = None
    if cfg.reward == "judge":
        try:
            pairs = judge.pairs(image_id, modality, cfg.n_pairs, derive_seed(seed, "pairs", epoch, image_id))
            answers = judge.answers(image_id, pairs, key=step)
        except (SamplingExhausted, JudgeUnavailable) as e:
            log.info("step %d image %d skipped: %s", step, image_id, e)
            return StepRecord(step, image_id, mod_name, [], float("nan"), float("nan"), float("nan"), True, type(e).__name__)
    cond = _cond_tensor(rgb)
    trajs = sample_group(net, cond, scfg, cfg.group_size, seed, "grpo", epoch, image_id)
    try:
        rewards = _rollout_rewards(trajs, cfg, pairs, answers, judge_cfg, pixel_scale)
    except RewardUnavailable as e:
        return StepRecord(step, image_id, mod_name, [], float("nan"), float("nan"), float("nan"), True, type(e).__name__)
    group = GroupBatch(image_id, modality, trajs, cond, rewards)
    res = grpo_objective(net, ref, group, cfg)
    if not math.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
        raise NumericError(f"non-finite GRPO loss at step {step}")
    apply_update(net, opt, torch.as_tensor(res.grad, dtype=net.dtype), lr)
    return StepRecord(step, image_id, mod_name, [float(r) for r in rewards], float(rewards.mean()), res.kl, res.loss, False)


def policy_kl(
    net: VelocityNet,
    ref: VelocityNet,
    images: Sequence[tuple[int, np.ndarray]],
    sampler_cfg: SamplerConfig,
    seed: int = 0,
) -> float:
    """Mean per-step KL(net || ref) along the net's own stochastic rollouts."""
    vals = []
    for image_id, rgb in images:
        cond = _cond_tensor(rgb)
        trajs = sample_group(net, cond, sampler_cfg, 2, seed, "policy-kl", image_id)
        states = torch.stack([tr.states for tr in trajs])
        c = cond.expand(len(trajs), *cond.shape[1:])
        for k in range(sampler_cfg.steps):
            t = float(trajs[0].times[k])
            x = states[:, k]
            tt = torch.full((len(trajs),), t)
            with torch.no_grad():
                f = net(x.to(net.dtype), tt.to(net.dtype), c.to(net.dtype)).to(torch.float64)
                fr = ref(x.to(ref.dtype), tt.to(ref.dtype), c.to(ref.dtype)).to(torch.float64)
            vals.append(kl_from_velocities(f, fr, sampler_cfg.dt, float(trajs[0].sigmas[k])).mean().item())
    return float(np.mean(vals))
