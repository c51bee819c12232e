"""Conditional velocity network and rectified-flow pretraining.

Convention: t=0 is standard-normal noise x0, t=1 is data x1, the
interpolant is x_t = (1-t) x0 + t x1 and the regression target is x1 - x0.
Intrinsic stacks travel through the flow as 8 channels in [-1, 1]:
albedo (3), depth (1), normals (3), irradiance (1).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError, StateError
from .rng import derive_seed, stream
from .scenegen import IntrinsicStack, SceneSample

log = logging.getLogger(__name__)

STACK_CHANNELS = 8
COND_CHANNELS = 3
DEPTH_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# channel codec


def encode(stack: IntrinsicStack) -> np.ndarray:
    """IntrinsicStack -> (8, H, W) float64 array in [-1, 1]."""
    a = np.asarray(stack.albedo, dtype=np.float64)
    d = np.asarray(stack.depth, dtype=np.float64)
    n = np.asarray(stack.normals, dtype=np.float64)
    i = np.asarray(stack.irradiance, dtype=np.float64)
    chans = [2 * a[..., 0] - 1, 2 * a[..., 1] - 1, 2 * a[..., 2] - 1, 2 * d - 1, n[..., 0], n[..., 1], n[..., 2], 2 * i - 1]
    return np.stack(chans, axis=0)


def decode(x) -> IntrinsicStack:
    """(8, H, W) array -> IntrinsicStack, clamped to the legal value ranges.

    Normals are passed through raw: relation rules only read the ordering of
    n_z, and metrics renormalize on their own.
    """
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    x = x.astype(np.float64)
    albedo = np.clip((np.moveaxis(x[0:3], 0, -1) + 1) / 2, 0.0, 1.0)
    depth = np.clip((x[3] + 1) / 2, DEPTH_FLOOR, 1.0)
    normals = np.moveaxis(x[4:7], 0, -1)
    irr = np.clip((x[7] + 1) / 2, 0.0, 1.0)
    return IntrinsicStack(
        albedo=albedo.astype(np.float32),
        depth=depth.astype(np.float32),
        normals=normals.astype(np.float32),
        irradiance=irr.astype(np.float32),
    )


def encode_cond(rgb: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.asarray(rgb, dtype=np.float64), -1, 0) * 2 - 1


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class Arch:
    widths: tuple[int, ...] = (32, 32, 8)
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 1, 1)
    time_dim: int = 16
    coords: bool = True
    activation: str = "silu"
    zero_final: bool = False

    def validate(self) -> None:
        if not self.widths or self.widths[-1] != STACK_CHANNELS:
            raise ConfigError(f"last layer width must be {STACK_CHANNELS}")
        if len(self.dilations) != len(self.widths):
            raise ConfigError("one dilation per layer")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel size must be odd")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return STACK_CHANNELS + COND_CHANNELS + 1 + (2 if self.coords else 0)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Arch":
        d = dict(d)
        for k in ("widths", "dilations"):
            d[k] = tuple(d[k])
        return cls(**d)


_ACTIVATIONS = {"silu": F.silu, "tanh": torch.tanh, "gelu": F.gelu}


def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class VelocityNet(nn.Module):
    """f(x_t, t, rgb): a few same-resolution conv layers.

    A sinusoidal time embedding is projected and added channelwise to every
    hidden layer; t also enters as a constant input channel.
    """

    def __init__(self, arch: Arch = Arch(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        arch.validate()
        self.arch = arch
        gen = torch.Generator().manual_seed(derive_seed(seed, "init") & 0x7FFFFFFFFFFFFFFF)
        c_in = arch.in_channels
        self.convs = nn.ModuleList()
        self.time_proj = nn.ModuleList()
        for i, (w, dil) in enumerate(zip(arch.widths, arch.dilations)):
            conv = nn.Conv2d(c_in, w, arch.kernel, padding=dil * (arch.kernel // 2), dilation=dil)
            fan_in = c_in * arch.kernel * arch.kernel
            last = i == len(arch.widths) - 1
            with torch.no_grad():
                if last and arch.zero_final:
                    conv.weight.zero_()
                else:
                    scale = math.sqrt(2.0 / fan_in) if not last else 0.1 / math.sqrt(fan_in)
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * scale)
                conv.bias.zero_()
            self.convs.append(conv)
            if not last:
                proj = nn.Linear(arch.time_dim, w)
                with torch.no_grad():
                    proj.weight.copy_(torch.randn(proj.weight.shape, generator=gen) / math.sqrt(arch.time_dim))
                    proj.bias.zero_()
                self.time_proj.append(proj)
            c_in = w
        self.to(dtype)

    @property
    def dtype(self):
        return self.convs[0].weight.dtype

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        t = t.reshape(-1).to(x.dtype).expand(b) if t.numel() == 1 else t.reshape(b).to(x.dtype)
        parts = [x, cond, t[:, None, None, None].expand(b, 1, h, w)]
        if self.arch.coords:
            ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype)
            xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype)
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            parts.append(torch.stack([gy, gx])[None].expand(b, 2, h, w))
        hid = torch.cat(parts, dim=1)
        emb = sinusoidal(t, self.arch.time_dim)
        act = _ACTIVATIONS[self.arch.activation]
        for i, conv in enumerate(self.convs):
            hid = conv(hid)
            if i < len(self.time_proj):
                hid = act(hid + self.time_proj[i](emb)[:, :, None, None])
        return hid


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flat_params(net: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def set_flat_params(net: nn.Module, vec) -> None:
    vec = torch.as_tensor(vec, dtype=net.dtype)
    if vec.numel() != param_count(net):
        raise ValueError(f"expected {param_count(net)} parameters, got {vec.numel()}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec.clone(), net.parameters())


def clone_net(net: VelocityNet, dtype=None) -> VelocityNet:
    other = VelocityNet(net.arch, dtype=dtype or net.dtype)
    set_flat_params(other, flat_params(net).to(other.dtype))
    return other


def flat_grad(net: nn.Module, loss: torch.Tensor, retain_graph: bool = False) -> torch.Tensor:
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for p, g in zip(params, grads)])


def _as_tensor(a, dtype) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(dtype)
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def _check_finite(*tensors) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite network input")


def forward(net: VelocityNet, x_t, t, cond) -> torch.Tensor:
    """Velocity at (x_t, t) without recording gradients.

    Inputs are (B, 8, H, W), (B,) or scalar, (B, 3, H, W); the output has
    the dtype of ``x_t`` when it is a tensor, float64 otherwise.
    """
    out_dtype = x_t.dtype if isinstance(x_t, torch.Tensor) else torch.float64
    x, tt, c = (_as_tensor(v, net.dtype) for v in (x_t, t, cond))
    _check_finite(x, tt, c)
    if tt.min() < 0 or tt.max() > 1:
        raise ValueError("t must lie in [0, 1]")
    with torch.no_grad():
        return net(x, tt, c).to(out_dtype)


class Tape:
    """A recorded forward pass; ``backward`` may be called any number of times."""

    def __init__(self, net: VelocityNet | None = None, output: torch.Tensor | None = None):
        self.net = net
        self.output = output

    def backward(self, loss_grad) -> np.ndarray:
        if self.net is None or self.output is None:
            raise StateError("backward called before a forward pass was recorded")
        g = _as_tensor(loss_grad, self.output.dtype)
        if g.shape != self.output.shape:
            raise ValueError(f"loss gradient shape {tuple(g.shape)} != output shape {tuple(self.output.shape)}")
        params = list(self.net.parameters())
        grads = torch.autograd.grad(self.output, params, grad_outputs=g, retain_graph=True)
        return torch.cat([gr.reshape(-1) for gr in grads]).detach().cpu().numpy().astype(np.float64)


def record(net: VelocityNet, x_t, t, cond) -> Tape:
    x, tt, c = (_as_tensor(v, net.dtype) for v in (x_t, t, cond))
    _check_finite(x, tt, c)
    with torch.enable_grad():
        out = net(x, tt, c)
    return Tape(net, out)


def backward(tape: Tape | None, loss_grad) -> np.ndarray:
    """dLoss/dtheta for the recorded pass, given dLoss/doutput."""
    if tape is None:
        raise StateError("backward called before a forward pass was recorded")
    return tape.backward(loss_grad)


# ---------------------------------------------------------------------------
# flow matching


@dataclass
class FlowBatch:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    cond: torch.Tensor

    @property
    def x_t(self) -> torch.Tensor:
        tt = self.t[:, None, None, None]
        return (1 - tt) * self.x0 + tt * self.x1

    @property
    def target(self) -> torch.Tensor:
        return self.x1 - self.x0


class EncodedDataset:
    """Scenes pre-encoded into flow tensors (float64 numpy)."""

    def __init__(self, samples: Sequence[SceneSample]):
        if not samples:
            raise ValueError("dataset is empty")
        self.x1 = np.stack([encode(s.gt) for s in samples])
        self.cond = np.stack([encode_cond(s.rgb) for s in samples])
        self.seeds = [s.seed for s in samples]

    def __len__(self):
        return len(self.x1)

    def batch(self, rng: np.random.Generator, size: int, dtype=torch.float32) -> FlowBatch:
        idx = rng.integers(0, len(self), size)
        x1 = self.x1[idx]
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, size)
        return FlowBatch(
            x0=torch.as_tensor(x0, dtype=dtype),
            x1=torch.as_tensor(x1, dtype=dtype),
            t=torch.as_tensor(t, dtype=dtype),
            cond=torch.as_tensor(self.cond[idx], dtype=dtype),
        )


def flow_match_loss_tensor(net: VelocityNet, batch: FlowBatch) -> torch.Tensor:
    pred = net(batch.x_t.to(net.dtype), batch.t.to(net.dtype), batch.cond.to(net.dtype))
    return torch.mean((pred - batch.target.to(net.dtype)) ** 2)


def flow_match_loss(net: VelocityNet, batch: FlowBatch) -> tuple[float, np.ndarray]:
    """Mean squared error to the straight-line velocity, and its parameter gradient."""
    with torch.enable_grad():
        loss = flow_match_loss_tensor(net, batch)
        g = flat_grad(net, loss)
    return float(loss.detach()), g.detach().cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    cosine: bool = True
    min_lr_ratio: float = 0.0


def cosine_lr(cfg: OptimConfig, step: int, total: int) -> float:
    if not cfg.cosine or total <= 0:
        return cfg.lr
    frac = min(step, total) / total
    lo = cfg.lr * cfg.min_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay on a flat parameter vector."""

    def __init__(self, n: int, cfg: OptimConfig, dtype=torch.float32):
        self.cfg = cfg
        self.m = torch.zeros(n, dtype=dtype)
        self.v = torch.zeros(n, dtype=dtype)
        self.step_count = 0

    def step(self, params: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
        b1, b2 = self.cfg.betas
        g = grad.to(self.m.dtype)
        if self.cfg.clip_norm and self.cfg.clip_norm > 0:
            norm = torch.linalg.vector_norm(g)
            if norm > self.cfg.clip_norm:
                g = g * (self.cfg.clip_norm / norm)
        self.step_count += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1**self.step_count)
        vhat = self.v / (1 - b2**self.step_count)
        p = params.to(self.m.dtype)
        if lr == 0.0:
            return p.clone()
        p = p * (1 - lr * self.cfg.weight_decay)
        return p - lr * mhat / (torch.sqrt(vhat) + self.cfg.eps)


def apply_update(net: VelocityNet, opt: AdamW, grad, lr: float) -> None:
    g = torch.as_tensor(np.asarray(grad), dtype=net.dtype) if not isinstance(grad, torch.Tensor) else grad
    set_flat_params(net, opt.step(flat_params(net), g, lr))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"IXCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    arch: Arch
    params: np.ndarray  # float32
    step: int = 0
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    opt_step: int = 0
    meta: dict = field(default_factory=dict)

    def net(self) -> VelocityNet:
        net = VelocityNet(self.arch)
        set_flat_params(net, torch.as_tensor(self.params))
        return net


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps({"arch": ckpt.arch.to_json(), "step": ckpt.step, "meta": ckpt.meta}, sort_keys=True).encode()
    params = np.ascontiguousarray(ckpt.params, dtype="<f4")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    parts.append(struct.pack("<Q", params.size))
    parts.append(params.tobytes())
    if ckpt.opt_m is not None:
        parts.append(struct.pack("<BQ", 1, ckpt.opt_step))
        parts.append(np.ascontiguousarray(ckpt.opt_m, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ckpt.opt_v, dtype="<f4").tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint: {e}") from e
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint {what}", pos)
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, hlen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        header = json.loads(take(hlen, "json header"))
        arch = Arch.from_json(header["arch"])
        arch.validate()
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"bad checkpoint header: {e}", 12) from e
    (n,) = struct.unpack("<Q", take(8, "param count"))
    params = np.frombuffer(take(4 * n, "params"), dtype="<f4").astype(np.float32)
    expected = param_count(VelocityNet(arch))
    if n != expected:
        raise FormatError(f"checkpoint holds {n} parameters, architecture needs {expected}")
    (has_opt,) = struct.unpack("<B", take(1, "optimizer flag"))
    m = v = None
    opt_step = 0
    if has_opt:
        (opt_step,) = struct.unpack("<Q", take(8, "optimizer step"))
        m = np.frombuffer(take(4 * n, "optimizer m"), dtype="<f4").astype(np.float32)
        v = np.frombuffer(take(4 * n, "optimizer v"), dtype="<f4").astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint", pos)
    return Checkpoint(arch, params, header.get("step", 0), m, v, opt_step, header.get("meta", {}))


def checkpoint_of(net: VelocityNet, opt: AdamW | None = None, step: int = 0, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        arch=net.arch,
        params=flat_params(net).to(torch.float32).numpy(),
        step=step,
        opt_m=None if opt is None else opt.m.to(torch.float32).numpy().copy(),
        opt_v=None if opt is None else opt.v.to(torch.float32).numpy().copy(),
        opt_step=0 if opt is None else opt.step_count,
        meta=dict(meta or {}),
    )


def restore_optimizer(ckpt: Checkpoint, cfg: OptimConfig) -> AdamW:
    opt = AdamW(ckpt.params.size, cfg)
    if ckpt.opt_m is not None:
        opt.m = torch.as_tensor(ckpt.opt_m.copy())
        opt.v = torch.as_tensor(ckpt.opt_v.copy())
        opt.step_count = ckpt.opt_step
    return opt


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 16
    optim: OptimConfig = OptimConfig()
    checkpoint_every: int = 500


def pretrain(
    net: VelocityNet,
    dataset: Sequence[SceneSample] | EncodedDataset,
    cfg: PretrainConfig = PretrainConfig(),
    seed: int = 0,
    checkpoint_path=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[VelocityNet, list[float]]:
    """Flow-matching training; batches are keyed by (seed, step) so resuming
    from a checkpoint replays the uninterrupted run exactly.

    ``stop_after`` ends the run early (after that many total steps) as if
    interrupted; the returned loss curve covers only steps run here.
    """
    data = dataset if isinstance(dataset, EncodedDataset) else EncodedDataset(dataset)
    if resume is not None:
        set_flat_params(net, torch.as_tensor(resume.params))
        opt = restore_optimizer(resume, cfg.optim)
        start = resume.step
    else:
        opt = AdamW(param_count(net), cfg.optim, dtype=net.dtype)
        start = 0
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    losses: list[float] = []
    meta = {"seed": seed, "phase": "pretrain", "rng": "blake2b(seed,label,step)->PCG64"}
    last_good = checkpoint_of(net, opt, start, meta)
    for step in range(start, end):
        batch = data.batch(stream(seed, "pretrain-batch", step), cfg.batch_size, net.dtype)
        loss, grad = flow_match_loss(net, batch)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good)
            raise NumericError(f"pretraining diverged at step {step}; last good step {last_good.step}")
        lr = cosine_lr(cfg.optim, step, cfg.steps)
        apply_update(net, opt, torch.as_tensor(grad, dtype=net.dtype), lr)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            last_good = checkpoint_of(net, opt, done, meta)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint_of(net, opt, end, meta))
    return net, losses
