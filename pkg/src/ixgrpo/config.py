"""INI run configuration.

Grammar: standard ``configparser`` sections of ``key = value`` lines.
Sequences are comma separated (``widths = 32, 32, 8``), per-modality maps
are ``name:value`` items (``flip_prob = depth:0.04, albedo:0.1``) and an
empty value means "unset" for optional keys. Unknown sections and keys are
errors. See ``config.example`` for every key with its default.
"""

from __future__ import annotations

import collections.abc
import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .flowcore import Arch, OptimConfig, PretrainConfig
from .grpo import TrainConfig
from .judge import JudgeConfig, Modality
from .metrics import EvalConfig
from .scenegen import SceneGenConfig

# scenegen keys that only make sense programmatically
_SCENE_HIDDEN = {"primitives", "light_dir", "background_albedo", "ambient", "diffuse"}


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    min_lr_ratio: float = 0.0
    checkpoint_every: int = 500

    def to_config(self) -> PretrainConfig:
        optim = OptimConfig(
            lr=self.lr, weight_decay=self.weight_decay, clip_norm=self.clip_norm, min_lr_ratio=self.min_lr_ratio
        )
        return PretrainConfig(self.steps, self.batch_size, optim, self.checkpoint_every)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    log_level: str = "info"
    count: int = 200
    scenegen: SceneGenConfig = SceneGenConfig()
    arch: Arch = Arch()
    pretrain: PretrainSection = PretrainSection()
    grpo: TrainConfig = TrainConfig()
    judge: JudgeConfig = JudgeConfig()
    eval: EvalConfig = EvalConfig()

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.log_level.lower() not in ("debug", "info", "warning", "error"):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        self.scenegen.validate()
        self.arch.validate()
        if self.pretrain.steps < 0 or self.pretrain.batch_size < 1:
            raise ConfigError("pretrain needs steps >= 0 and batch_size >= 1")
        self.grpo.validate()
        self.judge.validate()


# ---------------------------------------------------------------------------
# value parsing


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_map(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, sep, val = item.partition(":")
        if not sep:
            raise ValueError(f"expected name:value, got {item!r}")
        out[Modality(name.strip()).value] = float(val)
    return out


def _parse_value(tp, text: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if not text.strip():
            return None
        return _parse_value(inner[0], text)
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text.strip()
    if origin is tuple:
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = args[0]
        return tuple(_parse_value(elem, s) for s in items)
    if origin in (collections.abc.Mapping, dict):
        return _parse_map(text)
    raise ConfigError(f"unsupported config type {tp!r}")


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, typing.Mapping):
        return ", ".join(f"{k}:{x}" for k, x in v.items())
    return str(v)


def _section_fields(cls, hidden=()) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in hidden}


_SECTIONS = {
    "scenegen": ("scenegen", SceneGenConfig, _SCENE_HIDDEN),
    "arch": ("arch", Arch, ()),
    "pretrain": ("pretrain", PretrainSection, ()),
    "grpo": ("grpo", TrainConfig, ()),
    "judge": ("judge", JudgeConfig, ()),
    "eval": ("eval", EvalConfig, ()),
}
_RUN_KEYS = {"seed": int, "log_level": str, "count": int}


def apply_overrides(cfg: RunConfig, items: dict[str, dict[str, str]]) -> RunConfig:
    """Apply ``{section: {key: text}}`` on top of ``cfg``; unknown names raise."""
    top = {}
    for section, kv in items.items():
        if section == "run":
            for key, text in kv.items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key [run] {key}")
                try:
                    top[key] = _parse_value(_RUN_KEYS[key], text)
                except ValueError as e:
                    raise ConfigError(f"[run] {key}: {e}") from e
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, cls, hidden = _SECTIONS[section]
        allowed = _section_fields(cls, hidden)
        changes = {}
        for key, text in kv.items():
            if key not in allowed:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                changes[key] = _parse_value(allowed[key], text)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from e
        top[attr] = replace(getattr(cfg, attr), **changes)
    return replace(cfg, **top)


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    items = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(base, items)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def parse_set(assignments) -> dict[str, dict[str, str]]:
    """``["grpo.beta=0", ...]`` -> ``{"grpo": {"beta": "0"}}``."""
    out: dict[str, dict[str, str]] = {}
    for a in assignments or ():
        key, sep, val = a.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {a!r}")
        out.setdefault(section, {})[name] = val
    return out


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for key in _RUN_KEYS:
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    for section, (attr, cls, hidden) in _SECTIONS.items():
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for name in _section_fields(cls, hidden):
            lines.append(f"{name} = {_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
