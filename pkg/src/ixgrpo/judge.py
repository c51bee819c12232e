"""Point-pair relations and the judges that answer them.

A judge sees an RGB image and a pair of pixels and answers a relative
question for one modality: which point is closer, more front-facing, more
illuminated, or whether the two share a material. ``derive_relation`` is
the analytic version of those answers computed from an intrinsic stack;
applied to ground truth it is the oracle, applied to a prediction it is
what the reward compares against.
"""

from __future__ import annotations

import base64
import enum
import io
import json
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from skimage.color import rgb2lab

from .errors import ConfigError, JudgeUnavailable, SamplingExhausted
from .rng import derive_seed
from .scenegen import IntrinsicStack, SceneSample, render_lambertian

REC709 = np.array([0.2126, 0.7152, 0.0722])


class Modality(str, enum.Enum):
    DEPTH = "depth"
    NORMALS = "normals"
    IRRADIANCE = "irradiance"
    ALBEDO = "albedo"


MODALITIES = tuple(Modality)


class Label(str, enum.Enum):
    FIRST = "first"  # first point is closer / more front-facing / more illuminated
    SECOND = "second"
    SAME = "same"
    DIFFERENT = "different"

    def flipped(self) -> "Label":
        return _FLIP[self]


_FLIP = {
    Label.FIRST: Label.SECOND,
    Label.SECOND: Label.FIRST,
    Label.SAME: Label.DIFFERENT,
    Label.DIFFERENT: Label.SAME,
}

# integer codes used by the vectorized paths; 0 is "ambiguous"
AMBIGUOUS = 0
CODE = {Label.FIRST: 1, Label.SECOND: 2, Label.SAME: 3, Label.DIFFERENT: 4}
FROM_CODE = {v: k for k, v in CODE.items()}


def legal_labels(modality: Modality) -> tuple[Label, Label]:
    if Modality(modality) is Modality.ALBEDO:
        return (Label.SAME, Label.DIFFERENT)
    return (Label.FIRST, Label.SECOND)


@dataclass(frozen=True)
class PointPair:
    p1: tuple[int, int]
    p2: tuple[int, int]
    modality: Modality

    def swapped(self) -> "PointPair":
        return PointPair(self.p2, self.p1, self.modality)

    @property
    def distance(self) -> float:
        return math.hypot(self.p1[0] - self.p2[0], self.p1[1] - self.p2[1])


@dataclass(frozen=True)
class Judgment:
    label: Label
    confidence: float = 1.0


@dataclass(frozen=True)
class JudgeConfig:
    kind: str = "oracle"  # oracle | noisy | external
    flip_prob: Mapping[str, float] = field(default_factory=dict)
    command: str = ""
    albedo_tau: float = 10.0
    exclusion_ratio: float = 0.02
    eps_div: float = 1e-4
    timeout: float = 10.0
    seed: int = 0
    markers: bool = False

    def validate(self) -> None:
        if self.kind not in ("oracle", "noisy", "external"):
            raise ConfigError(f"unknown judge kind {self.kind!r}")
        for m, p in self.flip_prob.items():
            Modality(m)
            if not 0.0 <= p <= 0.5:
                raise ConfigError(f"flip probability for {m} must be in [0, 0.5], got {p}")
        if self.albedo_tau <= 0:
            raise ConfigError("albedo_tau must be > 0")
        if self.exclusion_ratio < 0:
            raise ConfigError("exclusion_ratio must be >= 0")
        if self.kind == "external" and not self.command.strip():
            raise ConfigError("external judge needs a command")

    def flip(self, modality: Modality) -> float:
        return float(self.flip_prob.get(Modality(modality).value, 0.0))


# held-out judge accuracies reported for the fine-tuned MLLM judge
TABLE6_ACCURACY = {"depth": 0.962, "normals": 0.935, "albedo": 0.894, "irradiance": 0.876}


def noisy_config(accuracy: Mapping[str, float] = TABLE6_ACCURACY, **kw) -> JudgeConfig:
    return JudgeConfig(kind="noisy", flip_prob={m: round(1.0 - a, 12) for m, a in accuracy.items()}, **kw)


# ---------------------------------------------------------------------------
# analytic relations


def distance_bounds(height: int) -> tuple[float, float]:
    """Pair distance limits, scaled linearly from 20/350 px at 512 px."""
    lo = max(2, math.ceil(20 * height / 512))
    hi = 350 * height / 512
    return float(lo), float(hi)


def luminance(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ REC709


def scalar_values(stack: IntrinsicStack, modality: Modality, cfg: JudgeConfig = JudgeConfig()) -> np.ndarray:
    """Per-pixel scalar compared by the ordinal rules (larger = FIRST wins)."""
    m = Modality(modality)
    if m is Modality.DEPTH:
        return np.asarray(stack.depth, dtype=np.float64)
    if m is Modality.NORMALS:
        return np.asarray(stack.normals[..., 2], dtype=np.float64)
    if m is Modality.IRRADIANCE:
        rgb = render_lambertian(stack)
        return luminance(rgb) / np.maximum(luminance(stack.albedo), cfg.eps_div)
    raise ValueError("albedo has no scalar ordering")


def _check_bounds(shape, rows, cols):
    h, w = shape
    if np.any(rows < 0) or np.any(rows >= h) or np.any(cols < 0) or np.any(cols >= w):
        raise IndexError("point outside the image")


def relation_codes(
    stack: IntrinsicStack,
    modality: Modality,
    p1: np.ndarray,
    p2: np.ndarray,
    cfg: JudgeConfig = JudgeConfig(),
    values: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorized relation codes for K pairs; p1, p2 are (K, 2) integer arrays."""
    m = Modality(modality)
    p1 = np.asarray(p1, dtype=np.int64).reshape(-1, 2)
    p2 = np.asarray(p2, dtype=np.int64).reshape(-1, 2)
    shape = stack.depth.shape
    _check_bounds(shape, p1[:, 0], p1[:, 1])
    _check_bounds(shape, p2[:, 0], p2[:, 1])
    if m is Modality.ALBEDO:
        a = np.asarray(stack.albedo, dtype=np.float64)
        lab1 = rgb2lab(a[p1[:, 0], p1[:, 1]][:, None, :])[:, 0]
        lab2 = rgb2lab(a[p2[:, 0], p2[:, 1]][:, None, :])[:, 0]
        delta_e = np.linalg.norm(lab1 - lab2, axis=-1)
        return np.where(delta_e > cfg.albedo_tau, CODE[Label.DIFFERENT], CODE[Label.SAME])
    v = scalar_values(stack, m, cfg) if values is None else values
    v1 = v[p1[:, 0], p1[:, 1]]
    v2 = v[p2[:, 0], p2[:, 1]]
    denom = np.maximum(np.abs(v1), np.abs(v2))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > 0, np.abs(v1 - v2) / denom, 0.0)
    if m is Modality.DEPTH:
        first = v1 < v2  # closer
    else:
        first = v1 > v2
    codes = np.where(first, CODE[Label.FIRST], CODE[Label.SECOND])
    return np.where((rel < cfg.exclusion_ratio) | ~np.isfinite(rel), AMBIGUOUS, codes)


def derive_relation(stack: IntrinsicStack, pair: PointPair, cfg: JudgeConfig = JudgeConfig()) -> Judgment | None:
    """Analytic relation for one pair; None means ambiguous."""
    code = int(relation_codes(stack, pair.modality, [pair.p1], [pair.p2], cfg)[0])
    if code == AMBIGUOUS:
        return None
    return Judgment(FROM_CODE[code], 1.0)


BIN_RANGES = {
    Modality.DEPTH: (0.0, 1.0),
    Modality.NORMALS: (0.0, 1.0),
    Modality.IRRADIANCE: (0.0, 1.0),
    Modality.ALBEDO: (0.0, 1.0),
}


def bin_index(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def derive_binned_relation(
    gt: IntrinsicStack,
    pair: PointPair,
    bins: int = 5,
    value_range: tuple[float, float] | None = None,
    cfg: JudgeConfig = JudgeConfig(),
) -> Judgment | None:
    """Relation read off absolute 5-way bins instead of raw values.

    Pairs whose points fall in the same bin are ambiguous. Albedo is binned
    by luminance; differing bins mean DIFFERENT.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    m = Modality(pair.modality)
    shape = gt.depth.shape
    _check_bounds(shape, np.array([pair.p1[0], pair.p2[0]]), np.array([pair.p1[1], pair.p2[1]]))
    if m is Modality.ALBEDO:
        v = luminance(gt.albedo)
    else:
        v = scalar_values(gt, m, cfg)
    lo, hi = value_range if value_range is not None else BIN_RANGES[m]
    b1, b2 = bin_index([v[pair.p1], v[pair.p2]], bins, lo, hi)
    if b1 == b2:
        return None
    if m is Modality.ALBEDO:
        return Judgment(Label.DIFFERENT)
    if m is Modality.DEPTH:
        return Judgment(Label.FIRST if b1 < b2 else Label.SECOND)
    return Judgment(Label.FIRST if b1 > b2 else Label.SECOND)


def sample_pairs(
    rng: np.random.Generator,
    image_dims: tuple[int, int],
    gt: IntrinsicStack | None,
    modality: Modality,
    n: int,
    cfg: JudgeConfig = JudgeConfig(),
    budget: int | None = None,
) -> list[PointPair]:
    """Draw up to ``n`` pairs within the distance bounds.

    With ground truth available, pairs whose relation is ambiguous are
    rejected and redrawn. Raises SamplingExhausted if the retry budget ends
    with no usable pair.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    m = Modality(modality)
    h, w = image_dims
    dmin, dmax = distance_bounds(h)
    if dmin > math.hypot(h - 1, w - 1):
        raise SamplingExhausted(f"{h}x{w} image cannot hold a pair {dmin} px apart")
    budget = 50 * n if budget is None else budget
    values = None
    if gt is not None and m is not Modality.ALBEDO:
        values = scalar_values(gt, m, cfg)

    out: list[PointPair] = []
    drawn = 0
    batch = max(4 * n, 64)
    while len(out) < n and drawn < budget:
        k = min(batch, budget - drawn)
        drawn += k
        a = np.stack([rng.integers(0, h, k), rng.integers(0, w, k)], axis=1)
        b = np.stack([rng.integers(0, h, k), rng.integers(0, w, k)], axis=1)
        dist = np.hypot(*(a - b).T)
        ok = (dist >= dmin) & (dist <= dmax)
        if gt is not None and m is not Modality.ALBEDO:
            ok &= relation_codes(gt, m, a, b, cfg, values=values) != AMBIGUOUS
        for i in np.flatnonzero(ok):
            out.append(PointPair((int(a[i, 0]), int(a[i, 1])), (int(b[i, 0]), int(b[i, 1])), m))
            if len(out) == n:
                break
    if not out:
        raise SamplingExhausted(f"no admissible {m.value} pair after {drawn} draws")
    return out


# ---------------------------------------------------------------------------
# judges


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


class Judge:
    """Answers relative questions about an image it holds by id.

    Only judges ever touch ground truth; training code sees RGB only.
    """

    def pairs(self, image_id: int, modality: Modality, n: int, seed: int) -> list[PointPair]:
        raise NotImplementedError

    def query(self, image_id: int, pair: PointPair, key: int = 0) -> Judgment:
        raise NotImplementedError

    def answers(self, image_id: int, pairs: Sequence[PointPair], key: int = 0) -> list[Judgment]:
        return [self.query(image_id, p, key=key * 1_000_003 + i) for i, p in enumerate(pairs)]

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class OracleJudge(Judge):
    def __init__(self, samples: Mapping[int, SceneSample], cfg: JudgeConfig = JudgeConfig()):
        cfg.validate()
        self.samples = samples
        self.cfg = cfg

    def pairs(self, image_id, modality, n, seed):
        gt = self.samples[image_id].gt
        return sample_pairs(_rng(seed), gt.depth.shape, gt, modality, n, self.cfg)

    def query(self, image_id, pair, key=0):
        j = derive_relation(self.samples[image_id].gt, pair, self.cfg)
        if j is None:
            # callers get pairs from `pairs`, which never yields ambiguous ones
            raise ValueError(f"ambiguous pair {pair} reached the oracle")
        return j


class NoisyJudge(OracleJudge):
    """Oracle answer flipped with a per-modality probability.

    The flip decision is a hash of (seed, image id, key, modality, pair), so
    answers do not depend on query order.
    """

    def query(self, image_id, pair, key=0):
        j = super().query(image_id, pair)
        p = self.cfg.flip(pair.modality)
        if p <= 0.0:
            return j
        u = derive_seed(self.cfg.seed, "flip", image_id, key, pair.modality.value, pair.p1, pair.p2) / 2.0**64
        if u < p:
            return Judgment(j.label.flipped(), 1.0 - p)
        return Judgment(j.label, 1.0 - p)


class CachedJudge(Judge):
    """Memoizes pairs and answers of an inner judge.

    Once warm, ground truth behind the inner judge can be discarded.
    """

    def __init__(self, inner: Judge):
        self.inner = inner
        self._pairs: dict = {}
        self._answers: dict = {}

    def pairs(self, image_id, modality, n, seed):
        k = (image_id, Modality(modality), n, seed)
        if k not in self._pairs:
            try:
                self._pairs[k] = self.inner.pairs(image_id, modality, n, seed)
            except SamplingExhausted as e:
                self._pairs[k] = e
        hit = self._pairs[k]
        if isinstance(hit, SamplingExhausted):
            raise hit
        return list(hit)

    def query(self, image_id, pair, key=0):
        k = (image_id, pair, key)
        if k not in self._answers:
            self._answers[k] = self.inner.query(image_id, pair, key)
        return self._answers[k]

    def close(self):
        self.inner.close()


def marker_png_b64(rgb: np.ndarray, p1, p2, scale: int = 8) -> str:
    """PNG of the image upscaled with a red marker on p1 and a blue one on p2."""
    from PIL import Image

    img = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    r = max(1, scale // 3)
    for (row, col), color in ((p1, (255, 0, 0)), (p2, (0, 64, 255))):
        cy, cx = row * scale + scale // 2, col * scale + scale // 2
        img[max(0, cy - r) : cy + r + 1, max(0, cx - r) : cx + r + 1] = color
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class ExternalJudge(Judge):
    """Newline-delimited JSON judge behind a subprocess's stdin/stdout.

    Request: {"id", "modality", "p1", "p2", "width", "height"[, "image_b64"]}
    Reply:   {"id", "label"} with label in first|second|same|different.
    """

    def __init__(self, images: Mapping[int, np.ndarray], cfg: JudgeConfig):
        cfg.validate()
        self.images = images
        self.cfg = cfg
        self._next_id = 0
        self._lock = threading.Lock()
        try:
            self.proc = subprocess.Popen(
                shlex.split(cfg.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise JudgeUnavailable(f"cannot start judge {cfg.command!r}: {e}") from e
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def pairs(self, image_id, modality, n, seed):
        h, w = np.asarray(self.images[image_id]).shape[:2]
        return sample_pairs(_rng(seed), (h, w), None, modality, n, self.cfg)

    def query(self, image_id, pair, key=0):
        rgb = np.asarray(self.images[image_id])
        h, w = rgb.shape[:2]
        with self._lock:
            qid = self._next_id
            self._next_id += 1
            req = {
                "id": qid,
                "modality": Modality(pair.modality).value,
                "p1": list(pair.p1),
                "p2": list(pair.p2),
                "width": int(w),
                "height": int(h),
            }
            if self.cfg.markers:
                req["image_b64"] = marker_png_b64(rgb, pair.p1, pair.p2)
            try:
                self.proc.stdin.write(json.dumps(req) + "\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise JudgeUnavailable(f"judge pipe closed: {e}") from e
            try:
                line = self._lines.get(timeout=self.cfg.timeout)
            except queue.Empty:
                raise JudgeUnavailable(f"judge timed out after {self.cfg.timeout}s on query {qid}") from None
        if line is None:
            raise JudgeUnavailable("judge process exited")
        try:
            reply = json.loads(line)
            label = Label(reply["label"])
            rid = int(reply["id"])
        except (ValueError, KeyError, TypeError) as e:
            raise JudgeUnavailable(f"malformed judge reply {line.strip()!r}") from e
        if rid != qid:
            raise JudgeUnavailable(f"judge replied to id {rid}, expected {qid}")
        if label not in legal_labels(pair.modality):
            raise JudgeUnavailable(f"label {label.value!r} is not legal for {pair.modality.value}")
        return Judgment(label, 1.0)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


def make_judge(cfg: JudgeConfig, samples: Mapping[int, SceneSample]) -> Judge:
    cfg.validate()
    if cfg.kind == "oracle":
        return OracleJudge(samples, cfg)
    if cfg.kind == "noisy":
        return NoisyJudge(samples, cfg)
    return ExternalJudge({k: s.rgb for k, s in samples.items()}, cfg)
