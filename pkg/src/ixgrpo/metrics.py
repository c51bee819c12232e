"""Evaluation metrics and pre/post alignment reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .judge import REC709, MODALITIES, Judge, JudgeConfig, Modality, PointPair, sample_pairs
from .rng import derive_seed, stream
from .scenegen import IntrinsicStack, SceneSample

PSNR_CAP = 99.0
DENSE_LIMIT = 4096


# ---------------------------------------------------------------------------
# albedo: WHDR


def _lum(albedo: np.ndarray, p) -> float:
    return max(1e-10, float(np.asarray(albedo[p[0], p[1]], dtype=np.float64) @ REC709))


def whdr_relation(albedo: np.ndarray, p1, p2, delta: float) -> str:
    """'1' if point 1 is darker, '2' if point 2 is darker, 'E' if about equal."""
    l1, l2 = _lum(albedo, p1), _lum(albedo, p2)
    if l2 / l1 > 1.0 + delta:
        return "1"
    if l1 / l2 > 1.0 + delta:
        return "2"
    return "E"


def whdr_judgments(gt_albedo: np.ndarray, pairs: Sequence, delta: float = 0.1) -> list[tuple[tuple, tuple, str]]:
    """Synthetic lightness judgments read off ground-truth albedo."""
    out = []
    for pair in pairs:
        p1, p2 = (pair.p1, pair.p2) if isinstance(pair, PointPair) else pair
        out.append((tuple(p1), tuple(p2), whdr_relation(gt_albedo, p1, p2, delta)))
    return out


def whdr(pred_albedo: np.ndarray, judgments: Sequence, delta: float = 0.1, weights: Sequence[float] | None = None) -> float:
    """Weighted fraction of lightness judgments the predicted albedo contradicts.

    ``judgments`` holds (p1, p2, label) triples or (PointPair, label) pairs
    with label '1' (first darker), '2' (second darker) or 'E' (equal).
    """
    if not judgments:
        raise ValueError("no judgments")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    err = 0.0
    total = 0.0
    for i, j in enumerate(judgments):
        if len(j) == 2:
            pair, label = j
            p1, p2 = pair.p1, pair.p2
        else:
            p1, p2, label = j
        w = 1.0 if weights is None else float(weights[i])
        if whdr_relation(pred_albedo, p1, p2, delta) != str(label):
            err += w
        total += w
    return err / total


# ---------------------------------------------------------------------------
# depth


class DepthMetrics(NamedTuple):
    absrel: float
    delta1: float
    clamped: int


def align_scale_shift(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    a = np.stack([p, np.ones_like(p)], axis=1)
    (s, b), *_ = np.linalg.lstsq(a, g, rcond=None)
    return (s * np.asarray(pred, dtype=np.float64) + b)


def depth_metrics(pred_depth: np.ndarray, gt_depth: np.ndarray) -> DepthMetrics:
    gt = np.asarray(gt_depth, dtype=np.float64)
    if np.any(gt <= 0):
        raise ValueError("ground-truth depth must be positive")
    aligned = align_scale_shift(pred_depth, gt)
    bad = aligned <= 1e-6
    aligned = np.where(bad, 1e-6, aligned)
    absrel = float(np.mean(np.abs(aligned - gt) / gt))
    ratio = np.maximum(aligned / gt, gt / aligned)
    return DepthMetrics(absrel, float(np.mean(ratio < 1.25)), int(bad.sum()))


# ---------------------------------------------------------------------------
# normals


class NormalMetrics(NamedTuple):
    mean_deg: float
    pct_below: float


def angular_errors(pred_normals: np.ndarray, gt_normals: np.ndarray) -> np.ndarray:
    p = np.asarray(pred_normals, dtype=np.float64)
    g = np.asarray(gt_normals, dtype=np.float64)
    norm = np.linalg.norm(p, axis=-1)
    unit = np.divide(p, norm[..., None], out=np.zeros_like(p), where=norm[..., None] > 0)
    cos = np.clip(np.sum(unit * g, axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    return np.where(norm > 0, ang, 90.0)


def normal_metrics(pred_normals: np.ndarray, gt_normals: np.ndarray, threshold_deg: float = 11.25) -> NormalMetrics:
    ang = angular_errors(pred_normals, gt_normals)
    return NormalMetrics(float(ang.mean()), float(100.0 * np.mean(ang < threshold_deg)))


# ---------------------------------------------------------------------------
# cyclic reconstruction


class Reconstruction(NamedTuple):
    rmse: float
    psnr: float


def cyclic_reconstruction(pred: IntrinsicStack, rgb: np.ndarray, residual: np.ndarray | None = None) -> Reconstruction:
    recon = np.asarray(pred.albedo, dtype=np.float64) * np.asarray(pred.irradiance, dtype=np.float64)[..., None]
    if residual is not None:
        recon = recon + residual
    recon = np.clip(recon, 0.0, 1.0)
    rmse = float(np.sqrt(np.mean((recon - np.asarray(rgb, dtype=np.float64)) ** 2)))
    psnr = PSNR_CAP if rmse == 0.0 else min(PSNR_CAP, 20.0 * math.log10(1.0 / rmse))
    return Reconstruction(rmse, psnr)


# ---------------------------------------------------------------------------
# Poisson integration


class PoissonResult(NamedTuple):
    depth: np.ndarray  # zero on masked pixels
    valid: np.ndarray
    coverage: float


def normal_gradients(normals: np.ndarray, pixel_scale: float = 1.0, eps: float = 1e-3):
    """Depth slopes per pixel step implied by camera-space normals.

    Camera x is right, y is up, z faces the viewer and depth grows away from
    it, so d(depth)/d(col) = s*n_x/n_z and d(depth)/d(row) = -s*n_y/n_z.
    """
    n = np.asarray(normals, dtype=np.float64)
    nz = n[..., 2]
    valid = nz > eps
    safe = np.where(valid, nz, 1.0)
    g_col = np.where(valid, pixel_scale * n[..., 0] / safe, 0.0)
    g_row = np.where(valid, -pixel_scale * n[..., 1] / safe, 0.0)
    return g_col, g_row, valid


def normals_from_depth(depth: np.ndarray, pixel_scale: float = 1.0) -> np.ndarray:
    """Unit normals from central-difference depth slopes (inverse of the above)."""
    d = np.asarray(depth, dtype=np.float64)
    d_row, d_col = np.gradient(d)
    return normals_from_slopes(d_col, d_row, pixel_scale)


def normals_from_slopes(d_col: np.ndarray, d_row: np.ndarray, pixel_scale: float = 1.0) -> np.ndarray:
    n = np.stack([d_col / pixel_scale, -d_row / pixel_scale, np.ones_like(d_col)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _difference_system(g_col, g_row, valid):
    h, w = valid.shape
    index = -np.ones((h, w), dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))
    rows, cols, vals, rhs = [], [], [], []
    e = 0
    # horizontal edges
    ok = valid[:, :-1] & valid[:, 1:]
    r, c = np.nonzero(ok)
    k = len(r)
    a, b = index[r, c], index[r, c + 1]
    rows += [np.arange(e, e + k)] * 2
    cols += [a, b]
    vals += [-np.ones(k), np.ones(k)]
    rhs.append(0.5 * (g_col[r, c] + g_col[r, c + 1]))
    e += k
    # vertical edges
    ok = valid[:-1, :] & valid[1:, :]
    r, c = np.nonzero(ok)
    k = len(r)
    a, b = index[r, c], index[r + 1, c]
    rows += [np.arange(e, e + k)] * 2
    cols += [a, b]
    vals += [-np.ones(k), np.ones(k)]
    rhs.append(0.5 * (g_row[r, c] + g_row[r + 1, c]))
    e += k
    n = int(valid.sum())
    A = sp.csr_matrix(
        (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
        shape=(e, n),
    )
    return A, np.concatenate(rhs) if rhs else np.zeros(0), index


def poisson_integrate(
    normals: np.ndarray,
    pixel_scale: float = 1.0,
    eps: float = 1e-3,
    tol: float = 1e-10,
) -> PoissonResult:
    """Least-squares depth whose forward differences match the normal slopes.

    Solves the Neumann Poisson system A^T A D = A^T g with each connected
    component pinned to zero mean. Pixels with n_z <= eps are masked out.
    """
    g_col, g_row, valid = normal_gradients(normals, pixel_scale, eps)
    n = int(valid.sum())
    depth = np.zeros(valid.shape)
    if n == 0:
        return PoissonResult(depth, valid, 0.0)
    A, g, index = _difference_system(g_col, g_row, valid)
    L = (A.T @ A).tocsr()
    b = A.T @ g
    ncomp, labels = connected_components(L, directed=False)
    sizes = np.bincount(labels, minlength=ncomp).astype(np.float64)
    # rank-one fixes: one per component
    P = sp.csr_matrix((1.0 / np.sqrt(sizes[labels]), (labels, np.arange(n))), shape=(ncomp, n))
    if n <= DENSE_LIMIT:
        M = L.toarray() + (P.T @ P).toarray()
        x = scipy.linalg.solve(M, b, assume_a="pos")
    else:
        op = LinearOperator((n, n), matvec=lambda v: L @ v + P.T @ (P @ v), dtype=np.float64)
        x, info = cg(op, b, rtol=tol, atol=0.0, maxiter=20 * n)
        if info != 0:
            raise RuntimeError(f"conjugate gradient did not converge (info={info})")
    # zero mean per component
    means = np.bincount(labels, weights=x, minlength=ncomp) / sizes
    x = x - means[labels]
    depth[valid] = x
    return PoissonResult(depth, valid, n / valid.size)


# ---------------------------------------------------------------------------
# pre/post report


@dataclass(frozen=True)
class EvalConfig:
    n_pairs: int = 40
    steps: int = 50
    seed: int = 0
    whdr_pairs: int = 200
    normal_threshold_deg: float = 11.25


@dataclass
class EvalReport:
    metrics: dict  # {"pre": {...}, "post": {...}}
    rewards: dict  # {modality: {"pre": r, "post": r}}
    n_images: int
    config: dict
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(**d)

    def deltas(self) -> dict:
        out = {f"reward/{m}": v["post"] - v["pre"] for m, v in self.rewards.items()}
        for k in self.metrics["pre"]:
            out[k] = self.metrics["post"][k] - self.metrics["pre"][k]
        return out

    def write_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("report has no per-image rows")
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            for row in self.rows:
                wr.writerow(row)


def _image_metrics(pred: IntrinsicStack, sample: SceneSample, whdr_j, cfg: EvalConfig) -> dict:
    dm = depth_metrics(pred.depth, sample.gt.depth)
    nm = normal_metrics(pred.normals, sample.gt.normals, cfg.normal_threshold_deg)
    rc = cyclic_reconstruction(pred, sample.rgb)
    return {
        "whdr10": whdr(pred.albedo, whdr_j[0.1], 0.1),
        "whdr20": whdr(pred.albedo, whdr_j[0.2], 0.2),
        "absrel": dm.absrel,
        "delta1": dm.delta1,
        "normal_mean_deg": nm.mean_deg,
        "normal_pct_below": nm.pct_below,
        "cyclic_rmse": rc.rmse,
        "cyclic_psnr": rc.psnr,
    }


def alignment_report(
    net_pre,
    net_post,
    samples: Mapping[int, SceneSample],
    judge: Judge,
    cfg: EvalConfig = EvalConfig(),
    judge_cfg: JudgeConfig = JudgeConfig(),
) -> EvalReport:
    """Mean alignment reward per modality and standard metrics, before and after.

    Both nets are sampled deterministically from the same starting noise and
    scored on the same pairs and judge answers.
    """
    from .grpo import agreement_reward
    from .sampler import SamplerConfig, sample_ode
    from .errors import RewardUnavailable, SamplingExhausted

    scfg = SamplerConfig(steps=cfg.steps, noise_level=0.0)
    per_mod = {m.value: {"pre": [], "post": []} for m in MODALITIES}
    agg = {"pre": [], "post": []}
    rows = []
    for image_id in sorted(samples):
        sample = samples[image_id]
        preds = {
            "pre": sample_ode(net_pre, sample.rgb, scfg, cfg.seed, "eval", image_id),
            "post": sample_ode(net_post, sample.rgb, scfg, cfg.seed, "eval", image_id),
        }
        row = {"image_id": image_id, "seed": sample.seed}
        for m in MODALITIES:
            try:
                pairs = judge.pairs(image_id, m, cfg.n_pairs, derive_seed(cfg.seed, "eval-pairs", image_id, m.value))
                answers = judge.answers(image_id, pairs, key=derive_seed(cfg.seed, "eval-key", image_id, m.value) % (1 << 31))
            except SamplingExhausted:
                row[f"reward_{m.value}_pre"] = row[f"reward_{m.value}_post"] = float("nan")
                continue
            for which in ("pre", "post"):
                try:
                    r = agreement_reward(preds[which], pairs, answers, judge_cfg)
                except RewardUnavailable:
                    r = float("nan")
                per_mod[m.value][which].append(r)
                row[f"reward_{m.value}_{which}"] = r
        h, w = sample.rgb.shape[:2]
        wp = sample_pairs(stream(cfg.seed, "whdr-pairs", image_id), (h, w), None, Modality.ALBEDO, cfg.whdr_pairs)
        whdr_j = {d: whdr_judgments(sample.gt.albedo, wp, d) for d in (0.1, 0.2)}
        for which in ("pre", "post"):
            im = _image_metrics(preds[which], sample, whdr_j, cfg)
            agg[which].append(im)
            for k, v in im.items():
                row[f"{k}_{which}"] = v
        rows.append(row)
    metrics = {
        which: {k: float(np.mean([im[k] for im in agg[which]])) for k in agg[which][0]} for which in ("pre", "post")
    }
    rewards = {
        m: {w: float(np.nanmean(v[w])) if v[w] else float("nan") for w in ("pre", "post")} for m, v in per_mod.items()
    }
    return EvalReport(metrics=metrics, rewards=rewards, n_images=len(samples), config=asdict(cfg), rows=rows)
