import json

import numpy as np
import pytest

from conftest import random_stack
from oracles import whdr_recount
from ixgrpo.flowcore import Arch, VelocityNet
from ixgrpo.judge import OracleJudge
from ixgrpo.metrics import (
    DENSE_LIMIT,
    PSNR_CAP,
    EvalConfig,
    EvalReport,
    alignment_report,
    cyclic_reconstruction,
    depth_metrics,
    normal_metrics,
    normals_from_depth,
    poisson_integrate,
    whdr,
    whdr_judgments,
)
from ixgrpo.scenegen import SceneGenConfig, generate_scene


def smooth_surface(rng, n=32):
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    d = 1.0 + 0.2 * rng.uniform(-1, 1) * xx + 0.2 * rng.uniform(-1, 1) * yy
    for _ in range(3):
        fx, fy, ph = rng.uniform(0.3, 1.5, size=2).tolist() + [rng.uniform(0, 2 * np.pi)]
        d += 0.02 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return d


def rmse_up_to_constant(a, b):
    diff = a - b
    return float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))


def test_whdr_matches_recount():
    rng = np.random.default_rng(0)
    for _ in range(10):
        gt, pred = random_stack(rng).albedo, random_stack(rng).albedo
        pairs = [((int(a), int(b)), (int(c), int(d))) for a, b, c, d in rng.integers(0, 8, (60, 4))]
        for delta in (0.1, 0.2):
            j = whdr_judgments(gt, pairs, delta)
            assert whdr(pred, j, delta) == pytest.approx(whdr_recount(pred, j, delta), abs=1e-12)
            assert whdr(gt, j, delta) == 0.0


def test_whdr_weights_and_errors():
    alb = np.float32([[[0.2] * 3, [0.8] * 3]])
    j = [((0, 0), (0, 1), "1"), ((0, 0), (0, 1), "2")]
    assert whdr(alb, j) == 0.5
    assert whdr(alb, j, weights=[3.0, 1.0]) == 0.25
    with pytest.raises(ValueError):
        whdr(alb, [])


def test_depth_metrics_are_affine_invariant():
    gt = np.random.default_rng(1).uniform(0.5, 2.0, (16, 16))
    m = depth_metrics(3.0 * gt - 0.7, gt)
    assert m.absrel < 1e-12 and m.delta1 == 1.0 and m.clamped == 0
    with pytest.raises(ValueError):
        depth_metrics(gt, gt - 1.0)


def test_normal_metrics():
    rng = np.random.default_rng(2)
    n = random_stack(rng).normals.astype(np.float64)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    assert normal_metrics(5.0 * n, n).mean_deg < 1e-4
    tilt = np.zeros((1, 1, 3))
    tilt[0, 0] = [np.sin(np.radians(10)), 0, np.cos(np.radians(10))]
    up = np.float64([[[0, 0, 1]]])
    assert normal_metrics(tilt, up) == pytest.approx((10.0, 100.0))
    assert normal_metrics(np.zeros((1, 1, 3)), up).mean_deg == 90.0


def test_cyclic_reconstruction_caps_psnr():
    st = random_stack(np.random.default_rng(3))
    rgb = np.clip(st.albedo.astype(np.float64) * st.irradiance[..., None], 0, 1)
    assert cyclic_reconstruction(st, rgb) == (0.0, PSNR_CAP)
    r = cyclic_reconstruction(st, rgb + 0.1)
    assert r.psnr == pytest.approx(20.0, abs=0.5)


def test_poisson_recovers_plane_exactly():
    yy, xx = np.mgrid[0:20, 0:20]
    depth = 0.3 * xx - 0.2 * yy
    res = poisson_integrate(normals_from_depth(depth, 0.5), 0.5)
    assert res.coverage == 1.0
    assert rmse_up_to_constant(res.depth, depth) < 1e-9
    assert abs(res.depth.mean()) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_poisson_recovers_smooth_surfaces(seed):
    d = smooth_surface(np.random.default_rng(seed))
    res = poisson_integrate(normals_from_depth(d, 0.05), 0.05)
    assert rmse_up_to_constant(res.depth, d) < 1e-3


def test_poisson_iterative_path_agrees_with_direct(monkeypatch):
    import ixgrpo.metrics as m

    d = smooth_surface(np.random.default_rng(9), 70)  # 4900 unknowns
    assert d.size > DENSE_LIMIT
    normals = normals_from_depth(d, 0.05)
    cg = poisson_integrate(normals, 0.05)
    monkeypatch.setattr(m, "DENSE_LIMIT", 10**6)
    direct = poisson_integrate(normals, 0.05)
    assert np.abs(cg.depth - direct.depth).max() < 1e-6


def test_poisson_masks_grazing_normals():
    n = np.tile([0.0, 0.0, 1.0], (6, 6, 1))
    n[:, 3] = [1.0, 0.0, 0.0]  # split into two components
    res = poisson_integrate(n)
    assert not res.valid[:, 3].any()
    assert res.coverage == pytest.approx(30 / 36)
    assert np.all(res.depth[:, 3] == 0)
    # each component is pinned to zero mean separately
    assert abs(res.depth[:, :3].mean()) < 1e-12 and abs(res.depth[:, 4:].mean()) < 1e-12


def test_eval_report_round_trip_and_self_comparison(tmp_path):
    samples = {i: generate_scene(i, SceneGenConfig(resolution=16)) for i in range(3)}
    net = VelocityNet(Arch(widths=(8, 8), dilations=(1, 1)), seed=0)
    cfg = EvalConfig(steps=4, n_pairs=10, whdr_pairs=30)
    rep = alignment_report(net, net, samples, OracleJudge(samples), cfg)
    assert rep.n_images == 3 and len(rep.rows) == 3
    assert all(v == 0.0 for v in rep.deltas().values() if not np.isnan(v))
    back = EvalReport.from_json(rep.to_json())
    assert json.loads(back.to_json()) == json.loads(rep.to_json())
    rep.write_csv(tmp_path / "rows.csv")
    assert (tmp_path / "rows.csv").read_text().startswith("image_id,")
