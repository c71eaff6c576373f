"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line straight to the
terminal (visible without ``-s``) and then asserts.
"""

import math
import time

import numpy as np
import pytest

from nddepth import checks, io
from nddepth.geometry import (PointCloud, depth_from_normal_distance, distance_from_depth_normal,
                              normal_from_depth)
from nddepth.losses import multiscale_depth_loss, silog_loss, uncertainty_target
from nddepth.metrics import COLUMNS, evaluate
from nddepth.pipeline import overfit, small_scene
from nddepth.refinement import (GruWeights, RefineConfig, conv_gru_step, gru_gates, init_hidden,
                                refine)
from nddepth.segmentation import detect_planes
from nddepth.synthetic import default_spec, generate, random_spec
from nddepth.tensor import Tensor
from oracles import close, metrics_reference


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


def interior(labels, r=2):
    """Pixels whose full (2r+1)^2 window lies inside one label."""
    h, w = labels.shape
    win = np.lib.stride_tricks.sliding_window_view(labels, (2 * r + 1, 2 * r + 1))
    same = (win == labels[r:h - r, r:w - r, None, None]).all(axis=(-1, -2))
    out = np.zeros_like(labels, dtype=bool)
    out[r:h - r, r:w - r] = same
    return out


def test_1_depth_roundtrip(report):
    worst_err, worst_time = 0.0, 0.0
    for seed in range(10):
        scene = generate(random_spec(3 + seed % 4, seed))
        start = time.perf_counter()
        depth, ok = depth_from_normal_distance(scene.normals, scene.distance, scene.intrinsics)
        worst_time = max(worst_time, time.perf_counter() - start)
        assert scene.shape == (120, 160) and ok.any()
        err = np.abs(depth[ok] - scene.depth[ok]) / scene.depth[ok]
        worst_err = max(worst_err, float(err.max()))
    report(1, "normal-distance to depth round-trip", worst_err < 1e-9 and worst_time < 1.0,
           f"max rel err {worst_err:.2e} (< 1e-9), slowest scene {worst_time:.3f} s (< 1 s)")


def test_2_gt_derivation_chain(report):
    worst_ang, worst_dist, count = 0.0, 0.0, 0
    for seed in range(5):
        scene = generate(random_spec(3 + seed % 4, 100 + seed))
        normals, valid = normal_from_depth(scene.depth, scene.intrinsics)
        dist = distance_from_depth_normal(scene.depth, normals, scene.intrinsics)
        m = interior(scene.labels) & valid
        assert m.sum() > 0.5 * interior(scene.labels).sum()
        a, b = normals[m], scene.normals[m]
        ang = np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))
        worst_ang = max(worst_ang, float(ang.max()))
        worst_dist = max(worst_dist, float(np.abs(dist[m] - scene.distance[m]).max()))
        count += int(m.sum())
    report(2, "GT derivation chain", worst_ang < 1e-6 and worst_dist < 1e-9,
           f"{count} interior px, max angle {worst_ang:.2e} rad (< 1e-6), "
           f"max distance err {worst_dist:.2e} m (< 1e-9)")


def test_3_plane_detection(report):
    scene = generate(default_spec())
    runs = [detect_planes(scene.normals, scene.distance) for _ in range(5)]
    seg, mask, _ = runs[0]
    deterministic = all((r[0].labels == seg.labels).all() and (r[1].mask == mask.mask).all()
                        for r in runs)
    sizes = np.bincount(scene.labels.ravel())
    ious = []
    for p in range(len(scene.planes)):
        gt = scene.labels == p
        ious.append(max(((seg.labels == r) & gt).sum() / ((seg.labels == r) | gt).sum()
                        for r in mask.region_ids))
    ok = (sizes > 200).all() and len(mask.region_ids) >= 3 and min(ious) >= 0.95 and deterministic
    report(3, "plane detection", ok,
           f"{len(mask.region_ids)} regions retained (>= 3), min IoU {min(ious):.4f} (>= 0.95), "
           f"deterministic over 5 runs: {deterministic}")


def test_4_gradients(report):
    worst = {}
    for seed in range(3):
        for name, err in checks.run(seed=seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    report(4, "gradient correctness", err < 1e-4,
           f"{len(worst)} components x 3 seeds, worst {name} {err:.2e} (< 1e-4)")


def test_5_gate_semantics(report):
    rng = np.random.default_rng(0)
    cfg = RefineConfig()
    h = Tensor(np.tanh(rng.normal(size=(cfg.hidden_channels, 12, 12))))
    x = Tensor(rng.normal(size=(cfg.input_channels, 12, 12)))
    w = GruWeights.random(cfg, rng)
    w.w_z.bias.data[:] = -60.0
    closed = float(np.abs(conv_gru_step(h, x, w).data - h.data).max())
    w.w_z.bias.data[:] = 60.0
    _, _, cand = gru_gates(h, x, w)
    opened = float(np.abs(conv_gru_step(h, x, w).data - cand).max())

    w = GruWeights.random(cfg, rng)
    hh = init_hidden(Tensor(rng.normal(size=(16, 12, 12))), Tensor(rng.normal(size=(16, 12, 12))))
    peak = 0.0
    for _ in range(10):
        hh = conv_gru_step(hh, Tensor(rng.normal(size=(cfg.input_channels, 12, 12))), w)
        peak = max(peak, float(np.abs(hh.data).max()))
    ok = closed < 1e-6 and opened < 1e-6 and peak < 1.0
    report(5, "ConvGRU gates", ok,
           f"closed-gate change {closed:.1e}, open-gate gap {opened:.1e} (< 1e-6), "
           f"max |h| over 10 steps {peak:.6f} (< 1)")


def test_6_neutrality_and_overfit(report):
    rng = np.random.default_rng(1)
    cfg = RefineConfig()
    w = GruWeights.random(cfg, rng)
    for head in (w.head1, w.head2):
        for t in head.tensors():
            t.data[:] = 0.0
    d1 = Tensor(rng.uniform(1, 4, size=(1, 10, 12)))
    d2 = Tensor(rng.uniform(1, 4, size=(1, 10, 12)))
    u = Tensor(rng.uniform(0, 1, size=(1, 10, 12)))
    ctx = Tensor(rng.normal(size=(cfg.context_channels, 10, 12)))
    h0 = Tensor(np.tanh(rng.normal(size=(cfg.hidden_channels, 10, 12))))
    identity = True
    for t_max in (1, 3, 6):
        res = refine(d1, d2, u, u, ctx, h0, w, t_max)
        identity &= bool((res.d1.data == d1.data).all() and (res.d2.data == d2.data).all())

    start = time.perf_counter()
    rep = overfit(small_scene(32, seed=0), steps=300, seed=0)
    seconds = time.perf_counter() - start
    ok = identity and rep.ratio <= 0.3 and seconds < 60
    report(6, "neutrality and overfit", ok,
           f"zero heads identity: {identity}; overfit {rep.losses[0]:.4f} -> {rep.losses[-1]:.4f} "
           f"ratio {rep.ratio:.3f} (<= 0.3) in {seconds:.1f} s (< 60 s)")


def test_7_analytic_losses(report):
    rng = np.random.default_rng(2)
    gt = rng.uniform(0.5, 10, size=(16, 16))
    kappa, eta, gamma = 10.0, 0.85, 0.85
    worst = 0.0
    for r in (2.0, 0.5, 1.1, 3.7, 0.05):
        got = silog_loss(Tensor(r * gt[None]), gt, kappa=kappa, eta=eta).item()
        worst = max(worst, abs(got - kappa * abs(math.log(r)) * math.sqrt(1 - eta)))
    r2 = silog_loss(Tensor(2 * gt[None]), gt).item()

    ratios1, ratios2 = (1.5, 1.2, 1.05), (0.6, 0.9, 1.01)
    p1 = [Tensor(r * gt[None]) for r in ratios1]
    p2 = [Tensor(r * gt[None]) for r in ratios2]
    m = 3
    closed = sum(gamma ** (m - s) * kappa * math.sqrt(1 - eta) * (abs(math.log(a)) + abs(math.log(b)))
                 for s, (a, b) in enumerate(zip(ratios1, ratios2), start=1))
    ms_err = abs(multiscale_depth_loss(p1, p2, gt, gamma=gamma).item() - closed)
    ok = worst < 1e-9 and ms_err < 1e-9
    report(7, "analytic loss values", ok,
           f"SILog closed-form err {worst:.1e} (r=2 gives {r2:.6f}), multiscale err {ms_err:.1e} (< 1e-9)")


def test_8_uncertainty_target(report):
    b = 0.2
    at_b = float(uncertainty_target(np.array([1.0 + b]), np.array([1.0]), b)[0])
    err_b = abs(at_b - (1 - math.exp(-1)))
    rng = np.random.default_rng(3)
    gt = rng.uniform(0.5, 10, size=100_000)
    pred = gt + rng.normal(0, 1.0, size=gt.shape) * rng.choice([1e-3, 1.0, 5.0], size=gt.shape)
    t = uncertainty_target(pred, gt, b)
    in_range = bool((t >= 0).all() and (t < 1).all())
    order = np.argsort(np.abs(pred - gt), kind="stable")
    monotone = bool((np.diff(t[order]) >= 0).all())
    ok = err_b < 1e-12 and in_range and monotone
    report(8, "uncertainty target", ok,
           f"|U(b) - (1 - 1/e)| = {err_b:.1e} (< 1e-12), 1e5 samples in [0, 1): {in_range}, "
           f"monotone: {monotone}")


def test_9_metrics_oracle(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 12, size=2)
        gt = rng.uniform(0.1, 80, size=(h, w))
        gt[rng.random(gt.shape) < 0.2] = 0.0
        gt.flat[0] = rng.uniform(0.1, 80)
        pred = np.where(gt > 0, gt * np.exp(rng.normal(0, 0.4, size=gt.shape)), 1.0)
        ref = metrics_reference(pred, gt)
        got = evaluate(pred, gt).as_dict()
        for k in COLUMNS:
            assert close(got[k], ref[k], 1e-12), k
            worst = max(worst, abs(got[k] - ref[k]) / max(1.0, abs(ref[k])))
    x = rng.uniform(0.5, 50, size=(9, 9))
    ident = evaluate(x, x)
    exact = all(getattr(ident, k) == 0.0 for k in ("abs_rel", "sq_rel", "rmse", "rmse_log",
                                                   "log10", "silog_eval", "irmse")) \
        and (ident.delta1, ident.delta2, ident.delta3) == (1.0, 1.0, 1.0)
    report(9, "metrics oracle", worst <= 1e-12 and exact,
           f"100 pairs, worst rel deviation {worst:.1e} (<= 1e-12), identity report exact: {exact}")


def test_10_io_roundtrips(report, tmp_path):
    rng = np.random.default_rng(5)
    fails = {"pfm": 0, "pgm": 0, "weights": 0, "ply": 0}
    for i in range(100):
        h, w = (int(v) for v in rng.integers(0, 20, size=2))
        img = rng.standard_normal((h, w, 3) if i % 3 == 0 else (h, w)).astype(np.float32)
        img *= np.float32(10.0 ** rng.integers(-30, 30))
        write_le = bool(i % 2)
        io.write_pfm(tmp_path / "a.pfm", img, little_endian=write_le)
        back = io.read_pfm(tmp_path / "a.pfm")
        fails["pfm"] += not (back.shape == img.shape and np.array_equal(back, img))

        top = 255 if i % 2 else 65535
        gray = rng.integers(0, top + 1, size=(h, w))
        io.write_pgm(tmp_path / "a.pgm", gray, maxval=top)
        fails["pgm"] += not np.array_equal(io.read_pgm(tmp_path / "a.pgm"), gray)

        tensors = {f"t{j}.{'x' * int(rng.integers(0, 5))}":
                   rng.standard_normal(tuple(int(d) for d in rng.integers(0, 5, size=rng.integers(0, 4))))
                   for j in range(int(rng.integers(0, 6)))}
        io.write_weights(tmp_path / "w.bin", tensors)
        got = io.read_weights(tmp_path / "w.bin")
        fails["weights"] += not (list(got) == list(tensors) and all(
            got[k].shape == v.shape and np.array_equal(got[k], v) for k, v in tensors.items()))

        n = int(rng.integers(0, 50))
        pts = (rng.standard_normal((n, 3)) * 10.0 ** rng.integers(-5, 5)).astype(np.float32)
        colors = rng.integers(0, 256, size=(n, 3)) if i % 2 else None
        io.write_ply(PointCloud(pts, colors), tmp_path / "a.ply", binary=True)
        cloud = io.read_ply(tmp_path / "a.ply")
        same = np.array_equal(cloud.points.astype(np.float32), pts)
        same &= (colors is None and cloud.colors is None) or (
            colors is not None and np.array_equal(cloud.colors, colors))
        fails["ply"] += not same
    ok = not any(fails.values())
    report(10, "I/O round-trips", ok,
           "100 fuzz cases each, failures " + ", ".join(f"{k}={v}" for k, v in fails.items()))
