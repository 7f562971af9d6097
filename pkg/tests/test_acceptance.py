"""Acceptance suite: ten end-to-end checks, each printing one PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import EQUIV_DIMS, random_denoisers
from test_evalkit import brute_force_metrics, random_instance
from denoisefuse.backbone import make_toy_backbone, param_count
from denoisefuse.cli import main
from denoisefuse.config import DEFAULT_CONFIG, mode_from, schedule_from, train_config_from
from denoisefuse.denoiser import DenoiseLayer, denoise_step, grad_loss_p, loss_p, train_denoisers
from denoisefuse.evalkit import bench_many, compute_cmc, compute_map, evaluate_dataset, gen_synthetic
from denoisefuse.fusion import (FusionMode, explicit_forward, fuse_model, fuse_two_step,
                                verify_equivalence)
from denoisefuse.numerics import Rng
from denoisefuse.schedule import build_schedule, forward_noise

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, elapsed, limit):
        ok = ok and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] AC{number} {title}: {detail} ({elapsed:.2f}s / limit {limit}s)")
        return ok
    return emit


def benchmark(seed):
    """Default synthetic benchmark for one seed: dataset, frozen backbone, schedule and train config."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["seed"] = seed
    d = cfg["data"]
    ds = gen_synthetic(d["num_ids"], d["per_id"], d["dim"], d["noise_level"], seed,
                       query_per_id=d["query_per_id"], signal_rank=d["signal_rank"])
    bb = make_toy_backbone(seed, cfg["backbone"]["dims"], cfg["backbone"]["activation"])
    return cfg, ds, bb, schedule_from(cfg), train_config_from(cfg)


def folded_affine(f, d_in):
    """Recover (A, c) of an affine map f by probing zero and the unit vectors."""
    c = f(np.zeros(d_in))
    A = np.stack([f(e) - c for e in np.eye(d_in)], axis=1)
    return A, c


def test_ac1_fusion_equivalence(report):
    start = time.perf_counter()
    s = build_schedule()
    bb = make_toy_backbone(7, EQUIV_DIMS, "none")
    ds = random_denoisers(bb, 1)
    mode = FusionMode()
    fm = fuse_model(bb, ds, s, mode)
    rep = verify_equivalence(bb, ds, fm, s, mode, samples=1000, tol=1e-9)
    # second, independent reference on fresh inputs
    X = Rng(123).standard_normal((1000, bb.d_in))
    ref = explicit_forward(bb, ds, s, X, mode)
    rel = np.max(np.linalg.norm(fm(X) - ref, axis=1) / np.linalg.norm(ref, axis=1))
    ok = rep["pass"] and rel <= 1e-9
    assert report(1, "fusion equivalence", ok,
                  f"max_rel_err={max(rep['max_rel_err'], rel):.2e} <= 1e-9",
                  time.perf_counter() - start, 5)


def test_ac2_two_step_closed_form(report):
    start = time.perf_counter()
    s = build_schedule()
    r = Rng(2)
    worst = 0.0
    for i, rng in enumerate(r.split(100)):
        d_out, d_in = 3 + i % 5, 2 + i % 7
        W, b = rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)
        WD = 0.5 * rng.standard_normal((d_in, d_in)) / np.sqrt(d_in)
        t = 2 + int(rng.permutation(s.T - 1)[0])
        W2, b2 = fuse_two_step(W, b, WD, t, s)
        d = DenoiseLayer(WD, 0, t)
        A, c = folded_affine(lambda x: W @ denoise_step(denoise_step(x, t, d, s), t - 1, d, s) + b, d_in)
        worst = max(worst, np.linalg.norm(W2 - A) / np.linalg.norm(A), np.linalg.norm(b2 - c) / np.linalg.norm(c))
    assert report(2, "two-step closed form", worst <= 1e-9, f"max_rel_err={worst:.2e} <= 1e-9 over 100",
                  time.perf_counter() - start, 5)


def test_ac3_zero_denoiser_fixed_point(report):
    start = time.perf_counter()
    s = build_schedule()
    bb = make_toy_backbone(5, EQUIV_DIMS, "relu")
    ds = [DenoiseLayer.zeros(blk.d_in, k, bb.N - k) for k, blk in enumerate(bb.blocks)]
    fm = fuse_model(bb, ds, s, FusionMode(algebra="paper_literal"))
    same_w = all(x.tobytes() == y.tobytes() for x, y in zip(bb.arrays(), fm.arrays()))
    X = Rng(0).standard_normal((100, bb.d_in))
    same_out = fm(X).tobytes() == bb(X).tobytes()
    assert report(3, "zero-denoiser fixed point", same_w and same_out,
                  f"weights bitwise equal={same_w}, outputs identical={same_out}",
                  time.perf_counter() - start, 1)


def test_ac4_gradient_correctness(report):
    start = time.perf_counter()
    s = build_schedule()
    h = 1e-6
    worst = 0.0
    for rng in Rng(4).split(100):
        dim = 4
        t = 1 + int(rng.permutation(s.T)[0])
        W = rng.standard_normal((dim, dim))
        x0, eps = rng.standard_normal((3, dim)), rng.standard_normal((3, dim))
        G = grad_loss_p(DenoiseLayer(W, 0, t), x0, t, eps, s)
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            Wp, Wm = W.copy(), W.copy()
            Wp[idx] += h
            Wm[idx] -= h
            fd[idx] = (loss_p(DenoiseLayer(Wp, 0, t), x0, t, eps, s)
                       - loss_p(DenoiseLayer(Wm, 0, t), x0, t, eps, s)) / (2 * h)
        worst = max(worst, np.linalg.norm(G - fd) / np.linalg.norm(fd))
    assert report(4, "gradient vs central differences", worst <= 1e-5,
                  f"max_rel_err={worst:.2e} <= 1e-5 over 100", time.perf_counter() - start, 10)


def test_ac5_training_efficacy(report):
    start = time.perf_counter()
    ratios = {}
    for seed in (41, 42, 43):
        cfg, ds, bb, s, tcfg = benchmark(seed)
        _, rep = train_denoisers(bb, ds.train, s, tcfg)
        ratios[seed] = max(f / i for f, i in zip(rep.final_losses, rep.initial_losses))
    ok = all(r <= 0.5 for r in ratios.values())
    detail = ", ".join(f"seed {k}: worst final/initial={v:.3f}" for k, v in ratios.items())
    assert report(5, "training efficacy", ok, detail + " (<= 0.5)", time.perf_counter() - start, 60)


def test_ac6_forward_noising_moments(report):
    start = time.perf_counter()
    s = build_schedule()
    x0 = np.array([1.5, -0.5, 2.0, 0.0])
    worst_mean, worst_var = 0.0, 0.0
    for t, rng in zip((1, 10, 100, 1000), Rng(6).split(4)):
        eps = rng.standard_normal((100_000, x0.size))
        xt = forward_noise(s, np.broadcast_to(x0, eps.shape), t, eps)
        worst_mean = max(worst_mean, np.max(np.abs(xt.mean(axis=0) - np.sqrt(s.abar(t)) * x0)))
        worst_var = max(worst_var, np.max(np.abs(xt.var(axis=0) / (1 - s.abar(t)) - 1)))
    ok = worst_mean <= 1e-2 and worst_var <= 0.03
    assert report(6, "forward-noising moments", ok,
                  f"mean err={worst_mean:.2e} <= 1e-2, var rel err={worst_var:.2%} <= 3%",
                  time.perf_counter() - start, 30)


def test_ac7_computation_free(report):
    start = time.perf_counter()
    cfg, ds, bb, s, tcfg = benchmark(42)
    layers, _ = train_denoisers(bb, ds.train, s, tcfg)
    mode = mode_from(cfg)
    fm = fuse_model(bb, layers, s, mode)
    batch = Rng(7).standard_normal((cfg["eval"]["batch"], bb.d_in))
    lat = bench_many({"baseline": bb, "fused": fm,
                      "explicit": lambda X: explicit_forward(bb, layers, s, X, mode)}, batch, repeats=101)
    same_params = param_count(fm) == param_count(bb)
    ratio = lat["fused"] / lat["baseline"]
    ok = same_params and abs(ratio - 1) <= 0.10 and lat["explicit"] > lat["fused"]
    assert report(7, "computation-free fusion", ok,
                  f"params {param_count(fm)}=={param_count(bb)}, fused/baseline latency={ratio:.3f}, "
                  f"explicit={lat['explicit']:.0f} > fused={lat['fused']:.0f} ns/sample",
                  time.perf_counter() - start, 60)


def test_ac8_directional_retrieval(report):
    start = time.perf_counter()
    gains = []
    for seed in range(41, 51):
        cfg, ds, bb, s, tcfg = benchmark(seed)
        layers, _ = train_denoisers(bb, ds.train, s, tcfg)
        fm = fuse_model(bb, layers, s, mode_from(cfg), Rng(seed))
        metric = cfg["eval"]["metric"]
        gains.append(evaluate_dataset(ds.map(fm), metric).map - evaluate_dataset(ds.map(bb), metric).map)
    wins = sum(g >= 0 for g in gains)
    ok = wins >= 8 and np.mean(gains) > 0
    assert report(8, "directional retrieval", ok,
                  f"fused >= baseline mAP in {wins}/10 seeds, mean gain={np.mean(gains):+.4f}",
                  time.perf_counter() - start, 300)


def test_ac9_metric_correctness(report):
    start = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        q, qids, g, gids = random_instance(1000 + seed)
        want_map, want_cmc = brute_force_metrics(q.tolist(), qids.tolist(), g.tolist(), gids.tolist(), 5)
        got_map = compute_map(q, qids, g, gids)
        got_cmc = compute_cmc(q, qids, g, gids, max_k=5)
        if abs(got_map - want_map) > 1e-15 or list(got_cmc) != want_cmc:
            mismatches += 1
    assert report(9, "metric correctness", mismatches == 0, f"{50 - mismatches}/50 instances match",
                  time.perf_counter() - start, 10)


def test_ac10_determinism(report, tmp_path):
    start = time.perf_counter()
    runner = CliRunner()
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        for cmd in ("gen-data", "train", "fuse", "verify"):
            res = runner.invoke(main, [cmd, "-s", f"paths.out_dir={out}", "-s", "seed=42"])
            assert res.exit_code == 0, res.output
        outputs.append({p.relative_to(out).as_posix(): p.read_bytes()
                        for p in sorted(out.rglob("*")) if p.is_file()})
    same = outputs[0] == outputs[1]
    assert report(10, "CLI determinism", same,
                  f"{len(outputs[0])} files byte-identical across two runs={same}",
                  time.perf_counter() - start, 120)
