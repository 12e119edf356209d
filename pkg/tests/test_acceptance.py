"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints under
"acceptance criteria".
"""
from __future__ import annotations

import json
import math
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import make_sample, record
from grazing import cli
from grazing.dataset import GRAZING, compute_channel_stats
from grazing.evaluation import ConfusionMatrix, MetricsReport, aggregate, metrics
from grazing.model import (
    EnsembleParams, configure_ablation, forward, init_params, predict_ensemble, prepare_input,
)
from grazing.oracles import TOLERANCE, run_suite
from grazing.planner import (
    InspectionScenario, advantage_ratio, expected_flagged, expected_found, monte_carlo,
)
from grazing.storage import load_checkpoint
from grazing.training import TemporalDropout, temporal_dropout_keep

# Reduced epoch count for the synthetic end-to-end run: 300 epochs x 10 members x 3
# datasets is far beyond the 30 minute budget. 10 epochs roughly fills the budget on
# one core; 20 epochs took twice as long without lifting the weaker datasets to 0.90.
E2E_EPOCHS = 10
# members train concurrently; results do not depend on the thread count
E2E_THREADS = os.cpu_count() or 1
E2E_DATA_SEEDS = (1, 2, 3)


def test_criterion_1_gradient_oracle():
    t = time.perf_counter()
    results = run_suite(seeds=20)
    seconds = time.perf_counter() - t
    worst = max(results, key=lambda r: r.max_error)
    ok = all(r.passed for r in results) and seconds < 120
    record("1 gradient oracle", ok,
           f"{len(results)} checks x 20 seeds, worst {worst.name} {worst.max_error:.2e} < {TOLERANCE:g}, {seconds:.0f}s")
    failing = [(r.name, r.max_error) for r in results if not r.passed]
    assert not failing
    assert seconds < 120


TABLE1 = {
    "acc": 0.797, "f1": 0.794, "prec": 0.810, "rec": 0.795,
    "prec_gz": 0.750, "prec_no": 0.870, "rec_gz": 0.900, "rec_no": 0.690,
}
TABLE1_ACC = (0.797, 0.770, 0.772, 0.733, 0.807)


def test_criterion_2_metrics_oracle():
    r = metrics(ConfusionMatrix(tp_gz=27, fn_gz=3, fp_gz=9, tn_gz=20))
    diffs = {k: abs(getattr(r, k) - v) for k, v in TABLE1.items()}
    reports = [MetricsReport(acc=a, f1=0, prec=0, rec=0, prec_gz=0, prec_no=0, rec_gz=0, rec_no=0)
               for a in TABLE1_ACC]
    mean, median = aggregate(reports)
    ok = max(diffs.values()) <= 5e-4 and abs(mean.acc - 0.776) <= 5e-4 and abs(median.acc - 0.772) <= 5e-4
    record("2 metrics oracle", ok,
           f"max column diff {max(diffs.values()):.1e}, acc mean {mean.acc:.4f} median {median.acc:.4f}")
    assert max(diffs.values()) <= 5e-4, diffs
    assert mean.acc == pytest.approx(0.776, abs=5e-4)
    assert median.acc == pytest.approx(0.772, abs=5e-4)


def test_criterion_3_planner():
    t = time.perf_counter()
    s = InspectionScenario()
    f = expected_flagged(s)
    closed = [
        abs(f - 401.16) <= 0.01,
        abs(expected_found(s, "targeted", 401) - 345.0) <= 0.5,
        abs(expected_found(s, "targeted", 100) - 86.0) <= 1e-9,
        abs(expected_found(s, "random", 100) - 5.0) <= 1e-12,
    ]
    grid = np.linspace(1e-4, f / s.n_sites, 200)
    ratio_err = max(abs(advantage_ratio(s, p) - 17.2) for p in grid)
    closed.append(ratio_err <= 1e-9)
    mc = {}
    for v in (50, 100, 401, 1000):
        res = monte_carlo(s, v, trials=100_000, seed=0)
        mc[v] = res.mean / expected_found(s, "targeted", v) - 1.0
    seconds = time.perf_counter() - t
    mc_ok = all(abs(e) <= 0.01 for e in mc.values())
    ok = all(closed) and mc_ok and seconds < 60
    worst = max(mc, key=lambda v: abs(mc[v]))
    record("3 planner", ok,
           f"closed forms {'ok' if all(closed) else 'FAIL'}, MC rel. error "
           + ", ".join(f"V={v}: {e:+.2%}" for v, e in mc.items())
           + f" (worst V={worst}), {seconds:.1f}s")
    assert all(closed)
    assert seconds < 60
    assert mc_ok, f"Monte Carlo off by more than 1%: {mc}"


def _e2e_one(tmp_path, data_seed):
    d = tmp_path / f"data{data_seed}"
    ckpt = tmp_path / f"m{data_seed}.ckpt"
    report = tmp_path / f"eval{data_seed}.json"
    assert cli.main(["gen-data", "--out", str(d), "--n", "407", "--balance", str(253 / 407),
                     "--seed", str(data_seed)]) == 0
    assert cli.main(["train", "--data", str(d), "--out", str(ckpt), "--seed", "0",
                     "--epochs", str(E2E_EPOCHS), "--threads", str(E2E_THREADS)]) == 0
    assert cli.main(["eval", "--data", str(d), "--checkpoint", str(ckpt), "--split", "val",
                     "--out", str(report)]) == 0
    sidecar = json.loads((tmp_path / f"m{data_seed}.ckpt.run.json").read_text())
    return json.loads(report.read_text()), sidecar


@pytest.mark.slow
def test_criterion_4_synthetic_end_to_end(tmp_path):
    t = time.perf_counter()
    rows = []
    for seed in E2E_DATA_SEEDS:
        rep, sidecar = _e2e_one(tmp_path, seed)
        assert sidecar["epoch_override"] == {"default": 300, "used": E2E_EPOCHS}
        assert sidecar["config"]["train"]["epochs"] == E2E_EPOCHS
        rows.append((seed, rep["metrics"]["f1"], rep["mean_member_f1"], rep["n"]))
    minutes = (time.perf_counter() - t) / 60
    f1_ok = all(f1 >= 0.90 for _, f1, _, _ in rows)
    ens_ok = all(f1 >= m - 0.02 for _, f1, m, _ in rows)
    ok = f1_ok and ens_ok and minutes < 30
    record("4 synthetic end-to-end", ok,
           "; ".join(f"data seed {s}: ensemble F1 {f:.3f}, mean member {m:.3f} (n_val={n})" for s, f, m, n in rows)
           + f"; {E2E_EPOCHS} epochs, {E2E_THREADS} thread(s), {minutes:.1f} min")
    assert f1_ok, rows
    assert ens_ok, rows
    assert minutes < 30


EXPECTED_CHANNELS = {"main": 13, "no_rgb": 9, "no_rgb_no_veg": 6, "only_rgb_veg": 6, "poly_input": 14}
EXPECTED_MODES = {
    "main": ("masked", "last_four"), "only_last": ("masked", "only_last"), "no_poly": ("no_poly", "last_four"),
    "poly_input": ("poly_extra_channel", "last_four"), "no_rgb": ("masked", "last_four"),
    "no_rgb_no_veg": ("masked", "last_four"), "only_rgb_veg": ("masked", "last_four"),
}


def test_criterion_5_ablation_shapes_and_mask_invariance():
    channels = {k: configure_ablation(k).input_channels for k in EXPECTED_CHANNELS}
    modes = {k: (configure_ablation(k).input_mode, configure_ablation(k).classifier_mode) for k in EXPECTED_MODES}
    assert channels == EXPECTED_CHANNELS
    assert modes == EXPECTED_MODES

    cfg = configure_ablation("main")
    sample = make_sample(frames=6, seed=3)
    stats = compute_channel_stats([sample])
    params = init_params(cfg, 5)
    ref, _ = forward(prepare_input(sample, stats, cfg), params, cfg)
    rng = np.random.default_rng(0)
    outside = ~sample.polygon_mask
    same = 0
    for _ in range(10):
        refl = sample.reflectance.copy()
        refl[:, outside, :] = rng.uniform(0, 1, size=refl[:, outside, :].shape).astype(refl.dtype)
        noisy = type(sample)(**{**sample.__dict__, "reflectance": refl})
        logits, _ = forward(prepare_input(noisy, stats, cfg), params, cfg)
        same += int(np.array_equal(logits, ref))
    ok = same == 10
    record("5 ablation shapes", ok, f"channel counts {channels}, masked logits bitwise equal in {same}/10 randomizations")
    assert same == 10


def test_criterion_6_determinism(tmp_path):
    d = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(d), "--n", "30", "--seed", "4"]) == 0
    paths = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        p = tmp_path / f"{name}.ckpt"
        assert cli.main(["train", "--data", str(d), "--out", str(p), "--seed", "9", "--epochs", "2",
                         "--members", "4", "--threads", threads]) == 0
        paths.append(p)
    same_bytes = paths[0].read_bytes() == paths[1].read_bytes()
    ens1, ens4 = load_checkpoint(paths[0]), load_checkpoint(paths[2])
    batch = [make_sample(frames=t, seed=t, site_id=f"b{t}") for t in (3, 7, 12)]
    stats = ens1.stats
    preds1 = [predict_ensemble(prepare_input(s, stats, ens1.config), ens1) for s in batch]
    preds4 = [predict_ensemble(prepare_input(s, stats, ens4.config), ens4) for s in batch]
    params_equal = all(np.array_equal(a.tensors[k], b.tensors[k])
                       for a, b in zip(ens1.members, ens4.members) for k in a.tensors)
    ok = same_bytes and preds1 == preds4 and params_equal
    record("6 determinism", ok,
           f"repeat run checkpoints {'byte-identical' if same_bytes else 'DIFFER'}, "
           f"--threads 4 vs 1 predictions {'identical' if preds1 == preds4 else 'DIFFER'}")
    assert same_bytes
    assert params_equal
    assert preds1 == preds4


def test_criterion_7_temporal_dropout_statistics():
    rng = np.random.default_rng(2024)
    cfg = TemporalDropout()
    n, T = 100_000, 40
    kept = np.fromiter((temporal_dropout_keep(T, rng, cfg).sum() for _ in range(n)), dtype=np.int64, count=n)
    frac = kept / T
    mean = frac.mean()
    sigma = frac.std(ddof=1) / math.sqrt(n)
    expected = 1 - cfg.series_prob * cfg.step_prob
    ok = abs(mean - expected) <= 3 * sigma and kept.min() >= 4
    record("7 temporal dropout", ok,
           f"mean survivor fraction {mean:.5f} vs {expected} ({abs(mean - expected) / sigma:.2f} sigma), "
           f"min survivors {kept.min()}")
    assert abs(mean - expected) <= 3 * sigma
    assert kept.min() >= 4


def _median_latency_ms(sample, ens, repeats=25):
    times = []
    with threadpool_limits(limits=1):
        for _ in range(repeats):
            t = time.perf_counter()
            pred = predict_ensemble(prepare_input(sample, ens.stats, ens.config), ens)
            times.append(time.perf_counter() - t)
    assert pred in (0, GRAZING)
    return 1e3 * float(np.median(times[5:]))


def test_criterion_8_inference_latency(small_raw, small_samples):
    cfg = configure_ablation("main")
    # a generated field of median polygon size, truncated to 30 frames
    typical = sorted(small_raw, key=lambda s: int(s.polygon_mask.sum()))[len(small_raw) // 2]
    assert typical.n_frames >= 30
    typical = typical.select_frames(np.arange(typical.n_frames) >= typical.n_frames - 30)
    stats = compute_channel_stats(small_samples)
    ens = EnsembleParams(cfg, [init_params(cfg, i) for i in range(10)], stats)
    ms = _median_latency_ms(typical, ens)
    # informational: a polygon covering most of the chip
    worst = _median_latency_ms(make_sample(frames=30, seed=8), ens, repeats=8)
    ok = ms < 20
    record("8 inference latency (soft)", ok,
           f"10-member ensemble on T=30: median {ms:.1f} ms for a typical field "
           f"({int(typical.polygon_mask.sum())} px polygon), {worst:.0f} ms for a near-full-chip polygon; target < 20 ms")
    assert ms < 20
