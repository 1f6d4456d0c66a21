"""Acceptance criteria 1-10, one pass/fail line each in the terminal summary.

Criteria 1, 2, 7, 8 and 9 read the artifacts of the full LeNet/MNIST run in
``runs/lenet`` (override with FITPATH_RUN_DIR), produced by::

    fitpath train    --config configs/lenet_mnist.json
    fitpath compress --config configs/lenet_mnist.json
    fitpath finetune --config configs/lenet_mnist.json
    fitpath eval     --config configs/lenet_mnist.json
    fitpath report   --config configs/lenet_mnist.json
    fitpath ablate iterative-pruning --config configs/lenet_mnist.json
    fitpath ablate scheduling        --config configs/lenet_mnist.json

The others compute their evidence here.
"""
import csv
import json
import math
import os
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, make_fake_mnist, mnist_dir
from test_autodiff import check_op, weighted_sum
from test_fisher import loop_fisher
from test_planner import TOY_Q, oracle
from fitpath import autodiff as ad
from fitpath.cli import EXIT_OK, main
from fitpath.compression import CompressionConfig, quantize_weights
from fitpath.data import calibration_set, load_mnist, synthetic_blobs
from fitpath.fisher import estimate_fisher, fisher_diagonal
from fitpath.models import build_lenet, build_mlp, load_checkpoint
from fitpath.planner import PRUNE, QUANT_A, QUANT_W, QUANT_WA, SearchOptions, fitcompress_search, read_trace, \
    relative_bops
from fitpath.runconfig import RunConfig
from fitpath.training import TrainSpec, train_baseline

ROOT = Path(__file__).resolve().parents[1]
RUN = Path(os.environ.get("FITPATH_RUN_DIR", ROOT / "runs" / "lenet"))
CONFIG = ROOT / "configs" / "lenet_mnist.json"


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def need(n: int, *names: str) -> list[Path]:
    paths = [RUN / name for name in names]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        ACCEPTANCE.append(f"criterion {n} SKIP: missing {', '.join(missing)} in {RUN}")
        pytest.skip(f"missing artifacts {missing}")
    return paths


def load_json(p: Path):
    return json.loads(p.read_text())


def manifest_seconds(command: str) -> float:
    return load_json(RUN / "manifest.json")["commands"][command]["seconds"]


def test_criterion_1_baseline_accuracy():
    (metrics,) = need(1, "baseline_metrics.json", "manifest.json")[:1]
    m = load_json(metrics)
    secs = manifest_seconds("train")
    ok = m["accuracy"] >= 0.990 and secs <= 2 * 3600
    record(1, ok, f"FP32 test accuracy {100 * m['accuracy']:.2f}% (>= 99.0) after {m['epochs']} epochs, "
                  f"{secs / 60:.0f} min (<= 120)")


def test_criterion_2_joint_headline():
    search, tune, metrics = need(2, "search.json", "finetune.json", "metrics.json", "manifest.json")[:3]
    s, t, m = load_json(search), load_json(tune), load_json(metrics)
    assert s["schedule"] == "fitcompress" and s["alpha_target"] == 0.005, "runs/lenet holds a different search"
    search_s, tune_s = manifest_seconds("compress"), manifest_seconds("finetune")
    ok = (t["accuracy_after"] >= 0.983 and s["alpha"] <= 0.005 and m["relative_bops"] <= 0.005
          and search_s <= 15 * 60 and tune_s <= 3600)
    record(2, ok, f"accuracy {100 * t['accuracy_before']:.2f}% -> {100 * t['accuracy_after']:.2f}% (>= 98.3) at "
                  f"alpha {100 * s['alpha']:.4f}% (<= 0.5), sparsity {100 * s['sparsity']:.2f}%, "
                  f"search {search_s / 60:.1f} min (<= 15), fine-tune {tune_s / 60:.1f} min (<= 60)")


def test_criterion_3_cost_anchors():
    m = build_lenet()
    ident = CompressionConfig.identity(m)
    int8 = ident
    for l in m.quantizable_layers():
        int8 = int8.with_bits(l, w=8, a=8)
    a, b = relative_bops(m, ident), relative_bops(m, int8)
    record(3, a == 1.0 and b == 0.0625, f"identity {100 * a}%, 8/8 unpruned {100 * b}% (exact 100 and 6.25)")


def test_criterion_4_planner_vs_oracle():
    detail, ok = [], True
    for seed in (0, 1, 2):
        ds = synthetic_blobs(4, 512, 8, seed=seed, separation=10.0)
        model, _ = train_baseline(build_mlp([8, 16, 4], seed=seed + 3), ds, None,
                                  TrainSpec(epochs=10, batch=32, lr=1e-2))
        x, y = ds.images[:256], ds.labels[:256]
        cfg, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=0.01, opts=SearchOptions(joint_wa=True))
        score, ocfg, og, tied = oracle(model, x, y, TOY_Q, 0.01, 0.5)
        same = (tuple((r.action, r.layer) for r in st.trace[1:]) in tied and cfg.w_bits == ocfg.w_bits
                and cfg.a_bits == ocfg.a_bits and cfg.mask.digest() == ocfg.mask.digest()
                and math.isclose(st.trace[-1].score, score, rel_tol=1e-9) and math.isclose(st.g_hat, og, rel_tol=1e-9))
        ok &= same
        detail.append(f"seed {seed} {'match' if same else 'MISMATCH'}")
    # wider grid, informational: greedy can stop on a worse path when fewer actions suffice
    misses = []
    ds = synthetic_blobs(4, 512, 8, seed=0, separation=10.0)
    model, _ = train_baseline(build_mlp([8, 16, 4], seed=3), ds, None, TrainSpec(epochs=10, batch=32, lr=1e-2))
    x, y = ds.images[:256], ds.labels[:256]
    targets = (0.05, 0.04, 0.03, 0.02, 0.015, 0.01, 0.008)
    for t in targets:
        cfg, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=t, opts=SearchOptions(joint_wa=True))
        score, ocfg, _, _ = oracle(model, x, y, TOY_Q, t, 0.5)
        if not (math.isclose(st.trace[-1].score, score, rel_tol=1e-9) and cfg.mask.digest() == ocfg.mask.digest()):
            misses.append(t)
    record(4, ok, f"alpha target 0.01, joint w/a actions: {', '.join(detail)}; "
                  f"info: seed 0 grid of {len(targets)} targets differs at {misses or 'none'}")


def test_criterion_5_fisher_correctness():
    rng = np.random.default_rng(0)
    worst = 0.0
    for model, x, y in ((build_mlp([6, 8, 4], seed=1), rng.normal(size=(13, 6)), rng.integers(0, 4, 13)),
                        (build_lenet(seed=2), rng.normal(size=(3, 1, 28, 28)), np.array([3, 1, 4]))):
        est = estimate_fisher(model, None, x, y, chunk=5)
        fw, fa = loop_fisher(model, x, y)
        for l in fw:
            worst = max(worst, float(np.max(np.abs(est.per_param[l] - fw[l]))), abs(est.act_trace[l] - fa[l]))
    xs, ys = np.array([[1.0], [2.0]]), np.array([[0.0], [2.0]])
    with ad.Tape() as tape:
        w = tape.param("w", np.array([[1.0]]))
        r = ad.add(ad.matmul(ad.as_input(xs), w), ad.as_input(-ys))
        per = tape.backward(ad.sum_all(ad.mul(ad.mul(r, r), np.full((2, 1), 0.5))), per_sample=True)
    scalar = fisher_diagonal(per)["w"].item()
    cases = {
        "relu": (lambda t: weighted_sum(ad.relu(t[0])), [rng.uniform(0.1, 1, (4, 5)) * rng.choice([-1, 1], (4, 5))]),
        "add/mul": (lambda t: weighted_sum(ad.mul(ad.add(t[0], t[1]), t[1])),
                    [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))]),
        "matmul": (lambda t: weighted_sum(ad.matmul(t[0], t[1])), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))]),
        "bias_add": (lambda t: weighted_sum(ad.bias_add(t[0], t[1])),
                     [rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, 3)]),
        "conv2d": (lambda t: weighted_sum(ad.conv2d(t[0], t[1], 2, 1)),
                   [rng.uniform(-1, 1, (2, 2, 6, 6)), rng.uniform(-1, 1, (3, 2, 3, 3))]),
        "maxpool2d": (lambda t: weighted_sum(ad.maxpool2d(t[0])), [rng.permutation(64).reshape(1, 1, 8, 8) / 64.0]),
        "flatten": (lambda t: weighted_sum(ad.flatten(t[0])), [rng.uniform(-1, 1, (2, 3, 2, 2))]),
        "softmax_cross_entropy": (lambda t: ad.softmax_cross_entropy(t[0], np.array([0, 3, 1, 1, 2])),
                                  [rng.uniform(-1, 1, (5, 4))]),
    }
    failed = []
    for name, (build, arrays) in cases.items():
        try:
            check_op(build, arrays)
        except AssertionError:
            failed.append(name)
    ok = worst <= 1e-10 and scalar == 0.5 and not failed
    record(5, ok, f"(a) max |batched - loop| {worst:.1e} (<= 1e-10); (b) scalar F = {scalar} (exact 0.5); "
                  f"(c) {len(cases) - len(failed)}/{len(cases)} ops within 1e-4 of finite differences")


def test_criterion_6_quantizer_properties():
    rng = np.random.default_rng(6)
    idem = bypass = mono = 0
    for _ in range(1000):
        t = rng.normal(size=rng.integers(16, 200)) * rng.uniform(0.01, 10)
        qs = {b: quantize_weights(t, b) for b in (2, 3, 4, 8, 16)}
        idem += all(np.array_equal(quantize_weights(q, b), q) for b, q in qs.items())
        q32 = quantize_weights(t, 32)
        bypass += q32 is t and np.array_equal(q32, t)
        errs = [np.sum((t - qs[b]) ** 2) for b in (2, 3, 4, 8, 16)] + [0.0]
        mono += all(a >= b for a, b in zip(errs, errs[1:]))
    hand = quantize_weights(np.array([0.3, -0.9, 0.45]), 2).tolist()
    ok = idem == bypass == mono == 1000 and hand == [0.0, -0.9, 0.9]
    record(6, ok, f"idempotent {idem}/1000, 32-bit bypass {bypass}/1000, monotone error {mono}/1000 "
                  f"(tensors of 16-200 entries), [0.3, -0.9, 0.45] -> {hand}")


def test_criterion_7_iterative_pruning_trend():
    (path,) = need(7, "ablate_pruning.csv")
    rows = [r for r in csv.DictReader(open(path))]
    by_step = defaultdict(dict)
    for r in rows:
        by_step[int(r["step"])][r["method"]] = (1 - float(r["density"]), float(r["accuracy"]))
    high = {s: v for s, v in by_step.items() if v["iterative-fit"][0] >= 0.95}
    bad = [s for s, v in high.items()
           if v["iterative-fit"][1] < max(v["one-shot-fit"][1], v["magnitude"][1])]
    last = max(high) if high else None
    tail = "" if last is None else (
        f"; at sparsity {100 * high[last]['iterative-fit'][0]:.2f}%: iterative "
        f"{100 * high[last]['iterative-fit'][1]:.2f}%, one-shot {100 * high[last]['one-shot-fit'][1]:.2f}%, "
        f"magnitude {100 * high[last]['magnitude'][1]:.2f}%")
    record(7, bool(high) and not bad, f"iterative FIT >= one-shot and magnitude at {len(high) - len(bad)}/{len(high)} "
                                      f"sparsities >= 95%" + (f" (fails at steps {bad})" if bad else "") + tail)


def test_criterion_8_scheduling_trend():
    (path,) = need(8, "ablate_scheduling.csv")
    rows = list(csv.DictReader(open(path)))
    grid = defaultdict(dict)
    for r in rows:
        grid[float(r["alpha_target"])][r["method"]] = float(r["accuracy"]) if r["status"] == "ok" else None
    loose = [a for a in grid if a >= 0.05]
    spreads = {a: max(v for v in grid[a].values() if v is not None) - min(v for v in grid[a].values() if v is not None)
               for a in loose}
    close = all(s <= 0.01 for s in spreads.values())
    feasible = [a for a, v in grid.items() if len(v) == 4 and all(x is not None for x in v.values())]
    extreme = min(feasible) if feasible else None
    wins = extreme is not None and all(grid[extreme]["fitcompress"] > v for k, v in grid[extreme].items()
                                       if k != "fitcompress")
    accs = "" if extreme is None else ", ".join(f"{k} {100 * v:.2f}%" for k, v in grid[extreme].items())
    record(8, bool(loose) and close and wins,
           f"spread at alpha >= 5%: {', '.join(f'{a:g}: {100 * s:.2f} pt' for a, s in sorted(spreads.items()))} "
           f"(<= 1 pt); at most extreme alpha {extreme}: {accs}")


@pytest.mark.skipif(mnist_dir() is None, reason="MNIST IDX files not available")
def test_criterion_9_interleaving():
    trace_path, ckpt, search = need(9, "trace.jsonl", "baseline.fitc", "search.json")
    target = load_json(search)["alpha_target"]
    trace = read_trace(trace_path)
    kinds = [r.action for r in trace]
    n_prune = kinds.count(PRUNE)
    n_quant = sum(k in (QUANT_W, QUANT_A, QUANT_WA) for k in kinds)
    cfg = RunConfig.load(CONFIG)
    train, _ = load_mnist(mnist_dir())
    calib = calibration_set(train, cfg.calib_size, cfg.calib_seed)
    _, greedy = fitcompress_search(load_checkpoint(ckpt), calib.images, calib.labels, cfg.schedules(), target,
                                   0.0, cfg.search_options())
    differs = [(r.action, r.layer, r.new_bits_or_kappa) for r in greedy.trace] != \
              [(r.action, r.layer, r.new_bits_or_kappa) for r in trace]
    ok = target <= 0.01 and n_prune > 0 and n_quant > 0 and differs
    record(9, ok, f"alpha target {100 * target:g}%: {n_prune} prune and {n_quant} quantize actions interleaved; "
                  f"lambda = 0 trace {'differs' if differs else 'is identical'} ({len(greedy.trace)} vs {len(trace)} "
                  f"actions, final sparsity {100 * greedy.config.mask.sparsity:.2f}% vs "
                  f"{100 * load_json(search)['sparsity']:.2f}%)")


def _pipeline(run: Path, cfg: Path, data: Path) -> None:
    for cmd in ("train", "compress", "finetune"):
        assert main([cmd, "-q", "--config", str(cfg), "--run-dir", str(run), "--data-dir", str(data)]) == EXIT_OK


def test_criterion_10_determinism(tmp_path):
    data = mnist_dir() or make_fake_mnist(tmp_path / "mnist")
    small = tmp_path / "small.json"
    small.write_text(json.dumps({"train_subset": 2048, "test_subset": 1000, "calib_size": 256,
                                 "train": {"epochs": 1}, "finetune": {"epochs": 1}}))
    _pipeline(tmp_path / "a", small, data)
    _pipeline(tmp_path / "b", small, data)
    names = ("baseline.fitc", "config.json", "config.json.mask", "trace.jsonl", "finetuned.fitc",
             "finetuned_config.json")
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    detail = f"reduced pipeline (2048 train samples) twice: {len(same)}/{len(names)} artifacts byte-identical"
    ok = len(same) == len(names)
    if (RUN / "baseline.fitc").exists() and (RUN / "config.json").exists() and mnist_dir() is not None:
        rerun = tmp_path / "rerun"
        assert main(["compress", "-q", "--config", str(CONFIG), "--run-dir", str(rerun), "--data-dir", str(data),
                     "--checkpoint", str(RUN / "baseline.fitc")]) == EXIT_OK
        full = [n for n in ("config.json", "config.json.mask", "trace.jsonl")
                if (rerun / n).read_bytes() == (RUN / n).read_bytes()]
        ok &= len(full) == 3
        detail += f"; full-scale compress rerun matches {RUN.name}/ in {len(full)}/3 artifacts"
    record(10, ok, detail)
