import itertools
import json
import math

import numpy as np
import pytest

from fitpath.compression import CompressionConfig, PruneMask, effective_weight, prune_to, pruned_count_for, \
    quantize_acts
from fitpath.data import synthetic_blobs
from fitpath.fisher import FisherEstimate, estimate_fisher, prune_saliency
from fitpath.models import build_lenet, build_mlp, calibrate_activations
from fitpath.planner import (
    INIT,
    MODES,
    PRUNE,
    QUANT_A,
    QUANT_W,
    QUANT_WA,
    CostModel,
    InfeasibleError,
    PathState,
    Schedules,
    SearchOptions,
    TraceRecord,
    f_heuristic,
    fitcompress_search,
    g_step,
    kappa_schedule,
    read_trace,
    relative_bops,
    sequential_baselines,
)
from fitpath.training import TrainSpec, train_baseline

TOY_Q = Schedules(q=(8, 4), kappa=(0.5,))


@pytest.fixture(scope="module")
def toy():
    ds = synthetic_blobs(4, 512, 8, seed=0, separation=10.0)
    model, _ = train_baseline(build_mlp([8, 16, 4], seed=3), ds, None, TrainSpec(epochs=10, batch=32, lr=1e-2))
    return model, ds.images[:256], ds.labels[:256]


def lenet_config(**bits):
    m = build_lenet()
    cfg = CompressionConfig.identity(m)
    for l in m.quantizable_layers():
        w, a = bits.get(l, (32, 32))
        cfg = cfg.with_bits(l, w=w, a=a)
    return m, cfg


class TestSchedules:
    def test_kappa_values(self):
        k = kappa_schedule()
        assert len(k) == 40 and k[0] == pytest.approx(1 - 10 ** (-1 / 13))
        assert k[12] == pytest.approx(0.9) and k[25] == pytest.approx(0.99)

    def test_next_bits(self):
        s = Schedules()
        assert [s.next_bits(b) for b in (32, 8, 4, 3, 2)] == [8, 4, 3, 2, None]

    @pytest.mark.parametrize("q,kappa", [((4, 8), (0.5,)), ((8, 1), (0.5,)), ((8,), (0.5, 0.4)), ((8,), (1.0,))])
    def test_invalid(self, q, kappa):
        with pytest.raises(ValueError):
            Schedules(q=q, kappa=kappa)


class TestCost:
    def test_identity_is_one(self):
        m, cfg = lenet_config()
        assert relative_bops(m, cfg) == 1.0

    def test_int8_anchor(self):
        m, cfg = lenet_config(**{l: (8, 8) for l in build_lenet().quantizable_layers()})
        assert relative_bops(m, cfg) == 0.0625

    def test_int4_anchor(self):
        m, cfg = lenet_config(**{l: (4, 4) for l in build_lenet().quantizable_layers()})
        assert relative_bops(m, cfg) == 0.015625

    def test_sparsity_scales_layer(self):
        m = build_mlp([4, 4])
        bits = np.ones((4, 4), bool)
        bits[:2] = False
        cfg = CompressionConfig(dict(dense1=8), dict(dense1=8), 1, PruneMask({"dense1": bits}))
        assert relative_bops(m, cfg) == 0.0625 * 0.5

    def test_size(self):
        m = build_mlp([4, 3])
        c = CostModel(m)
        ident = CompressionConfig.identity(m)
        assert c.size_bits(ident) == 32 * 15 and c.relative_size(ident) == 1.0
        assert c.size_bits(ident.with_bits("dense1", w=2)) == 2 * 12 + 32 * 3

    def test_floor_is_lower_bound(self):
        m = build_mlp([8, 16, 4])
        c = CostModel(m)
        floor = c.floor(TOY_Q, "bops")
        # every legal mask at kappa 0.5 with 4/4 bits costs at least the floor
        rng = np.random.default_rng(0)
        for _ in range(50):
            flat = np.ones(m.n_weights(), bool)
            flat[rng.choice(flat.size, pruned_count_for(0.5, flat.size), replace=False)] = False
            bits = {"dense1": flat[:128].reshape(8, 16), "dense2": flat[128:].reshape(16, 4)}
            cfg = CompressionConfig(dict(dense1=4, dense2=4), dict(dense1=4, dense2=4), 1, PruneMask(bits))
            assert c.relative_bops(cfg) >= floor - 1e-15


class TestDistances:
    def fisher(self):
        return FisherEstimate({"l": np.array([1.0, 3.0])}, {"l": 4.0}, {}, {}, 1)

    def test_g_step(self):
        assert g_step(self.fisher(), {"l": np.array([0.5, 0.5])}) == 1.0

    def test_f_heuristic(self):
        # |0.3 - 0.1| * sqrt(2 * (1 + 1)) = 0.4
        assert f_heuristic(self.fisher(), {"l": np.array([1.0, 1.0])}, 0.3, 0.1) == pytest.approx(0.4)

    def test_f_zero_at_target(self):
        assert f_heuristic(self.fisher(), {"l": np.array([5.0, 1.0])}, 0.2, 0.2) == 0.0


def oracle(model, x, y, schedules, target, lam):
    """Enumerate every ordering of joint-layer and prune actions, built from public primitives.

    Returns (score, config, g_hat, optimal orderings) for the terminal path with lowest
    g + lam * f.  Quantization steps commute (the Fisher is only refreshed after a
    prune), so several orderings can tie on the same config and score.
    """
    layers = model.quantizable_layers()
    ranges = calibrate_activations(model, x)
    cost = CostModel(model)
    qmax = max(schedules.q)
    start = CompressionConfig.identity(model, ranges)
    fisher0 = estimate_fisher(model, start, x, y)
    raw = fisher0.activations

    def qa(l, b):
        return raw[l] if b >= 32 else quantize_acts(raw[l], b, *ranges[l])

    def eff(cfg, l):
        return effective_weight(model.weight(l), cfg.mask.bits[l], cfg.w_bits[l])

    # initial jump to qmax, one joint step per layer against the full-precision Fisher
    cfg, g0 = start, 0.0
    for l in layers:
        cfg = cfg.with_bits(l, w=qmax, a=qmax)
        g0 += g_step(fisher0, {l: eff(cfg, l) - model.weight(l)}, {l: qa(l, qmax) - qa(l, 32)})
    weights0 = {l: eff(cfg, l) for l in layers}

    moves = [(PRUNE, None)] * len(schedules.kappa)
    for l in layers:
        moves += [(QUANT_WA, l)] * (len(schedules.q) - 1)
    ends = []
    for order in sorted(set(itertools.permutations(moves)), key=str):
        c, w, g, fisher = cfg, weights0, g0, fisher0
        for i, (kind, l) in enumerate(order):
            if kind == PRUNE:
                idx = c.kappa_index + 1
                n = pruned_count_for(schedules.kappa_at(idx), c.mask.total)
                new = CompressionConfig(c.w_bits, c.a_bits, idx,
                                        prune_to(c.mask, prune_saliency(fisher, w, c.mask), n), c.act_ranges)
                nw = {k: eff(new, k) for k in layers}
                step = g_step(fisher, {k: nw[k] - w[k] for k in layers})
            else:
                nb = schedules.next_bits(c.w_bits[l])
                new = c.with_bits(l, w=nb, a=nb)
                nw = dict(w, **{l: eff(new, l)})
                step = g_step(fisher, {l: nw[l] - w[l]}, {l: qa(l, nb) - qa(l, c.a_bits[l])})
            alpha = cost.relative_bops(new)
            if alpha <= target:
                acts = {k: qa(k, new.a_bits[k]) for k in layers}
                score = g + step + lam * f_heuristic(fisher, nw, alpha, target, acts)
                ends.append((score, order[:i + 1], new, g + step))
                break
            c, w, g = new, nw, g + step
            if kind == PRUNE:
                fisher = estimate_fisher(model, c, x, y)
    score, _, cfg, g = min(ends, key=lambda e: e[0])
    tied = {e[1] for e in ends if math.isclose(e[0], score, rel_tol=1e-12)}
    return score, cfg, g, tied


class TestSearch:
    def test_identity_when_target_is_one(self, toy):
        model, x, y = toy
        cfg, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=1.0)
        assert cfg.is_identity() and st.trace == [] and st.g_hat == 0.0

    def test_infeasible_names_floor(self, toy):
        model, x, y = toy
        floor = CostModel(model).floor(TOY_Q, "bops")
        with pytest.raises(InfeasibleError, match="floor") as e:
            fitcompress_search(model, x, y, TOY_Q, alpha_target=floor / 2)
        assert e.value.floor == floor

    @pytest.mark.parametrize("target", [0.0, 1.5])
    def test_bad_target(self, toy, target):
        with pytest.raises(ValueError):
            fitcompress_search(*toy, TOY_Q, alpha_target=target)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_exhaustive_oracle(self, seed):
        # 0.01 sits above the 4/4 floor but below every config that skips an action
        ds = synthetic_blobs(4, 512, 8, seed=seed, separation=10.0)
        model, _ = train_baseline(build_mlp([8, 16, 4], seed=seed + 3), ds, None,
                                  TrainSpec(epochs=10, batch=32, lr=1e-2))
        x, y = ds.images[:256], ds.labels[:256]
        cfg, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=0.01, opts=SearchOptions(joint_wa=True))
        score, ocfg, og, tied = oracle(model, x, y, TOY_Q, 0.01, 0.5)
        assert tuple((r.action, r.layer) for r in st.trace[1:]) in tied
        assert cfg.w_bits == ocfg.w_bits and cfg.a_bits == ocfg.a_bits
        assert cfg.mask.digest() == ocfg.mask.digest()
        assert st.trace[-1].score == pytest.approx(score, rel=1e-9)
        assert st.g_hat == pytest.approx(og, rel=1e-9)

    def test_trace_invariants(self, toy):
        model, x, y = toy
        cfg, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=0.009)
        assert st.trace[0].action == INIT
        alphas = [r.alpha for r in st.trace]
        assert all(a > b for a, b in zip(alphas, alphas[1:]))
        g = np.cumsum([r.delta_g for r in st.trace])
        assert all(d >= 0 for d in np.diff(g)) and st.g_hat == pytest.approx(g[-1])
        assert st.alpha <= 0.009 and alphas[-2] > 0.009
        # at most |kappa| prune steps and |Q|-1 steps per layer and kind
        assert len(st.trace) - 1 <= len(TOY_Q.kappa) + 2 * 2 * (len(TOY_Q.q) - 1)
        assert [r.iter for r in st.trace] == list(range(len(st.trace)))

    def test_deterministic(self, toy):
        a, sa = fitcompress_search(*toy, TOY_Q, alpha_target=0.009)
        b, sb = fitcompress_search(*toy, TOY_Q, alpha_target=0.009)
        assert a.to_dict() == b.to_dict()
        assert [r.to_json() for r in sa.trace] == [r.to_json() for r in sb.trace]

    def test_lambda_zero_is_pure_greedy(self, toy):
        _, st = fitcompress_search(*toy, TOY_Q, alpha_target=0.009, lam=0.0)
        assert all(r.score == pytest.approx(sum(t.delta_g for t in st.trace[:i + 1]))
                   for i, r in enumerate(st.trace[1:], start=1))

    def test_no_fisher_cache_terminates(self, toy):
        _, cached = fitcompress_search(*toy, TOY_Q, alpha_target=0.009)
        _, fresh = fitcompress_search(*toy, TOY_Q, alpha_target=0.009, opts=SearchOptions(fisher_cache=False))
        assert fresh.alpha <= 0.009
        assert fresh.fisher_evaluations == len(fresh.trace) and cached.fisher_evaluations < fresh.fisher_evaluations

    def test_size_mode_has_no_act_actions(self, toy):
        model, x, y = toy
        _, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=0.2, opts=SearchOptions(cost="size"))
        assert QUANT_A not in {r.action for r in st.trace} and st.alpha <= 0.2

    def test_initial_charge_per_layer_and_kind(self, toy):
        model, x, y = toy
        ranges = calibrate_activations(model, x)
        fisher = estimate_fisher(model, CompressionConfig.identity(model, ranges), x, y)
        expect = 0.0
        for l in model.quantizable_layers():
            w = model.weight(l)
            a = fisher.activations[l]
            expect += g_step(fisher, {l: effective_weight(w, None, 8) - w})
            expect += g_step(fisher, {}, {l: quantize_acts(a, 8, *ranges[l]) - a})
        _, st = fitcompress_search(model, x, y, TOY_Q, alpha_target=0.009)
        assert st.trace[0].delta_g == pytest.approx(expect, rel=1e-12)

    def test_uncharged_initial_step(self, toy):
        _, st = fitcompress_search(*toy, TOY_Q, alpha_target=0.009, opts=SearchOptions(charge_initial=False))
        assert st.trace[0].delta_g == 0.0

    def test_without_initial_jump(self, toy):
        _, st = fitcompress_search(*toy, TOY_Q, alpha_target=0.009, opts=SearchOptions(start_at_qmax=False))
        assert st.trace[0].action != INIT and st.alpha <= 0.009


class TestSequential:
    @pytest.mark.parametrize("mode", MODES)
    def test_reaches_target(self, toy, mode):
        cfg, st = sequential_baselines(*toy, Schedules(q=(8, 4, 3, 2), kappa=kappa_schedule(13)), 0.005, mode)
        assert st.alpha <= 0.005

    def test_phase_order(self, toy):
        sch = Schedules(q=(8, 4, 3, 2), kappa=kappa_schedule(13))
        _, pq = sequential_baselines(*toy, sch, 0.005, "prune-then-quantize")
        _, qp = sequential_baselines(*toy, sch, 0.005, "quantize-then-prune")
        assert pq.trace[1].action == PRUNE
        assert qp.trace[1].action in (QUANT_W, QUANT_A)

    def test_magnitude_masks_differ(self, toy):
        sch = Schedules(q=(8, 4, 3, 2), kappa=kappa_schedule(13))
        a, _ = sequential_baselines(*toy, sch, 0.005, "prune-then-quantize")
        b, _ = sequential_baselines(*toy, sch, 0.005, "magnitude-prune-then-quantize")
        assert a.mask.digest() != b.mask.digest()

    def test_unknown_mode(self, toy):
        with pytest.raises(ValueError):
            sequential_baselines(*toy, TOY_Q, 0.01, "random")


class TestTraceFile:
    def test_round_trip(self, tmp_path):
        st = PathState(config=None, trace=[TraceRecord(0, INIT, None, 8.0, 0.1, 0.2, 0.3, 0.0625),
                                           TraceRecord(1, PRUNE, None, 0.16, 0.01, 0.2, 0.31, 0.05)])
        st.write_trace(tmp_path / "t.jsonl")
        assert read_trace(tmp_path / "t.jsonl") == st.trace
        assert json.loads((tmp_path / "t.jsonl").read_text().splitlines()[1])["action"] == "prune"

    def test_malformed_line(self, tmp_path):
        (tmp_path / "t.jsonl").write_text('{"iter": 0}\n')
        with pytest.raises(ValueError, match=":1:"):
            read_trace(tmp_path / "t.jsonl")
