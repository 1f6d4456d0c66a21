"""Path planning through compression space.

The search starts from the full-precision model and repeatedly applies one
action: lower one layer's weight (or activation) bit-width by a schedule
step, or advance the global pruning ratio by one schedule step.  Each
candidate is scored as ``g + lambda * f`` where ``g`` accumulates the square
root of the FIT of every step taken and ``f`` estimates the remaining
distance from the gap to the compression target.  The lowest score wins and
the loop stops once the relative cost drops to the target.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .compression import (
    FULL_PRECISION,
    CompressionConfig,
    effective_weight,
    prune_to,
    pruned_count_for,
    quantize_acts,
)
from .fisher import (
    FisherEstimate,
    estimate_fisher,
    fit,
    fit_from_norms,
    magnitude_saliency,
    prune_saliency,
)
from .models import Model, calibrate_activations

log = logging.getLogger(__name__)

PRUNE = "prune"
QUANT_W = "quantize_weights"
QUANT_A = "quantize_acts"
QUANT_WA = "quantize_layer"
INIT = "init_qmax"

MODES = ("prune-then-quantize", "quantize-then-prune", "magnitude-prune-then-quantize")


class InfeasibleError(ValueError):
    """The target cannot be reached with the given schedules."""

    def __init__(self, target: float, floor: float, detail: str = ""):
        msg = f"alpha target {target:.3g} is below the achievable floor {floor:.6g}"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.target = target
        self.floor = floor


def kappa_schedule(n_max: int = 40, divisor: float = 13.0) -> tuple[float, ...]:
    return tuple(1.0 - 10.0 ** (-n / divisor) for n in range(1, n_max + 1))


@dataclass(frozen=True)
class Schedules:
    q: tuple[int, ...] = (8, 4, 3, 2)
    kappa: tuple[float, ...] = field(default_factory=kappa_schedule)

    def __post_init__(self):
        q = tuple(int(b) for b in self.q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        if not q or any(b < 2 for b in q) or any(a <= b for a, b in zip(q, q[1:])):
            raise ValueError(f"bit schedule must be strictly decreasing and >= 2, got {q}")
        if any(not 0.0 < k < 1.0 for k in self.kappa) or any(a >= b for a, b in zip(self.kappa, self.kappa[1:])):
            raise ValueError("pruning schedule must be strictly increasing inside (0, 1)")

    def next_bits(self, bits: int) -> int | None:
        for b in self.q:
            if b < bits:
                return b
        return None

    def kappa_at(self, index: int) -> float:
        return 0.0 if index == 0 else self.kappa[index - 1]


# ---------------------------------------------------------------- cost model


class CostModel:
    """Relative BOPs and model size of a configuration."""

    def __init__(self, model: Model):
        self.layers = model.quantizable_layers()
        self.macs = {l: int(model.macs[l]) for l in self.layers}
        self.n_weights = {l: int(model.weight(l).size) for l in self.layers}
        self.n_biases = model.n_biases()
        self.full_bops = sum(self.macs.values()) * FULL_PRECISION * FULL_PRECISION
        self.full_size = FULL_PRECISION * (sum(self.n_weights.values()) + self.n_biases)

    def bops(self, config: CompressionConfig) -> float:
        return sum(self.macs[l] * config.w_bits[l] * config.a_bits[l] * (1.0 - config.mask.layer_sparsity(l))
                   for l in self.layers)

    def relative_bops(self, config: CompressionConfig) -> float:
        return self.bops(config) / self.full_bops

    def size_bits(self, config: CompressionConfig) -> int:
        kept = {l: int(np.count_nonzero(config.mask.bits[l])) for l in self.layers}
        return sum(kept[l] * config.w_bits[l] for l in self.layers) + FULL_PRECISION * self.n_biases

    def relative_size(self, config: CompressionConfig) -> float:
        return self.size_bits(config) / self.full_size

    def alpha(self, config: CompressionConfig, cost: str) -> float:
        return self.relative_bops(config) if cost == "bops" else self.relative_size(config)

    def floor(self, schedules: Schedules, cost: str) -> float:
        """Lowest alpha any mask at the final pruning ratio can reach at min(Q) bits.

        Kept weights are placed where they cost least, so this is a true lower bound.
        """
        b = min(schedules.q)
        total = sum(self.n_weights.values())
        kept = total - pruned_count_for(schedules.kappa[-1], total) if schedules.kappa else total
        if cost == "size":
            return (kept * b + FULL_PRECISION * self.n_biases) / self.full_size
        per_weight = sorted((self.macs[l] / self.n_weights[l], self.n_weights[l]) for l in self.layers)
        bops = 0.0
        for mpw, n in per_weight:
            take = min(n, kept)
            bops += take * mpw * b * b
            kept -= take
            if kept == 0:
                break
        return bops / self.full_bops


def relative_bops(model: Model, config: CompressionConfig) -> float:
    return CostModel(model).relative_bops(config)


def model_size_bits(model: Model, config: CompressionConfig) -> int:
    return CostModel(model).size_bits(config)


# ---------------------------------------------------------------- distances


def g_step(fisher: FisherEstimate, dtheta: dict[str, np.ndarray], dacts: dict[str, np.ndarray] | None = None) -> float:
    """Path length of one action: sqrt(FIT) of its perturbation."""
    return math.sqrt(fit(fisher, dtheta, dacts))


def f_heuristic(fisher: FisherEstimate, theta: dict[str, np.ndarray], alpha_candidate: float, alpha_target: float,
                acts: dict[str, np.ndarray] | None = None) -> float:
    """|alpha_candidate - alpha_target| * sqrt(FIT(theta, theta))."""
    return abs(alpha_candidate - alpha_target) * math.sqrt(fit(fisher, theta, acts))


# ---------------------------------------------------------------- path state


@dataclass(frozen=True)
class Action:
    kind: str
    layer: str | None = None


@dataclass
class TraceRecord:
    iter: int
    action: str
    layer: str | None
    new_bits_or_kappa: float
    delta_g: float
    f_hat: float
    score: float
    alpha: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PathState:
    config: CompressionConfig
    g_hat: float = 0.0
    alpha: float = 1.0
    trace: list[TraceRecord] = field(default_factory=list)
    fisher_evaluations: int = 0
    seconds: float = 0.0

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.trace))


def read_trace(path: str | Path) -> list[TraceRecord]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(TraceRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}:{i}: malformed trace record ({e})") from e
    return out


@dataclass
class SearchOptions:
    lam: float = 0.5
    cost: str = "bops"
    joint_wa: bool = False
    start_at_qmax: bool = True
    charge_initial: bool = True
    fisher_cache: bool = True
    calib_chunk: int = 32


@dataclass
class _Candidate:
    action: Action
    config: CompressionConfig
    weights: dict[str, np.ndarray]
    alpha: float
    delta_g: float
    f_hat: float
    score: float
    new_value: float


class _Planner:
    """Shared machinery for the joint search and the sequential baselines."""

    def __init__(self, model: Model, x: np.ndarray, y: np.ndarray, schedules: Schedules,
                 target: float, opts: SearchOptions):
        if opts.cost not in ("bops", "size"):
            raise ValueError(f"unknown cost {opts.cost!r}")
        self.model, self.x, self.y = model, x, y
        self.schedules, self.target, self.opts = schedules, target, opts
        self.cost = CostModel(model)
        self.layers = model.quantizable_layers()
        self.fisher: FisherEstimate | None = None
        self._qact_cache: dict[tuple[str, int], np.ndarray] = {}
        self._qact_norm: dict[tuple[str, int], float] = {}
        self.fisher_evaluations = 0

    # -- Fisher and activation statistics -----------------------------------

    def refresh_fisher(self, config: CompressionConfig) -> None:
        self.fisher = estimate_fisher(self.model, config, self.x, self.y, chunk=self.opts.calib_chunk)
        self.fisher_evaluations += 1
        self._qact_cache.clear()
        self._qact_norm.clear()

    def _qact(self, config: CompressionConfig, layer: str, bits: int) -> np.ndarray:
        key = (layer, bits)
        if key not in self._qact_cache:
            raw = self.fisher.activations[layer]
            if bits >= FULL_PRECISION:
                self._qact_cache[key] = raw
            else:
                cmax, signed = config.act_ranges[layer]
                self._qact_cache[key] = quantize_acts(raw, bits, cmax, signed)
        return self._qact_cache[key]

    def _act_norm(self, config: CompressionConfig, layer: str, bits: int) -> float:
        key = (layer, bits)
        if key not in self._qact_norm:
            q = self._qact(config, layer, bits)
            self._qact_norm[key] = float(np.sum(q * q)) / len(q)
        return self._qact_norm[key]

    def _act_step(self, config: CompressionConfig, layer: str, old: int, new: int) -> float:
        d = self._qact(config, layer, new) - self._qact(config, layer, old)
        return float(np.sum(d * d)) / len(d)

    def self_fit(self, config: CompressionConfig, weights: dict[str, np.ndarray]) -> float:
        wsq = {l: float(np.sum(weights[l] * weights[l])) for l in self.layers}
        asq = {l: self._act_norm(config, l, config.a_bits[l]) for l in self.layers}
        return fit_from_norms(self.fisher, wsq, asq)

    # -- candidates ----------------------------------------------------------

    def effective(self, config: CompressionConfig, layer: str) -> np.ndarray:
        return effective_weight(self.model.weight(layer), config.mask.bits[layer], config.w_bits[layer])

    def actions(self, config: CompressionConfig, kinds: set[str]) -> list[Action]:
        """Available actions in tie-break order: prune, then per layer weights before acts."""
        out = []
        if PRUNE in kinds and config.kappa_index < len(self.schedules.kappa):
            out.append(Action(PRUNE))
        for l in self.layers:
            wn = self.schedules.next_bits(config.w_bits[l])
            an = self.schedules.next_bits(config.a_bits[l])
            if self.opts.joint_wa:
                if QUANT_W in kinds and (wn is not None or an is not None):
                    out.append(Action(QUANT_WA, l))
                continue
            if QUANT_W in kinds and wn is not None:
                out.append(Action(QUANT_W, l))
            if QUANT_A in kinds and an is not None and self.opts.cost == "bops":
                out.append(Action(QUANT_A, l))
        return out

    def evaluate(self, config: CompressionConfig, weights: dict[str, np.ndarray], g_hat: float,
                 action: Action, saliency: str = "fit") -> _Candidate:
        wsq: dict[str, float] = {}
        asq: dict[str, float] = {}
        new_weights = dict(weights)
        if action.kind == PRUNE:
            idx = config.kappa_index + 1
            target_count = pruned_count_for(self.schedules.kappa_at(idx), config.mask.total)
            if saliency == "fit":
                scores = prune_saliency(self.fisher, weights, config.mask)
            else:
                scores = magnitude_saliency(weights, config.mask)
            cand = replace(config, kappa_index=idx, mask=prune_to(config.mask, scores, target_count))
            new_value = self.schedules.kappa_at(idx)
            for l in self.layers:
                if not np.array_equal(cand.mask.bits[l], config.mask.bits[l]):
                    new_weights[l] = self.effective(cand, l)
                    d = new_weights[l] - weights[l]
                    wsq[l] = float(np.sum(d * d))
        else:
            l = action.layer
            wb, ab = config.w_bits[l], config.a_bits[l]
            wn = self.schedules.next_bits(wb) if action.kind in (QUANT_W, QUANT_WA) else None
            an = self.schedules.next_bits(ab) if action.kind in (QUANT_A, QUANT_WA) else None
            cand = config.with_bits(l, w=wn, a=an)
            new_value = float(wn if wn is not None else an)
            if wn is not None:
                new_weights[l] = self.effective(cand, l)
                d = new_weights[l] - weights[l]
                wsq[l] = float(np.sum(d * d))
            if an is not None:
                asq[l] = self._act_step(config, l, ab, an)
        delta_g = math.sqrt(fit_from_norms(self.fisher, wsq, asq))
        alpha = self.cost.alpha(cand, self.opts.cost)
        f_hat = abs(alpha - self.target) * math.sqrt(self.self_fit(cand, new_weights))
        score = g_hat + delta_g + self.opts.lam * f_hat
        return _Candidate(action, cand, new_weights, alpha, delta_g, f_hat, score, new_value)

    # -- the loop -----------------------------------------------------------

    def start(self) -> tuple[PathState, dict[str, np.ndarray]]:
        act_ranges = calibrate_activations(self.model, self.x)
        config = CompressionConfig.identity(self.model, act_ranges)
        weights = {l: self.model.weight(l) for l in self.layers}
        state = PathState(config=config, alpha=self.cost.alpha(config, self.opts.cost))
        return state, weights

    def initial_step(self, state: PathState, weights: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Jump every layer to max(Q) bits, charged as the single actions it replaces.

        That is one step per layer and kind, or one per layer with joint w/a actions.
        """
        qmax = max(self.schedules.q)
        config = state.config
        charge = 0.0
        cand = config
        new_weights = dict(weights)
        for l in self.layers:
            a_new = qmax if self.opts.cost == "bops" or self.opts.joint_wa else config.a_bits[l]
            cand = cand.with_bits(l, w=qmax, a=a_new)
            new_weights[l] = self.effective(cand, l)
            if self.opts.charge_initial:
                d = new_weights[l] - weights[l]
                wsq = {l: float(np.sum(d * d))}
                asq = {l: self._act_step(cand, l, config.a_bits[l], a_new)} if a_new != config.a_bits[l] else {}
                if self.opts.joint_wa:
                    charge += math.sqrt(fit_from_norms(self.fisher, wsq, asq))
                else:
                    charge += math.sqrt(fit_from_norms(self.fisher, wsq))
                    charge += math.sqrt(fit_from_norms(self.fisher, {}, asq)) if asq else 0.0
        alpha = self.cost.alpha(cand, self.opts.cost)
        f_hat = abs(alpha - self.target) * math.sqrt(self.self_fit(cand, new_weights))
        state.config = cand
        state.g_hat += charge
        state.alpha = alpha
        state.trace.append(TraceRecord(0, INIT, None, float(qmax), charge, f_hat,
                                       state.g_hat + self.opts.lam * f_hat, alpha))
        return new_weights

    def accept(self, state: PathState, cand: _Candidate) -> None:
        state.config = cand.config
        state.g_hat += cand.delta_g
        state.alpha = cand.alpha
        state.trace.append(TraceRecord(len(state.trace) + (0 if state.trace and state.trace[0].action == INIT else 1),
                                       cand.action.kind, cand.action.layer, cand.new_value,
                                       cand.delta_g, cand.f_hat, cand.score, cand.alpha))
        if cand.action.kind == PRUNE or not self.opts.fisher_cache:
            self.refresh_fisher(state.config)

    def check_floor(self) -> None:
        floor = self.cost.floor(self.schedules, self.opts.cost)
        if self.target < floor:
            raise InfeasibleError(self.target, floor)


def _validate_target(alpha_target: float) -> None:
    if not 0.0 < alpha_target <= 1.0:
        raise ValueError(f"alpha target must lie in (0, 1], got {alpha_target}")


def fitcompress_search(model: Model, x: np.ndarray, y: np.ndarray, schedules: Schedules | None = None,
                       alpha_target: float = 0.005, lam: float = 0.5, opts: SearchOptions | None = None,
                       ) -> tuple[CompressionConfig, PathState]:
    """Greedy best-first search on ``g + lam * f``; stops once alpha <= alpha_target.

    ``x, y`` is the calibration batch used for every Fisher estimate.  Fisher
    traces are refreshed only after accepted pruning actions unless
    ``opts.fisher_cache`` is off.
    """
    _validate_target(alpha_target)
    schedules = schedules or Schedules()
    opts = replace(opts or SearchOptions(), lam=lam)
    t0 = time.perf_counter()
    p = _Planner(model, x, y, schedules, alpha_target, opts)
    state, weights = p.start()
    if state.alpha <= alpha_target:
        return state.config, state
    p.check_floor()
    p.refresh_fisher(state.config)
    kinds = {PRUNE, QUANT_W, QUANT_A}
    if opts.start_at_qmax:
        weights = p.initial_step(state, weights)
    while state.alpha > alpha_target:
        best = None
        for action in p.actions(state.config, kinds):
            cand = p.evaluate(state.config, weights, state.g_hat, action)
            if best is None or cand.score < best.score:
                best = cand
        if best is None:
            raise InfeasibleError(alpha_target, state.alpha, "all schedules exhausted")
        p.accept(state, best)
        weights = best.weights
        log.info("iter %d %s %s -> %s alpha=%.5f g=%.4f f=%.4f", len(state.trace), best.action.kind,
                 best.action.layer, best.new_value, state.alpha, state.g_hat, best.f_hat)
    state.fisher_evaluations = p.fisher_evaluations
    state.seconds = time.perf_counter() - t0
    return state.config, state


def sequential_baselines(model: Model, x: np.ndarray, y: np.ndarray, schedules: Schedules | None = None,
                         alpha_target: float = 0.005, mode: str = "prune-then-quantize",
                         opts: SearchOptions | None = None, share: float = 0.5,
                         ) -> tuple[CompressionConfig, PathState]:
    """Compress in two phases instead of interleaving.

    The first phase runs until it has delivered ``share`` of the compression
    (in log space, from the post-initial-step alpha to the target) or is
    exhausted, the second phase runs to the target, and if that is not enough
    the first phase resumes.  Quantization steps pick the lowest-FIT action;
    pruning uses FIT saliency, or weight magnitude in the magnitude mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    _validate_target(alpha_target)
    schedules = schedules or Schedules()
    opts = replace(opts or SearchOptions(), lam=0.0)
    t0 = time.perf_counter()
    p = _Planner(model, x, y, schedules, alpha_target, opts)
    state, weights = p.start()
    if state.alpha <= alpha_target:
        return state.config, state
    p.check_floor()
    p.refresh_fisher(state.config)
    if opts.start_at_qmax:
        weights = p.initial_step(state, weights)
    saliency = "magnitude" if mode.startswith("magnitude") else "fit"
    quant = {QUANT_W, QUANT_A}
    phases = [{PRUNE}, quant] if mode != "quantize-then-prune" else [quant, {PRUNE}]
    start_alpha = state.alpha
    split = start_alpha * (alpha_target / start_alpha) ** share if start_alpha > alpha_target else alpha_target
    for kinds, goal in ((phases[0], split), (phases[1], alpha_target), (phases[0], alpha_target)):
        while state.alpha > max(goal, alpha_target):
            best = None
            for action in p.actions(state.config, kinds):
                cand = p.evaluate(state.config, weights, state.g_hat, action, saliency=saliency)
                if best is None or cand.delta_g < best.delta_g:
                    best = cand
            if best is None:
                break
            p.accept(state, best)
            weights = best.weights
    if state.alpha > alpha_target:
        raise InfeasibleError(alpha_target, state.alpha, "all schedules exhausted")
    state.fisher_evaluations = p.fisher_evaluations
    state.seconds = time.perf_counter() - t0
    return state.config, state
