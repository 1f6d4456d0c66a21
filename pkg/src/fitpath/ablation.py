"""Ablations: iterative vs one-shot vs magnitude pruning, and compression schedules."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .compression import CompressionConfig, PruneMask, prune_to, pruned_count_for
from .data import Dataset
from .fisher import estimate_fisher, magnitude_saliency, prune_saliency
from .models import Model
from .planner import InfeasibleError, Schedules, SearchOptions, fitcompress_search, sequential_baselines
from .training import TrainSpec, evaluate, finetune

log = logging.getLogger(__name__)

PRUNING_METHODS = ("iterative-fit", "one-shot-fit", "magnitude")
SCHEDULING_METHODS = ("fitcompress", "prune-then-quantize", "quantize-then-prune", "magnitude-prune-then-quantize")


@dataclass
class PruningPoint:
    method: str
    step: int
    kappa: float
    density: float
    accuracy: float


@dataclass
class SchedulingPoint:
    method: str
    alpha_target: float
    alpha: float
    sparsity: float
    accuracy: float
    status: str


def _masked(model: Model, mask: PruneMask) -> CompressionConfig:
    return replace(CompressionConfig.identity(model), mask=mask)


def pruning_curves(model: Model, calib_x: np.ndarray, calib_y: np.ndarray, test: Dataset,
                   kappas, chunk: int = 32) -> list[PruningPoint]:
    """Accuracy without fine-tuning at each pruning ratio, for three criteria.

    Iterative FIT re-estimates the Fisher on the currently masked model before
    every step; one-shot FIT ranks once with the dense model's Fisher;
    magnitude ranks by |theta|.  All masks are nested across steps.
    """
    layers = model.quantizable_layers()
    dense = {l: model.weight(l) for l in layers}
    full = PruneMask.full(model.prunable_shapes())
    dense_fisher = estimate_fisher(model, None, calib_x, calib_y, chunk=chunk, keep_activations=False)
    rankings = {
        "one-shot-fit": prune_saliency(dense_fisher, dense, full),
        "magnitude": magnitude_saliency(dense, full),
    }
    masks = {m: full for m in PRUNING_METHODS}
    out = []
    for step, kappa in enumerate(kappas, start=1):
        target = pruned_count_for(kappa, full.total)
        for method in PRUNING_METHODS:
            mask = masks[method]
            if method == "iterative-fit":
                fisher = estimate_fisher(model, _masked(model, mask), calib_x, calib_y, chunk=chunk,
                                         keep_activations=False)
                weights = {l: dense[l] * mask.bits[l] for l in layers}
                scores = prune_saliency(fisher, weights, mask)
            else:
                scores = rankings[method]
                # rankings were built on the full mask; drop entries already pruned
                scores = {l: (idx[mask.bits[l].ravel()[idx]], s[mask.bits[l].ravel()[idx]])
                          for l, (idx, s) in scores.items()}
            mask = prune_to(mask, scores, target)
            masks[method] = mask
            acc = evaluate(model, _masked(model, mask), test)
            out.append(PruningPoint(method, step, kappa, 1.0 - mask.sparsity, acc))
            log.info("prune %s step %d kappa %.5f acc %.4f", method, step, kappa, acc)
    return out


def scheduling_grid(model: Model, calib_x: np.ndarray, calib_y: np.ndarray, train: Dataset, test: Dataset,
                    schedules: Schedules, alphas, opts: SearchOptions, tune: TrainSpec,
                    methods=SCHEDULING_METHODS) -> list[SchedulingPoint]:
    """Search, fine-tune briefly and evaluate each method at each alpha target."""
    out = []
    for alpha in alphas:
        for method in methods:
            try:
                if method == "fitcompress":
                    cfg, state = fitcompress_search(model, calib_x, calib_y, schedules, alpha, opts.lam, opts)
                else:
                    cfg, state = sequential_baselines(model, calib_x, calib_y, schedules, alpha, method, opts)
            except InfeasibleError as e:
                log.info("schedule %s alpha %g infeasible: %s", method, alpha, e)
                out.append(SchedulingPoint(method, alpha, float("nan"), float("nan"), float("nan"), "infeasible"))
                continue
            tuned, tuned_cfg, _ = finetune(model, cfg, train, None, tune, calib_x)
            acc = evaluate(tuned, tuned_cfg, test)
            out.append(SchedulingPoint(method, alpha, state.alpha, cfg.mask.sparsity, acc, "ok"))
            log.info("schedule %s alpha %g -> %.5f acc %.4f", method, alpha, state.alpha, acc)
    return out


def write_rows(rows, path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    names = list(rows[0].__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in rows:
            w.writerow([f"{v:.8g}" if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))

