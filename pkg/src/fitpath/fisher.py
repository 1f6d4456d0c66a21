"""Empirical Fisher diagonals, the FIT perturbation metric and pruning saliency."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .compression import CompressionConfig
from .models import Model, per_sample_grad_chunks


@dataclass(frozen=True)
class FisherEstimate:
    """Per-weight empirical Fisher diagonal plus per-layer traces.

    ``act_trace[l]`` sums, over the units of one sample's input activation to
    layer ``l``, the mean squared per-sample gradient.  ``activations`` keeps
    the raw (pre-quantization) calibration activations seen during estimation.
    """

    per_param: dict[str, np.ndarray]
    weight_trace: dict[str, float]
    act_trace: dict[str, float]
    act_units: dict[str, int]
    n_samples: int
    activations: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def layers(self) -> list[str]:
        return list(self.per_param)

    def n_params(self, layer: str) -> int:
        return int(self.per_param[layer].size)

    def to_json(self) -> str:
        return json.dumps({
            "n_samples": self.n_samples,
            "layers": {
                l: {
                    "n_params": self.n_params(l),
                    "weight_trace": self.weight_trace[l],
                    "act_trace": self.act_trace.get(l),
                    "act_units": self.act_units.get(l),
                    "per_param_mean": float(self.per_param[l].mean()),
                    "per_param_max": float(self.per_param[l].max()),
                }
                for l in self.per_param
            },
        }, indent=2, sort_keys=True)


def fisher_diagonal(per_sample: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Mean over the leading sample axis of squared per-sample gradients."""
    return {k: np.einsum("n...,n...->...", g, g) / len(g) for k, g in per_sample.items()}


def estimate_fisher(model: Model, config: CompressionConfig | None, x: np.ndarray, y: np.ndarray,
                    chunk: int = 32, keep_activations: bool = True) -> FisherEstimate:
    """F_p = mean_i (dL_i/dtheta_p)^2 at the config's effective parameters.

    L_i is the cross-entropy of sample i against its data label.
    """
    n = len(x)
    if n == 0:
        raise ValueError("empty calibration batch")
    layers = model.quantizable_layers()
    sq = {l: np.zeros(model.weight(l).shape) for l in layers}
    act_sq = {l: 0.0 for l in layers}
    units: dict[str, int] = {}
    acts: dict[str, list[np.ndarray]] = {l: [] for l in layers}
    for grads, raw in per_sample_grad_chunks(model, x, y, config, mode="effective", chunk=chunk,
                                             watch_inputs=True):
        for l in layers:
            g = grads[f"{l}.weight"]
            sq[l] += np.einsum("n...,n...->...", g, g)
            ga = grads[f"{l}:input"]
            act_sq[l] += float(np.sum(ga * ga))
            units[l] = int(np.prod(ga.shape[1:]))
            if keep_activations:
                acts[l].append(raw[l])
    per_param = {l: sq[l] / n for l in layers}
    return FisherEstimate(
        per_param=per_param,
        weight_trace={l: float(per_param[l].sum()) for l in layers},
        act_trace={l: act_sq[l] / n for l in layers},
        act_units=units,
        n_samples=n,
        activations={l: np.concatenate(v) for l, v in acts.items()} if keep_activations else {},
    )


def fit_from_norms(fisher: FisherEstimate, weight_sq: dict[str, float],
                   act_sq: dict[str, float] | None = None) -> float:
    """FIT given squared perturbation norms per layer.

    ``act_sq[l]`` is the per-sample mean of the squared activation perturbation.
    """
    total = 0.0
    for l, v in weight_sq.items():
        if l not in fisher.weight_trace:
            raise KeyError(f"layer {l!r} has no Fisher estimate")
        total += fisher.weight_trace[l] / fisher.n_params(l) * v
    for l, v in (act_sq or {}).items():
        if l not in fisher.act_trace:
            raise KeyError(f"layer {l!r} has no activation Fisher estimate")
        total += fisher.act_trace[l] / fisher.act_units[l] * v
    return total


def fit(fisher: FisherEstimate, dtheta: dict[str, np.ndarray],
        dacts: dict[str, np.ndarray] | None = None) -> float:
    """Fisher Information Trace of a perturbation.

    ``sum_l Tr_l / n(l) * ||dtheta_l||^2``, plus the same form over layer input
    activations when ``dacts`` (arrays with a leading sample axis) is given.
    Layers absent from ``dtheta`` are unperturbed.
    """
    wsq = {l: float(np.sum(np.square(d))) for l, d in dtheta.items()}
    asq = None
    if dacts is not None:
        asq = {l: float(np.sum(np.square(d))) / max(len(d), 1) for l, d in dacts.items()}
    return fit_from_norms(fisher, wsq, asq)


def prune_saliency(fisher: FisherEstimate, weights: dict[str, np.ndarray],
                   mask) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """score_p = F_p * theta_p^2 for every still-unpruned weight.

    Returns ``{layer: (flat_indices, scores)}``; pruned weights are left out.
    ``weights`` are the current effective weights keyed by layer.
    """
    out = {}
    for l, w in weights.items():
        keep = mask.bits[l].ravel()
        idx = np.flatnonzero(keep)
        score = fisher.per_param[l].ravel()[idx] * np.square(w.ravel()[idx])
        out[l] = (idx, score)
    return out


def magnitude_saliency(weights: dict[str, np.ndarray], mask) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """|theta_p| for every unpruned weight (the L1 reference criterion)."""
    out = {}
    for l, w in weights.items():
        idx = np.flatnonzero(mask.bits[l].ravel())
        out[l] = (idx, np.abs(w.ravel()[idx]))
    return out
