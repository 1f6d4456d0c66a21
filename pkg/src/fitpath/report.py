"""Table row and plot data (CSV) from pipeline artifacts."""
from __future__ import annotations

import csv
from pathlib import Path

from .compression import CompressionConfig
from .planner import INIT, PRUNE, TraceRecord


def table_row(label: str, accuracy: float, rel_bops: float, sparsity: float) -> str:
    return f"| {label:<12} | {100 * accuracy:6.2f} | {100 * rel_bops:7.3f} | {100 * sparsity:10.4f} |"


def table(rows: list[tuple[str, float, float, float]]) -> str:
    head = "| method       | acc. % | BOPs %  | sparsity % |\n|--------------|--------|---------|------------|"
    return "\n".join([head] + [table_row(*r) for r in rows]) + "\n"


def bit_assignment_rows(config: CompressionConfig) -> list[dict]:
    """One row per quantizable layer and operand kind, with the layer's sparsity."""
    out = []
    for layer in config.w_bits:
        s = round(config.mask.layer_sparsity(layer), 6)
        out.append({"layer": layer, "kind": "weights", "bits": config.w_bits[layer], "sparsity": s})
        out.append({"layer": layer, "kind": "acts", "bits": config.a_bits[layer], "sparsity": s})
    return out


def timeline_rows(trace: list[TraceRecord]) -> list[dict]:
    """Action sequence with running counts of pruning and quantization steps."""
    prunes = quants = 0
    out = []
    for r in trace:
        if r.action == PRUNE:
            prunes += 1
        elif r.action != INIT:
            quants += 1
        out.append({"iter": r.iter, "action": r.action, "layer": r.layer or "", "value": r.new_bits_or_kappa,
                    "alpha": r.alpha, "delta_g": r.delta_g, "prune_steps": prunes, "quant_steps": quants})
    return out


def write_csv(rows: list[dict], path: str | Path, header: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
