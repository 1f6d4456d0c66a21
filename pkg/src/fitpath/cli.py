"""Command-line driver: ``fitpath {train|compress|finetune|eval|ablate|report}``.

Exit codes: 0 success, 2 configuration or missing-artifact error,
3 infeasible compression target, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, report
from .compression import CompressionConfig, ConfigError
from .data import DataError, Dataset, calibration_set, load_mnist
from .fisher import estimate_fisher
from .models import CheckpointError, Model, build_lenet, load_checkpoint, read_checkpoint_meta, save_checkpoint
from .planner import (
    CostModel,
    InfeasibleError,
    MODES,
    fitcompress_search,
    read_trace,
    sequential_baselines,
)
from .runconfig import RunConfig
from .training import DivergenceError, evaluate, finetune, train_baseline, write_history

log = logging.getLogger("fitpath")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 2, 3, 4

BASELINE = "baseline.fitc"
CONFIG = "config.json"
TRACE = "trace.jsonl"
TUNED = "finetuned.fitc"
TUNED_CONFIG = "finetuned_config.json"
METRICS = "metrics.json"
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- helpers


def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


def _subset(ds: Dataset, n: int | None, seed: int) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    return ds.subset(np.random.default_rng(seed).permutation(len(ds))[:n])


def _load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    train, test = load_mnist(cfg.data_dir)
    return _subset(train, cfg.train_subset, cfg.seed), _subset(test, cfg.test_subset, cfg.seed)


def _calibration(cfg: RunConfig, train: Dataset) -> Dataset:
    return calibration_set(train, cfg.calib_size, cfg.calib_seed)


def _build_model(cfg: RunConfig) -> Model:
    return build_lenet(cfg.seed)


def _baseline_path(cfg: RunConfig, run: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else run / BASELINE


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record(run: Path, command: str, cfg: RunConfig, outputs: list[Path], status: int, started: float,
            extra: dict | None = None) -> None:
    """Merge this command's entry into the run directory's manifest."""
    path = run / MANIFEST
    try:
        manifest = json.loads(path.read_text()) if path.exists() else {}
    except json.JSONDecodeError:
        manifest = {}
    manifest.setdefault("commands", {})[command] = {
        "exit_code": status,
        "config_digest": cfg.digest(),
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "seconds": round(time.time() - started, 3),
        **(extra or {}),
    }
    manifest["config"] = cfg.to_dict()
    _write_json(path, manifest)


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    train, test = _load_data(cfg)
    model, history = train_baseline(_build_model(cfg), train, test, cfg.train)
    acc = evaluate(model, None, test)
    ckpt = run / BASELINE
    save_checkpoint(model, ckpt, meta={"stage": "baseline", "test_accuracy": acc, "train": cfg.train.to_dict()})
    write_history(history, run / "train_history.csv")
    _write_json(run / "baseline_metrics.json", {"accuracy": acc, "epochs": cfg.train.epochs})
    print(f"baseline test accuracy {100 * acc:.2f}%")
    return [ckpt, run / "train_history.csv", run / "baseline_metrics.json"], {"accuracy": acc}


def cmd_compress(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    model = load_checkpoint(_need(_baseline_path(cfg, run), "checkpoint"))
    train, _ = _load_data(cfg)
    calib = _calibration(cfg, train)
    opts = cfg.search_options()
    outputs = []
    if args.dump_fisher:
        fisher = estimate_fisher(model, None, calib.images, calib.labels, chunk=cfg.fisher_chunk,
                                 keep_activations=False)
        (run / "fisher.json").write_text(fisher.to_json() + "\n")
        outputs.append(run / "fisher.json")
    if args.schedule == "fitcompress":
        config, state = fitcompress_search(model, calib.images, calib.labels, cfg.schedules(), cfg.alpha, cfg.lam, opts)
    else:
        config, state = sequential_baselines(model, calib.images, calib.labels, cfg.schedules(), cfg.alpha,
                                             args.schedule, opts)
    config.save(run / CONFIG)
    state.write_trace(run / TRACE)
    cost = CostModel(model)
    summary = {
        "schedule": args.schedule,
        "alpha_target": cfg.alpha,
        "alpha": state.alpha,
        "relative_bops": cost.relative_bops(config),
        "relative_size": cost.relative_size(config),
        "sparsity": config.mask.sparsity,
        "g_hat": state.g_hat,
        "iterations": len(state.trace),
        "fisher_evaluations": state.fisher_evaluations,
    }
    _write_json(run / "search.json", summary)
    print(f"alpha {100 * state.alpha:.4f}% after {len(state.trace)} actions "
          f"(sparsity {100 * config.mask.sparsity:.3f}%, {state.seconds:.1f}s)")
    outputs += [run / CONFIG, run / (CONFIG + ".mask"), run / TRACE, run / "search.json"]
    return outputs, {"search_seconds": round(state.seconds, 3)}


def cmd_finetune(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    model = load_checkpoint(_need(_baseline_path(cfg, run), "checkpoint"))
    config = CompressionConfig.load(_need(run / CONFIG, "compression config"), model)
    train, test = _load_data(cfg)
    calib = _calibration(cfg, train)
    before = evaluate(model, config, test)
    tuned, tuned_cfg, history = finetune(model, config, train, test, cfg.finetune, calib.images)
    after = evaluate(tuned, tuned_cfg, test)
    save_checkpoint(tuned, run / TUNED, meta={"stage": "finetuned", "config_digest": config.mask.digest()})
    tuned_cfg.save(run / TUNED_CONFIG)
    write_history(history, run / "finetune_history.csv")
    _write_json(run / "finetune.json", {"accuracy_before": before, "accuracy_after": after,
                                        "epochs": cfg.finetune.epochs})
    print(f"accuracy {100 * before:.2f}% -> {100 * after:.2f}% after {cfg.finetune.epochs} epochs")
    return [run / TUNED, run / TUNED_CONFIG, run / (TUNED_CONFIG + ".mask"), run / "finetune_history.csv",
            run / "finetune.json"], {}


def cmd_eval(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    if (run / TUNED).exists() and (run / TUNED_CONFIG).exists():
        model = load_checkpoint(run / TUNED)
        config = CompressionConfig.load(run / TUNED_CONFIG, model)
        stage = "finetuned"
    else:
        model = load_checkpoint(_need(_baseline_path(cfg, run), "checkpoint"))
        config = CompressionConfig.load(run / CONFIG, model) if (run / CONFIG).exists() \
            else CompressionConfig.identity(model)
        stage = "compressed" if (run / CONFIG).exists() else "baseline"
    _, test = _load_data(cfg)
    cost = CostModel(model)
    metrics = {
        "stage": stage,
        "accuracy": evaluate(model, config, test),
        "relative_bops": cost.relative_bops(config),
        "relative_size": cost.relative_size(config),
        "model_size_bits": cost.size_bits(config),
        "sparsity": config.mask.sparsity,
    }
    _write_json(run / METRICS, metrics)
    print(f"{stage}: accuracy {100 * metrics['accuracy']:.2f}%, relative BOPs "
          f"{100 * metrics['relative_bops']:.4f}%, sparsity {100 * metrics['sparsity']:.3f}%")
    return [run / METRICS], {}


def cmd_ablate(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    model = load_checkpoint(_need(_baseline_path(cfg, run), "checkpoint"))
    train, test = _load_data(cfg)
    calib = _calibration(cfg, train)
    if args.kind == "iterative-pruning":
        kappas = cfg.schedules().kappa[:cfg.ablate_prune_steps]
        rows = ablation.pruning_curves(model, calib.images, calib.labels, test, kappas, cfg.fisher_chunk)
        out = run / "ablate_pruning.csv"
    else:
        rows = ablation.scheduling_grid(model, calib.images, calib.labels, train, test, cfg.schedules(),
                                        cfg.ablate_alphas, cfg.search_options(), cfg.ablate_finetune)
        out = run / "ablate_scheduling.csv"
    ablation.write_rows(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return [out], {}


def cmd_report(cfg: RunConfig, args) -> tuple[list[Path], dict]:
    run = _run_dir(cfg)
    model = load_checkpoint(_need(_baseline_path(cfg, run), "checkpoint"))
    cfg_path = run / TUNED_CONFIG if (run / TUNED_CONFIG).exists() else _need(run / CONFIG, "compression config")
    config = CompressionConfig.load(cfg_path, model)
    try:
        trace = read_trace(_need(run / TRACE, "trace"))
    except ValueError as e:
        raise ConfigError(f"corrupt trace: {e}") from e
    metrics_path = _need(run / METRICS, "metrics (run eval first)")
    metrics = json.loads(metrics_path.read_text())
    base = json.loads((run / "baseline_metrics.json").read_text()) if (run / "baseline_metrics.json").exists() \
        else read_checkpoint_meta(_baseline_path(cfg, run)).get("meta", {})
    base_acc = base.get("accuracy", base.get("test_accuracy", float("nan")))
    cost = CostModel(model)
    rows = [("FP32", base_acc, 1.0, 0.0),
            ("FITCompress", metrics["accuracy"], cost.relative_bops(config), config.mask.sparsity)]
    text = report.table(rows)
    (run / "report.txt").write_text(text)
    report.write_csv(report.bit_assignment_rows(config), run / "fig3_bits.csv", ["layer", "kind", "bits", "sparsity"])
    report.write_csv(report.timeline_rows(trace), run / "fig6_actions.csv",
                     ["iter", "action", "layer", "value", "alpha", "delta_g", "prune_steps", "quant_steps"])
    print(text, end="")
    return [run / "report.txt", run / "fig3_bits.csv", run / "fig6_actions.csv"], {}


COMMANDS = {
    "train": cmd_train,
    "compress": cmd_compress,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--data-dir", help="MNIST IDX directory (default: $FITPATH_DATA_DIR)")
    p.add_argument("--run-dir", help="directory for all artifacts of the run")
    p.add_argument("--checkpoint", help="baseline checkpoint (default: <run-dir>/baseline.fitc)")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="target relative BOPs (or size) in (0, 1]")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the goal heuristic")
    p.add_argument("--epochs", type=int, help="override epochs of this command's training phase")
    p.add_argument("--joint-wa", action="store_true", default=None,
                   help="one action per layer lowers weight and activation bits together")
    p.add_argument("--start-at-qmax", dest="start_at_qmax", action="store_true", default=None)
    p.add_argument("--no-start-at-qmax", dest="start_at_qmax", action="store_false")
    p.add_argument("--no-charge-initial", dest="charge_initial", action="store_false", default=None,
                   help="do not add the initial 32->max(Q) step to the path distance")
    p.add_argument("--no-fisher-cache", dest="fisher_cache", action="store_false", default=None,
                   help="re-estimate the Fisher after every accepted action")
    p.add_argument("--size-constraint", action="store_true", default=None,
                   help="alpha is relative model size instead of relative BOPs")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fitpath", parents=[common],
                                     description="Joint mixed-precision quantization and pruning by path planning.")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "compress":
            sp.add_argument("--schedule", choices=("fitcompress",) + MODES, default="fitcompress")
            sp.add_argument("--dump-fisher", action="store_true", help="write the starting Fisher to fisher.json")
        if name == "ablate":
            sp.add_argument("kind", choices=("iterative-pruning", "scheduling"))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {k: getattr(args, k) for k in ("data_dir", "run_dir", "checkpoint", "seed", "alpha", "lam", "joint_wa",
                                          "start_at_qmax", "charge_initial", "fisher_cache", "size_constraint")
            if getattr(args, k, None) is not None}
    cfg = replace(cfg, **over)
    if args.epochs is not None:
        if args.command == "train":
            cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
        elif args.command == "finetune":
            cfg = replace(cfg, finetune=replace(cfg.finetune, epochs=args.epochs))
        elif args.command == "ablate":
            cfg = replace(cfg, ablate_finetune=replace(cfg.ablate_finetune, epochs=args.epochs))
    try:
        cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError) as e:
        print(f"fitpath: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(cfg.to_json())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    started = time.time()
    outputs, extra, status = [], {}, EXIT_OK
    try:
        outputs, extra = COMMANDS[args.command](cfg, args)
    except InfeasibleError as e:
        print(f"fitpath: infeasible: {e}", file=sys.stderr)
        status, extra = EXIT_INFEASIBLE, {"error": str(e), "floor": e.floor}
    except DivergenceError as e:
        print(f"fitpath: diverged: {e}", file=sys.stderr)
        status, extra = EXIT_DIVERGED, {"error": str(e)}
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as e:
        print(f"fitpath: error: {e}", file=sys.stderr)
        status, extra = EXIT_CONFIG, {"error": str(e)}
    try:
        _record(_run_dir(cfg), args.command, cfg, outputs, status, started, extra)
    except OSError as e:
        print(f"fitpath: could not write manifest: {e}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
