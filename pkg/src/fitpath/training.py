"""Baseline training, single-shot fine-tuning under a frozen config, evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .compression import CompressionConfig
from .data import Dataset, batches
from .models import Model, batch_grads, calibrate_activations, predict

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainSpec:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 128
    weight_decay: float = 0.0
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.schedule not in ("cosine", "none"):
            raise ValueError(f"schedule must be cosine or none, got {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch; cosine decays once per epoch."""
        if self.schedule == "none":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if self.wd:
                g = g + self.wd * params[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum, self.wd = momentum, weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if self.wd:
                g = g + self.wd * params[name]
            b = self.buf.get(name)
            b = g.copy() if b is None else self.momentum * b + g
            self.buf[name] = b
            params[name] = params[name] - lr * b


def make_optimizer(spec: TrainSpec):
    if spec.optimizer == "adam":
        return Adam(weight_decay=spec.weight_decay)
    return SGD(weight_decay=spec.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    accuracy: float
    loss: float


def write_history(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "accuracy", "loss"])
        for r in history:
            w.writerow([r.epoch, r.split, f"{r.accuracy:.6f}", f"{r.loss:.6f}"])


def evaluate(model: Model, config: CompressionConfig | None, ds: Dataset, batch: int = 1000) -> float:
    """Top-1 accuracy of the compressed forward path."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(model, ds.images, config, batch)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def _apply_mask(model: Model, config: CompressionConfig | None) -> None:
    if config is None:
        return
    for layer, m in config.mask.bits.items():
        if not m.all():
            name = f"{layer}.weight"
            model.params[name] = model.params[name] * m


def _run(model: Model, train: Dataset, test: Dataset | None, spec: TrainSpec,
         config: CompressionConfig | None, label: str) -> list[EpochRecord]:
    opt = make_optimizer(spec)
    history = []
    step = 0
    for epoch in range(spec.epochs):
        t0 = time.perf_counter()
        lr = spec.lr_at(epoch)
        total, seen = 0.0, 0
        for xb, yb in batches(train, spec.batch, shuffle_seed=spec.seed * 100003 + epoch):
            loss, grads = batch_grads(model, xb, yb, config)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                worst = max(grads, key=lambda k: float(np.nanmax(np.abs(grads[k]))) if grads[k].size else 0.0)
                raise DivergenceError(f"{label}: non-finite loss {loss} at epoch {epoch + 1}, step {step} "
                                      f"(lr {lr:.3g}, largest gradient in {worst})")
            opt.step(model.params, grads, lr)
            _apply_mask(model, config)
            total += loss * len(yb)
            seen += len(yb)
            step += 1
        history.append(EpochRecord(epoch + 1, "train", float("nan"), total / seen))
        if test is not None:
            acc = evaluate(model, config, test)
            history.append(EpochRecord(epoch + 1, "test", acc, float("nan")))
            log.info("%s epoch %d/%d loss %.4f test acc %.4f (%.0fs)", label, epoch + 1, spec.epochs,
                     total / seen, acc, time.perf_counter() - t0)
    return history


def train_baseline(model: Model, train: Dataset, test: Dataset | None, spec: TrainSpec) -> tuple[Model, list[EpochRecord]]:
    """Full-precision training; the input model is left untouched."""
    model = model.copy()
    return model, _run(model, train, test, spec, None, "train")


def finetune(model: Model, config: CompressionConfig, train: Dataset, test: Dataset | None, spec: TrainSpec,
             calib_x: np.ndarray | None = None) -> tuple[Model, CompressionConfig, list[EpochRecord]]:
    """Quantization-aware fine-tuning with bits and mask frozen.

    Optimizer state starts fresh.  When ``calib_x`` is given, activation
    ranges are re-measured once under the config before training starts.
    Latent weights are re-masked after every step, so pruned weights stay
    exactly zero.  Returns the tuned model and the config it must be
    evaluated with.
    """
    model = model.copy()
    _apply_mask(model, config)
    if calib_x is not None and not config.is_identity():
        config = replace(config, act_ranges=calibrate_activations(model, calib_x, config))
    return model, config, _run(model, train, test, spec, None if config.is_identity() else config, "finetune")
