"""Fake quantizers, pruning masks and the configuration that binds them."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FULL_PRECISION = 32


class ConfigError(ValueError):
    """Configuration does not match the model it is applied to."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(b: int) -> None:
    if b < 2:
        raise ValueError(f"bit-width must be >= 2, got {b}")


def weight_scale(t: np.ndarray, b: int) -> float:
    return float(np.max(np.abs(t))) / (2 ** (b - 1) - 1) if t.size else 0.0


def quantize_weights(t: np.ndarray, b: int) -> np.ndarray:
    """Symmetric per-tensor max-abs quantizer with half-away-from-zero rounding.

    ``b >= 32`` returns the input unchanged.
    """
    _check_bits(b)
    if b >= FULL_PRECISION:
        return t
    qmax = 2 ** (b - 1) - 1
    s = weight_scale(t, b)
    if s == 0.0:
        return t.copy()
    return np.clip(round_half_away(t / s), -qmax, qmax) * s


def act_grid(calib_max: float, b: int, signed: bool) -> tuple[float, float, float]:
    """(scale, lowest code, highest code) of the activation grid."""
    levels = 2 ** (b - 1) - 1 if signed else 2 ** b - 1
    lo = -levels if signed else 0
    return calib_max / levels, lo, levels


def quantize_acts(t: np.ndarray, b: int, calib_max: float, signed: bool = False) -> np.ndarray:
    """Uniform activation quantizer with a scale frozen from calibration.

    Non-negative activations use the unsigned grid ``[0, calib_max]``;
    ``signed=True`` switches to a symmetric grid for inputs that can go
    negative (the normalized image).
    """
    _check_bits(b)
    if b >= FULL_PRECISION:
        return t
    if calib_max < 0:
        raise ValueError("calib_max must be non-negative")
    s, lo, hi = act_grid(calib_max, b, signed)
    if s == 0.0:
        return np.zeros_like(t)
    return np.clip(round_half_away(t / s), lo, hi) * s


def act_pass_mask(t: np.ndarray, calib_max: float, signed: bool) -> np.ndarray:
    lo = -calib_max if signed else 0.0
    return (t >= lo) & (t <= calib_max)


def ste_backward(grad_out: np.ndarray, latent: np.ndarray, mask: np.ndarray | None, b: int,
                 scale: float | None = None) -> np.ndarray:
    """Straight-through gradient of ``quantize_weights(mask * latent)``.

    The gradient passes unchanged where the latent weight lies inside the
    clamp range ``s * qmax`` and is zero outside it and at masked positions.
    ``scale`` defaults to the max-abs scale, for which nothing is clamped.
    """
    masked = latent if mask is None else latent * mask
    g = grad_out if mask is None else grad_out * mask
    if b >= FULL_PRECISION:
        return g
    qmax = 2 ** (b - 1) - 1
    s = weight_scale(masked, b) if scale is None else scale
    return g * (np.abs(masked) <= s * qmax)


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class PruneMask:
    """One keep/prune flag per prunable weight; True means kept."""

    bits: dict[str, np.ndarray]

    @classmethod
    def full(cls, shapes: dict[str, tuple[int, ...]]) -> "PruneMask":
        return cls({name: np.ones(shape, dtype=bool) for name, shape in shapes.items()})

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.bits.values()))

    @property
    def pruned(self) -> int:
        return int(sum(m.size - np.count_nonzero(m) for m in self.bits.values()))

    @property
    def sparsity(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def layer_sparsity(self, name: str) -> float:
        m = self.bits.get(name)
        if m is None or m.size == 0:
            return 0.0
        return 1.0 - np.count_nonzero(m) / m.size

    def is_full(self) -> bool:
        return all(m.all() for m in self.bits.values())

    def nested_in(self, earlier: "PruneMask") -> bool:
        """True if every weight pruned in ``earlier`` is still pruned here."""
        return all(not np.any(self.bits[k] & ~earlier.bits[k]) for k in earlier.bits)

    def packed(self) -> bytes:
        flat = np.concatenate([self.bits[k].ravel() for k in self.bits]) if self.bits else np.zeros(0, bool)
        return np.packbits(flat).tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.packed()).hexdigest()

    @classmethod
    def unpack(cls, data: bytes, shapes: dict[str, tuple[int, ...]]) -> "PruneMask":
        total = int(sum(int(np.prod(s)) for s in shapes.values()))
        if len(data) != (total + 7) // 8:
            raise ConfigError(f"mask sidecar holds {len(data)} bytes, expected {(total + 7) // 8}")
        flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=total).astype(bool)
        out, pos = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        return cls(out)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class CompressionConfig:
    """One point of compression space.

    ``act_ranges`` holds the frozen activation calibration per layer as
    ``(calib_max, signed)``; it is only consulted where ``a_bits < 32``.
    """

    w_bits: dict[str, int]
    a_bits: dict[str, int]
    kappa_index: int
    mask: PruneMask
    act_ranges: dict[str, tuple[float, bool]] = field(default_factory=dict)

    @classmethod
    def identity(cls, model, act_ranges=None) -> "CompressionConfig":
        names = model.quantizable_layers()
        return cls(
            w_bits={n: FULL_PRECISION for n in names},
            a_bits={n: FULL_PRECISION for n in names},
            kappa_index=0,
            mask=PruneMask.full(model.prunable_shapes()),
            act_ranges=dict(act_ranges or {}),
        )

    def is_identity(self) -> bool:
        return (all(b >= FULL_PRECISION for b in self.w_bits.values())
                and all(b >= FULL_PRECISION for b in self.a_bits.values())
                and self.mask.is_full())

    def with_bits(self, layer: str, w: int | None = None, a: int | None = None) -> "CompressionConfig":
        wb, ab = dict(self.w_bits), dict(self.a_bits)
        if w is not None:
            wb[layer] = w
        if a is not None:
            ab[layer] = a
        return replace(self, w_bits=wb, a_bits=ab)

    def check(self, model) -> None:
        names = set(model.quantizable_layers())
        for label, d in (("w_bits", self.w_bits), ("a_bits", self.a_bits)):
            if set(d) != names:
                raise ConfigError(f"{label} layers {sorted(d)} do not match model layers {sorted(names)}")
            for layer, b in d.items():
                if b < 2:
                    raise ConfigError(f"{label}[{layer}] = {b} is below 2 bits")
        shapes = model.prunable_shapes()
        if set(self.mask.bits) != set(shapes):
            raise ConfigError(f"mask layers {sorted(self.mask.bits)} do not match {sorted(shapes)}")
        for layer, shape in shapes.items():
            if self.mask.bits[layer].shape != tuple(shape):
                raise ConfigError(f"mask for {layer} has shape {self.mask.bits[layer].shape}, expected {shape}")
        for layer, b in self.a_bits.items():
            if b < FULL_PRECISION and layer not in self.act_ranges:
                raise ConfigError(f"{layer} quantizes activations but has no calibration range")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        layers = {}
        for name in self.w_bits:
            entry = {"w_bits": int(self.w_bits[name]), "a_bits": int(self.a_bits[name]),
                     "sparsity": round(self.mask.layer_sparsity(name), 10)}
            if name in self.act_ranges:
                cmax, signed = self.act_ranges[name]
                entry["act_max"] = float(cmax)
                entry["act_signed"] = bool(signed)
            layers[name] = entry
        return {
            "layers": layers,
            "kappa_index": int(self.kappa_index),
            "sparsity": round(self.mask.sparsity, 10),
            "mask_digest": self.mask.digest(),
        }

    def save(self, path: str | Path) -> None:
        """Write ``path`` (JSON) plus the bit-packed mask sidecar ``path.mask``."""
        path = Path(path)
        d = self.to_dict()
        d["mask_file"] = path.name + ".mask"
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        path.with_name(d["mask_file"]).write_bytes(self.mask.packed())

    @classmethod
    def load(cls, path: str | Path, model) -> "CompressionConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
        try:
            layers = d["layers"]
            mask_path = path.with_name(d.get("mask_file", path.name + ".mask"))
            mask = PruneMask.unpack(mask_path.read_bytes(), model.prunable_shapes())
            if mask.digest() != d["mask_digest"]:
                raise ConfigError(f"{mask_path}: mask digest mismatch")
            cfg = cls(
                w_bits={k: int(v["w_bits"]) for k, v in layers.items()},
                a_bits={k: int(v["a_bits"]) for k, v in layers.items()},
                kappa_index=int(d["kappa_index"]),
                mask=mask,
                act_ranges={k: (float(v["act_max"]), bool(v.get("act_signed", False)))
                            for k, v in layers.items() if "act_max" in v},
            )
        except KeyError as e:
            raise ConfigError(f"{path}: missing field {e.args[0]!r}") from e
        cfg.check(model)
        return cfg


# ---------------------------------------------------------------- applying


def effective_weight(weight: np.ndarray, mask: np.ndarray | None, bits: int) -> np.ndarray:
    """Mask first, then quantize, so pruned weights cannot inflate the scale."""
    masked = weight if mask is None or mask.all() else weight * mask
    return quantize_weights(masked, bits)


@dataclass
class AppliedConfig:
    """Effective parameters of a model under a config, and the perturbations."""

    params: dict[str, np.ndarray]
    # effective minus masked weight, per quantizable layer
    quant_delta: dict[str, np.ndarray]
    # latent values of weights newly masked relative to ``previous``
    prune_delta: dict[str, np.ndarray]


def apply_config(model, config: CompressionConfig, previous: CompressionConfig | None = None) -> AppliedConfig:
    config.check(model)
    params = dict(model.params)
    qdelta, pdelta = {}, {}
    for layer in model.quantizable_layers():
        wname = f"{layer}.weight"
        w = model.params[wname]
        m = config.mask.bits.get(layer)
        masked = w if m is None else w * m
        eff = quantize_weights(masked, config.w_bits[layer])
        params[wname] = eff
        qdelta[layer] = eff - masked
        if previous is not None and m is not None:
            newly = previous.mask.bits[layer] & ~m
            pdelta[layer] = w[newly]
    return AppliedConfig(params, qdelta, pdelta)


def pruned_count_for(kappa: float, total: int) -> int:
    return int(round(kappa * total))


def prune_to(mask: PruneMask, saliency: dict[str, tuple[np.ndarray, np.ndarray]], target_pruned: int) -> PruneMask:
    """Extend ``mask`` by pruning the lowest-scoring kept weights globally.

    Ties break by layer order then flat index, so the result is deterministic.
    Already-pruned weights stay pruned.
    """
    extra = target_pruned - mask.pruned
    if extra <= 0:
        return mask
    layers = list(mask.bits)
    scores = np.concatenate([saliency[l][1] for l in layers])
    owner = np.concatenate([np.full(len(saliency[l][0]), i) for i, l in enumerate(layers)])
    flat = np.concatenate([saliency[l][0] for l in layers])
    if extra > len(scores):
        raise ValueError(f"cannot prune {extra} more weights, only {len(scores)} remain")
    order = np.argsort(scores, kind="stable")[:extra]
    bits = {l: m.copy() for l, m in mask.bits.items()}
    for i, l in enumerate(layers):
        chosen = flat[order[owner[order] == i]]
        bits[l].reshape(-1)[chosen] = False
    return PruneMask(bits)
