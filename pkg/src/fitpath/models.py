"""Layer graphs for the desk-scale networks, MAC counting and checkpoints."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .compression import (
    FULL_PRECISION,
    CompressionConfig,
    act_pass_mask,
    quantize_acts,
    quantize_weights,
    weight_scale,
)

WEIGHTED = ("conv2d", "dense")
KINDS = WEIGHTED + ("relu", "maxpool", "flatten")

CHECKPOINT_MAGIC = b"FITC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    dims: dict = field(default_factory=dict)

    @property
    def quantizable(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def prunable(self) -> bool:
        return self.kind in WEIGHTED

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "dims": dict(self.dims)}


@dataclass
class Model:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray]
    macs: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.macs:
            self.macs = count_macs(self.layers, self.input_shape)

    def quantizable_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.quantizable]

    def prunable_shapes(self) -> dict[str, tuple[int, ...]]:
        return {l.name: self.params[f"{l.name}.weight"].shape for l in self.layers if l.prunable}

    def weight(self, layer: str) -> np.ndarray:
        return self.params[f"{layer}.weight"]

    def n_weights(self) -> int:
        return int(sum(self.params[f"{n}.weight"].size for n in self.quantizable_layers()))

    def n_biases(self) -> int:
        return int(sum(self.params[f"{n}.bias"].size for n in self.quantizable_layers()))

    def copy(self) -> "Model":
        return Model(list(self.layers), tuple(self.input_shape),
                     {k: v.copy() for k, v in self.params.items()}, dict(self.macs))


def _shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]):
    """Yield (spec, input shape, output shape) per layer, checking compatibility."""
    shape = tuple(input_shape)
    for spec in layers:
        d = spec.dims
        if spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != d["in_channels"]:
                raise ValueError(f"{spec.name}: expects {d['in_channels']} input channels, got shape {shape}")
            k, s, p = d["kernel"], d.get("stride", 1), d.get("padding", 0)
            oh = (shape[1] + 2 * p - k) // s + 1
            ow = (shape[2] + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"{spec.name}: kernel {k} does not fit input {shape}")
            out = (d["out_channels"], oh, ow)
        elif spec.kind == "dense":
            if len(shape) != 1 or shape[0] != d["in_features"]:
                raise ValueError(f"{spec.name}: expects {d['in_features']} features, got shape {shape}")
            out = (d["out_features"],)
        elif spec.kind == "maxpool":
            k = d.get("kernel", 2)
            if len(shape) != 3 or shape[1] % k or shape[2] % k:
                raise ValueError(f"{spec.name}: cannot pool shape {shape} by {k}")
            out = (shape[0], shape[1] // k, shape[2] // k)
        elif spec.kind == "flatten":
            out = (int(np.prod(shape)),)
        elif spec.kind == "relu":
            out = shape
        else:
            raise ValueError(f"{spec.name}: unknown layer kind {spec.kind!r}")
        yield spec, shape, out
        shape = out


def count_macs(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> dict[str, int]:
    macs = {}
    for spec, _, out in _shapes(layers, input_shape):
        d = spec.dims
        if spec.kind == "conv2d":
            macs[spec.name] = out[1] * out[2] * d["out_channels"] * d["in_channels"] * d["kernel"] ** 2
        elif spec.kind == "dense":
            macs[spec.name] = d["in_features"] * d["out_features"]
    return macs


def output_shape(model: Model) -> tuple[int, ...]:
    shape = tuple(model.input_shape)
    for _, _, shape in _shapes(model.layers, model.input_shape):
        pass
    return shape


def init_params(layers: list[LayerSpec], seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for spec in layers:
        d = spec.dims
        if spec.kind == "conv2d":
            shape = (d["out_channels"], d["in_channels"], d["kernel"], d["kernel"])
            fan_in = d["in_channels"] * d["kernel"] ** 2
            n_out = d["out_channels"]
        elif spec.kind == "dense":
            shape = (d["in_features"], d["out_features"])
            fan_in = d["in_features"]
            n_out = d["out_features"]
        else:
            continue
        params[f"{spec.name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{spec.name}.bias"] = np.zeros(n_out)
    return params


def build_lenet(seed: int = 0) -> Model:
    """LeNet-5 variant for 28x28x1 inputs and 10 classes.

    Channel widths 32/64 and a 512-unit hidden layer give 4,267,008 MACs,
    i.e. 4.37 GBOPs at 32x32 bits.
    """
    layers = [
        LayerSpec("conv1", "conv2d", {"in_channels": 1, "out_channels": 32, "kernel": 5}),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", {"kernel": 2}),
        LayerSpec("conv2", "conv2d", {"in_channels": 32, "out_channels": 64, "kernel": 5}),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool", {"kernel": 2}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "dense", {"in_features": 1024, "out_features": 512}),
        LayerSpec("relu3", "relu"),
        LayerSpec("fc2", "dense", {"in_features": 512, "out_features": 10}),
    ]
    return Model(layers, (1, 28, 28), init_params(layers, seed))


def build_mlp(widths, seed: int = 0) -> Model:
    """Dense/ReLU stack; ``widths = [in, hidden..., out]``."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ValueError(f"MLP widths must be >= 2 positive integers, got {widths}")
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        if i > 1:
            layers.append(LayerSpec(f"relu{i - 1}", "relu"))
        layers.append(LayerSpec(f"dense{i}", "dense", {"in_features": a, "out_features": b}))
    return Model(layers, (widths[0],), init_params(layers, seed))


# ---------------------------------------------------------------- forward


def _param(name: str, value: np.ndarray) -> ad.Tensor:
    tape = ad.active_tape()
    return tape.param(name, value) if tape is not None else ad.Tensor(value)


def _weight_tensor(model: Model, layer: str, config: CompressionConfig | None, mode: str) -> ad.Tensor:
    name = f"{layer}.weight"
    w = model.params[name]
    if config is None:
        return _param(name, w)
    mask = config.mask.bits.get(layer)
    if mask is not None and mask.all():
        mask = None
    bits = config.w_bits[layer]
    if mode == "effective":
        masked = w if mask is None else w * mask
        return _param(name, quantize_weights(masked, bits))
    t = _param(name, w)
    if mask is not None:
        t = ad.mul(t, mask.astype(np.float64))
    if bits < FULL_PRECISION:
        q = quantize_weights(t.data, bits)
        s = weight_scale(t.data, bits)
        in_range = np.abs(t.data) <= s * (2 ** (bits - 1) - 1)
        t = ad.straight_through(t, q, in_range, kind="fake_quant_w")
    return t


def forward(model: Model, x, config: CompressionConfig | None = None, *, mode: str = "latent",
            record: dict | None = None) -> ad.Tensor:
    """Logits of ``model`` on the batch ``x``.

    ``config`` applies ``mask * quantize(weight)`` to each weighted layer and
    quantizes that layer's input activation.  ``mode="latent"`` keeps the
    latent weights as parameters (straight-through gradients, for training);
    ``mode="effective"`` makes the compressed weights themselves the
    parameters (for Fisher estimation).

    When ``record`` is a dict, it receives ``{layer: (raw_input, layer_input)}``
    for every weighted layer: the activation before quantization as an array
    and the tensor actually fed to the layer.
    """
    if mode not in ("latent", "effective"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if config is not None:
        config.check(model)
        if config.is_identity():
            config = None
    h = x if isinstance(x, ad.Tensor) else ad.as_input(x)
    if h.shape[1:] != tuple(model.input_shape):
        raise ad.ShapeError("forward", f"input sample shape {h.shape[1:]} != model input {model.input_shape}")
    for spec in model.layers:
        if spec.kind in WEIGHTED:
            raw = h.data
            if config is not None and config.a_bits[spec.name] < FULL_PRECISION:
                cmax, signed = config.act_ranges[spec.name]
                b = config.a_bits[spec.name]
                h = ad.straight_through(h, quantize_acts(raw, b, cmax, signed),
                                        act_pass_mask(raw, cmax, signed), kind="fake_quant_a")
            if record is not None:
                record[spec.name] = (raw, h)
            w = _weight_tensor(model, spec.name, config, mode)
            bias = _param(f"{spec.name}.bias", model.params[f"{spec.name}.bias"])
            if spec.kind == "conv2d":
                h = ad.conv2d(h, w, stride=spec.dims.get("stride", 1), padding=spec.dims.get("padding", 0))
            else:
                h = ad.matmul(h, w)
            h = ad.bias_add(h, bias)
        elif spec.kind == "relu":
            h = ad.relu(h)
        elif spec.kind == "maxpool":
            h = ad.maxpool2d(h, spec.dims.get("kernel", 2))
        elif spec.kind == "flatten":
            h = ad.flatten(h)
    return h


def predict(model: Model, x: np.ndarray, config: CompressionConfig | None = None, batch: int = 1000) -> np.ndarray:
    """Untracked forward in chunks; returns logits as an array."""
    outs = []
    for i in range(0, len(x), batch):
        outs.append(forward(model, x[i:i + batch], config).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + output_shape(model))


def calibrate_activations(model: Model, x: np.ndarray, config: CompressionConfig | None = None,
                          percentile: float = 99.9, batch: int = 1000) -> dict[str, tuple[float, bool]]:
    """Activation range per weighted layer input: (percentile of |a|, has negatives).

    Activation quantization is switched off while measuring; weights follow ``config``.
    """
    if config is not None:
        config = replace(config, a_bits={l: FULL_PRECISION for l in config.a_bits})
    seen: dict[str, list[np.ndarray]] = {}
    for i in range(0, len(x), batch):
        record: dict = {}
        forward(model, x[i:i + batch], config, record=record)
        for layer, (raw, _) in record.items():
            seen.setdefault(layer, []).append(raw.reshape(-1))
    out = {}
    for layer, chunks in seen.items():
        a = np.concatenate(chunks)
        out[layer] = (float(np.percentile(np.abs(a), percentile)), bool(a.min() < 0))
    return out


def batch_grads(model: Model, x: np.ndarray, y: np.ndarray, config: CompressionConfig | None = None,
                mode: str = "latent") -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(forward(model, x, config, mode=mode), y, reduction="mean")
        grads = tape.backward(loss)
    return float(loss.data), grads


def per_sample_grad_chunks(model: Model, x: np.ndarray, y: np.ndarray, config: CompressionConfig | None = None,
                           mode: str = "latent", chunk: int = 32, watch_inputs: bool = False):
    """Yield ``(grads, raw_inputs)`` per chunk of samples.

    ``grads`` maps parameter names (and, with ``watch_inputs``, ``"<layer>:input"``
    for each weighted layer's input) to arrays with a leading per-sample axis.
    ``raw_inputs`` holds each weighted layer's activation before quantization.
    """
    if len(x) < 1:
        raise ValueError("per-sample gradients need at least one sample")
    for i in range(0, len(x), chunk):
        xb, yb = x[i:i + chunk], y[i:i + chunk]
        record: dict = {}
        with ad.Tape() as tape:
            inp = tape.input(xb)
            logits = forward(model, inp, config, mode=mode, record=record if watch_inputs else None)
            if watch_inputs:
                for layer, (_, t) in record.items():
                    tape.watch(t, f"{layer}:input")
            loss = ad.softmax_cross_entropy(logits, yb, reduction="sum")
            grads = tape.backward(loss, per_sample=True)
        yield grads, {k: raw for k, (raw, _) in record.items()}


def per_sample_grads(model: Model, x: np.ndarray, y: np.ndarray, config: CompressionConfig | None = None,
                     mode: str = "latent", chunk: int = 32) -> list[dict[str, np.ndarray]]:
    """Gradient of each sample's own loss, one map per sample."""
    out = []
    for grads, _ in per_sample_grad_chunks(model, x, y, config, mode, chunk):
        n = next(iter(grads.values())).shape[0]
        out.extend({k: v[j] for k, v in grads.items()} for j in range(n))
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path: str | Path, meta: dict | None = None) -> None:
    """Write magic, version, JSON header, raw little-endian f64 payloads, CRC32."""
    names = sorted(model.params)
    index, offset = [], 0
    for n in names:
        arr = model.params[n]
        index.append({"name": n, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    header = {
        "layers": [l.to_dict() for l in model.layers],
        "input_shape": list(model.input_shape),
        "tensors": index,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes))
    body += hbytes
    for n in names:
        body += np.ascontiguousarray(model.params[n], dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def read_checkpoint_meta(path: str | Path) -> dict:
    return _parse_checkpoint(Path(path).read_bytes())[0].get("meta", {})


def _parse_checkpoint(raw: bytes):
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint is corrupt (CRC32 mismatch)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    header = json.loads(raw[16:16 + hlen].decode())
    return header, raw[16 + hlen:-4]


def load_checkpoint(path: str | Path) -> Model:
    header, payload = _parse_checkpoint(Path(path).read_bytes())
    layers = [LayerSpec(d["name"], d["kind"], d["dims"]) for d in header["layers"]]
    params = {}
    for t in header["tensors"]:
        nbytes = t["count"] * 8
        if t["offset"] + nbytes > len(payload):
            raise CheckpointError(f"tensor {t['name']} extends past end of payload")
        arr = np.frombuffer(payload, dtype="<f8", count=t["count"], offset=t["offset"])
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    model = Model(layers, tuple(header["input_shape"]), params)
    expected = init_params(layers, 0)
    for name, arr in expected.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} does not match layer spec {arr.shape}")
    return model
