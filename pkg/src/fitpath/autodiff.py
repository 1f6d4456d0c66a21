"""Dense float64 tensors with a reverse-mode tape.

Ops record onto the active :class:`Tape` (entered with ``with Tape() as tape``).
Outside a tape they only compute values, which is the fast inference path.

Tensors carry a ``batched`` flag: data-derived tensors have the sample index
on axis 0, parameter-derived tensors do not.  That flag is what lets
``Tape.backward(loss, per_sample=True)`` keep one gradient per sample for
parameters instead of summing over the batch.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("fitpath_tape", default=None)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "node", "batched")

    def __init__(self, data, node: int | None = None, batched: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.node = node
        self.batched = batched

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, batched={self.batched})"


def as_input(x) -> Tensor:
    """Wrap a data array whose axis 0 indexes samples."""
    return Tensor(x, batched=True)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int, ...]
    backward: Callable | None
    batched: bool
    # names the node when it is a parameter leaf or a watched intermediate
    name: str | None = None
    saved: dict = field(default_factory=dict)


class Tape:
    """Records ops in topological order; ``backward`` walks them once in reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def _record(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> Tensor:
        """Create a named trainable leaf."""
        t = Tensor(value, batched=False)
        t.node = self._record(TapeNode("param", (), None, False, name=name, saved={"shape": t.shape}))
        return t

    def input(self, value) -> Tensor:
        """Batched leaf that is tracked, so its gradient can be watched."""
        t = Tensor(value, batched=True)
        t.node = self._record(TapeNode("input", (), None, True))
        return t

    def watch(self, t: Tensor, name: str) -> Tensor:
        """Ask ``backward`` to also return the gradient of an intermediate tensor."""
        if t.node is None:
            raise TapeError(f"cannot watch untracked tensor {name!r}")
        node = self.nodes[t.node]
        if node.name is not None and node.kind != "param":
            raise TapeError(f"tensor already watched as {node.name!r}")
        if node.kind == "param":
            raise TapeError("parameters are returned by backward already")
        node.name = name
        return t

    def backward(self, loss: Tensor, per_sample: bool = False) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for every named node, then clear the tape.

        With ``per_sample=True`` the loss must be a sum of independent
        per-sample terms; parameter gradients then come back with a leading
        sample axis, entry ``i`` being the gradient of term ``i``.
        """
        if not self.nodes:
            raise TapeError("backward on an empty tape")
        if loss.node is None:
            raise TapeError("loss was not produced by recorded ops")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
        out: dict[str, np.ndarray] = {}
        for idx in range(loss.node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.name is not None:
                out[node.name] = g
            if node.backward is None:
                continue
            in_grads = node.backward(g, per_sample)
            for j, gj in zip(node.inputs, in_grads):
                if j is None or gj is None:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        # parameters the loss does not depend on get explicit zeros
        params = {n.name: n.saved["shape"] for n in self.nodes if n.kind == "param"}
        lead = ()
        if per_sample:
            lead = next((v.shape[:1] for k, v in out.items() if k in params and v.ndim > len(params[k])), ())
        for name, shape in params.items():
            if name not in out:
                out[name] = np.zeros(lead + shape)
        self.nodes.clear()
        return out


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def _make(kind, value, inputs: Sequence, backward, **saved) -> Tensor:
    batched = any(isinstance(t, Tensor) and t.batched for t in inputs)
    tape = _ACTIVE.get()
    out = Tensor(value, batched=batched)
    ids = tuple(t.node if isinstance(t, Tensor) else None for t in inputs)
    if tape is not None and any(i is not None for i in ids):
        out.node = tape._record(TapeNode(kind, ids, backward, batched, saved=saved))
    return out


def _per_sample_needed(per_sample: bool, out_batched: bool, t: Tensor) -> bool:
    return per_sample and out_batched and not t.batched


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.maximum(x.data, 0.0), (x,), lambda g, ps: (g * pos,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ")
    if a.batched != b.batched:
        raise ShapeError("add", "cannot mix batched and unbatched operands")
    return _make("add", a.data + b.data, (a, b), lambda g, ps: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant array of the same shape."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")
        if a.batched != b.batched:
            raise ShapeError("mul", "cannot mix batched and unbatched operands")
        av, bv = a.data, b.data
        return _make("mul", av * bv, (a, b), lambda g, ps: (g * bv, g * av))
    bv = np.asarray(b, dtype=np.float64)
    if bv.shape != a.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {bv.shape} differ")
    return _make("mul", a.data * bv, (a,), lambda g, ps: (g * bv,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g, ps):
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.data.sum()), (x,), bwd)


def straight_through(x: Tensor, value: np.ndarray, pass_mask: np.ndarray, kind: str = "fake_quant") -> Tensor:
    """Forward ``value``; backward passes the gradient only where ``pass_mask``."""
    if value.shape != x.shape or pass_mask.shape != x.shape:
        raise ShapeError(kind, f"value/mask shape must equal input {x.shape}")
    pm = pass_mask.astype(np.float64)
    return _make(kind, value, (x,), lambda g, ps: (g * pm,))


# ---------------------------------------------------------------- linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape[1]} vs {b.shape[0]}")
    av, bv = a.data, b.data
    out_batched = a.batched or b.batched
    if b.batched:
        raise ShapeError("matmul", "right operand must not be batched")

    def bwd(g, ps):
        ga = g @ bv.T
        if _per_sample_needed(ps, out_batched, b):
            gb = av[:, :, None] * g[:, None, :]
        else:
            gb = np.matmul(av.T, g)
        return ga, gb

    return _make("matmul", av @ bv, (a, b), bwd)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (the only broadcast supported)."""
    if x.data.ndim < 2 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError("bias_add", f"bias {bias.shape} does not match axis 1 of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    out_batched = x.batched or bias.batched

    def bwd(g, ps):
        n, c = g.shape[0], g.shape[1]
        if _per_sample_needed(ps, out_batched, bias):
            gb = g.reshape(n, c, -1).sum(axis=2)
        else:
            gb = g.reshape(n, c, -1).sum(axis=(0, 2))
        return g, gb

    return _make("bias_add", x.data + bias.data.reshape(view), (x, bias), bwd)


def _im2col(x: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patches as a [C*k*k, N*OH*OW] matrix so each conv pass is a single GEMM."""
    n, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * k * k, n * oh * ow)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input [N, C, H, W], kernel [O, C, k, k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input channels {c} != kernel channels {ci}")
    if kh != kw:
        raise ShapeError("conv2d", f"only square kernels supported, got {kh}x{kw}")
    if w.batched:
        raise ShapeError("conv2d", "kernel must not be batched")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", f"kernel {kh} larger than padded input {xp.shape[2:]}")
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    p = oh * ow
    cols = _im2col(xp, kh, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    out_batched = x.batched
    need_gx = x.node is not None

    def bwd(g, ps):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * p)
        if _per_sample_needed(ps, out_batched, w):
            per = cols.reshape(c * kh * kw, n, p).transpose(1, 2, 0)
            gw = np.matmul(g.reshape(n, o, p), per).reshape(n, o, c, kh, kw)
        else:
            gw = (gt @ cols.T).reshape(o, c, kh, kw)
        if not need_gx:
            return None, gw
        gcols = (wmat.T @ gt).reshape(c, kh, kw, n, oh, ow)
        gxp = np.zeros((c, n) + xp.shape[2:])
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
        gxp = gxp.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return _make("conv2d", out, (x, w), bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); ties go to the first window slot."""
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("maxpool2d", f"spatial dims {h}x{w} not divisible by {k}")
    views = [x.data[:, :, i::k, j::k] for i in range(k) for j in range(k)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bwd(g, ps):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(idx, k)
            gx[:, :, i::k, j::k] = g * hit
        return (gx,)

    return _make("maxpool2d", out, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("flatten", x.data.reshape(shape[0], -1), (x,), lambda g, ps: (g.reshape(shape),))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy", f"labels outside [0, {logits.shape[1]})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    nll = lse - z[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = nll.sum() * scale

    def bwd(g, ps):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (scale * g),)

    return _make("softmax_cross_entropy", np.asarray(value), (logits,), bwd)


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name, mirroring the op table above."""
    table = {
        "matmul": matmul,
        "conv2d": conv2d,
        "maxpool2d": maxpool2d,
        "relu": relu,
        "add": add,
        "bias_add": bias_add,
        "flatten": flatten,
        "softmax_cross_entropy": softmax_cross_entropy,
        "mul": mul,
        "sum": sum_all,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
