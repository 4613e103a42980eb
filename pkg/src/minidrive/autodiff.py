"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every learned module in this package is built from the ops defined here.
Values are float32 by default; gradient checks run the same graphs in
float64 (verification mode). Ops executed outside a `with Tape():` block
record nothing and run as plain inference.

Tape execution is single-threaded: replaying the node list in reverse
creation order visits each node exactly once in topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class DiffTensor:
    """Dense array plus an optional same-shape gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: DiffTensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Op recorder; `backward` replays nodes in reverse creation order."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @staticmethod
    def current() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, root: DiffTensor) -> None:
        if root.values.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if root.node_id is None:
            raise ValueError("backward root was not recorded on this tape")
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes[: root.node_id + 1]):
            if node.out.grad is not None:
                node.backward(node.out.grad)


def constant(values, dtype=None) -> DiffTensor:
    """Wrap an array as a non-differentiable leaf."""
    arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return DiffTensor(arr, requires_grad=False)


def parameter(values, dtype=None) -> DiffTensor:
    """Wrap an array as a trainable leaf."""
    arr = np.array(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return DiffTensor(arr, requires_grad=True)


def _accum(t: DiffTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.values.dtype, copy=True)
    else:
        t.grad += g


def _apply(values: np.ndarray, backward: Callable[[np.ndarray], None],
           parents: Sequence[DiffTensor]) -> DiffTensor:
    tape = Tape.current()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = DiffTensor(values, requires_grad=needs)
    if needs:
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(out, backward))
    return out


def _check_dtypes(*ts: DiffTensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise ValueError(f"mixed dtypes in op: {sorted(str(d) for d in dts)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_dtypes(a, b)
    out = a.values + b.values

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _apply(out, backward, (a, b))


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_dtypes(a, b)
    out = a.values - b.values

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _apply(out, backward, (a, b))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_dtypes(a, b)
    out = a.values * b.values

    def backward(g):
        _accum(a, _unbroadcast(g * b.values, a.shape))
        _accum(b, _unbroadcast(g * a.values, b.shape))

    return _apply(out, backward, (a, b))


def scale(a: DiffTensor, s: float) -> DiffTensor:
    out = a.values * a.values.dtype.type(s)

    def backward(g):
        _accum(a, g * a.values.dtype.type(s))

    return _apply(out, backward, (a,))


def gelu(a: DiffTensor) -> DiffTensor:
    """Gaussian error linear unit, tanh approximation (smooth everywhere)."""
    x = a.values
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        _accum(a, g * da.astype(x.dtype))

    return _apply(out.astype(x.dtype), backward, (a,))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """2-D matrix product with reverse-mode accumulation."""
    _check_dtypes(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.values @ b.values

    def backward(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _apply(out, backward, (a, b))


def transpose(a: DiffTensor) -> DiffTensor:
    if a.values.ndim != 2:
        raise ValueError(f"transpose expects rank 2, got {a.shape}")
    out = np.ascontiguousarray(a.values.T)

    def backward(g):
        _accum(a, g.T)

    return _apply(out, backward, (a,))


def reshape(a: DiffTensor, shape: tuple[int, ...]) -> DiffTensor:
    out = a.values.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _apply(out, backward, (a,))


def narrow(a: DiffTensor, axis: int, start: int, length: int) -> DiffTensor:
    """Contiguous slice along one axis of a 2-D tensor."""
    if a.values.ndim != 2 or axis not in (0, 1):
        raise ValueError(f"narrow expects rank 2 and axis 0/1, got {a.shape}, axis={axis}")
    idx = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))
    out = np.ascontiguousarray(a.values[idx])

    def backward(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        _accum(a, full)

    return _apply(out, backward, (a,))


def concat(ts: Sequence[DiffTensor], axis: int) -> DiffTensor:
    _check_dtypes(*ts)
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
            _accum(t, piece)

    return _apply(out, backward, tuple(ts))


def mean_rows(a: DiffTensor) -> DiffTensor:
    """Mean over axis 0, keeping a [1, d] row."""
    if a.values.ndim != 2:
        raise ValueError(f"mean_rows expects rank 2, got {a.shape}")
    n = a.shape[0]
    out = a.values.mean(axis=0, keepdims=True)

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _apply(out, backward, (a,))


def sum_all(a: DiffTensor) -> DiffTensor:
    out = np.asarray(a.values.sum(), dtype=a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _apply(out, backward, (a,))


def mean_all(a: DiffTensor) -> DiffTensor:
    n = a.values.size
    out = np.asarray(a.values.mean(), dtype=a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _apply(out, backward, (a,))


# ---------------------------------------------------------------------------
# normalization, attention kernels, losses


def softmax_rows(x: DiffTensor) -> DiffTensor:
    """Numerically stabilized softmax over the trailing dimension."""
    v = x.values
    if v.shape[-1] < 1:
        raise ValueError("softmax_rows needs a non-empty trailing dimension")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_rows given non-finite input")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * y)

    return _apply(y.astype(v.dtype), backward, (x,))


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Per-trailing-slice normalization followed by affine gain/bias."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[-1]
    if gain.values.reshape(-1).shape[0] != n or bias.values.reshape(-1).shape[0] != n:
        raise ValueError(
            f"layer_norm gain/bias must match feature dim {n}, got {gain.shape}/{bias.shape}")
    _check_dtypes(x, gain, bias)
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = (v - mu) * inv
    gflat = gain.values.reshape(1, -1) if v.ndim == 2 else gain.values.reshape(-1)
    bflat = bias.values.reshape(1, -1) if v.ndim == 2 else bias.values.reshape(-1)
    out = xhat * gflat + bflat

    def backward(g):
        _accum(gain, (g * xhat).sum(axis=tuple(range(v.ndim - 1))).reshape(gain.shape))
        _accum(bias, g.sum(axis=tuple(range(v.ndim - 1))).reshape(bias.shape))
        dxhat = g * gflat
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, ((dxhat - m1 - xhat * m2) * inv).astype(v.dtype))

    return _apply(out.astype(v.dtype), backward, (x, gain, bias))


def embedding_lookup(table: DiffTensor, ids: np.ndarray) -> DiffTensor:
    """Row gather; reverse pass scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        off = int(ids[bad][0])
        raise ValueError(f"embedding id {off} out of range [0, {vocab})")
    out = table.values[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.values)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _apply(out, backward, (table,))


def cross_entropy(logits: DiffTensor, targets: np.ndarray, mask: np.ndarray) -> DiffTensor:
    """Mean of -log softmax(logits)[target] over positions with mask == 1."""
    v = logits.values
    if v.ndim != 2:
        raise ValueError(f"cross_entropy expects [T, V] logits, got {v.shape}")
    t, vocab = v.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    if targets.shape != (t,) or mask.shape != (t,):
        raise ValueError(f"targets/mask shape mismatch: {targets.shape}/{mask.shape} vs T={t}")
    if ((targets < 0) | (targets >= vocab)).any():
        raise ValueError(f"target id out of range [0, {vocab})")
    sel = mask.astype(bool)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("cross_entropy mask selects no positions")
    m = v.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(v - m).sum(axis=1))
    nll = lse - v[np.arange(t), targets]
    out = np.asarray(nll[sel].mean(), dtype=v.dtype)

    def backward(g):
        soft = np.exp(v - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(t), targets] -= 1.0
        soft *= (sel.astype(v.dtype) / n)[:, None]
        _accum(logits, (g * soft).astype(v.dtype))

    return _apply(out, backward, (logits,))


def mse(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Mean squared difference over all elements."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.values - b.values
    n = d.size
    out = np.asarray((d * d).mean(), dtype=a.dtype)

    def backward(g):
        gd = (2.0 / n) * d * g
        _accum(a, gd.astype(a.dtype))
        _accum(b, -gd.astype(a.dtype))

    return _apply(out, backward, (a, b))


def l1(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Mean absolute difference over all elements."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"l1 shape mismatch: {a.shape} vs {b.shape}")
    d = a.values - b.values
    n = d.size
    out = np.asarray(np.abs(d).mean(), dtype=a.dtype)

    def backward(g):
        gd = (np.sign(d) / n) * g
        _accum(a, gd.astype(a.dtype))
        _accum(b, -gd.astype(a.dtype))

    return _apply(out, backward, (a, b))


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[np.ndarray]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def gradient_check(f: Callable[[list[DiffTensor]], DiffTensor],
                   inputs: list[DiffTensor],
                   h: float = 1e-5,
                   tol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar-valued `f` against central differences.

    The finite-difference reference is always evaluated in float64 so the
    32-bit tape path can be checked against an accurate oracle. Relative
    error denominator is floored at 1e-3 to keep near-zero coordinates from
    dominating.
    """
    with Tape() as tape:
        out = f(inputs)
        tape.backward(out)
    grads = [np.zeros_like(x.values) if x.grad is None else x.grad.copy() for x in inputs]

    base = [x.values.astype(np.float64) for x in inputs]
    per_input: list[np.ndarray] = []
    worst = 0.0
    for i, b in enumerate(base):
        errs = np.zeros(b.size)
        for j in range(b.size):
            for sgn in (+1.0, -1.0):
                pert = [v.copy() for v in base]
                pert[i].reshape(-1)[j] += sgn * h
                ys = f([DiffTensor(v) for v in pert])
                if sgn > 0:
                    fp = ys.item()
                else:
                    fm = ys.item()
            fd = (fp - fm) / (2.0 * h)
            gt = float(grads[i].reshape(-1)[j])
            errs[j] = abs(gt - fd) / max(abs(gt), abs(fd), 1e-3)
        per_input.append(errs.reshape(b.shape))
        if b.size:
            worst = max(worst, float(errs.max()))
    return GradCheckReport(max_rel_error=worst, per_input=per_input, tol=tol)
