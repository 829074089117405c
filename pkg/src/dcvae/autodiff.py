"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A `Tensor` wraps a numpy array plus an optional gradient buffer. Primitives
applied while a `Tape` is active are recorded (define-by-run); `backward`
replays the tape in reverse and accumulates adjoints. Without an active tape
primitives are plain numpy computations, which is how inference runs.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()
_local = threading.local()


def _current_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """Dense float64 array with an optional gradient slot and tape handle."""

    __slots__ = ("data", "needs_grad", "grad", "node_id", "_tape")

    def __init__(self, data, needs_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.needs_grad = needs_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"

    # Small operator surface so layer code reads like math.
    def __add__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("add", [self, other])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("add", [self, apply_primitive("scale_shift", [other], alpha=-1.0, beta=0.0)])

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("mul", [self, other])
        return apply_primitive("scale_shift", [self], alpha=float(other), beta=0.0)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply_primitive("scale_shift", [self], alpha=-1.0, beta=0.0)

    def __rsub__(self, other):
        # float - Tensor
        return apply_primitive("scale_shift", [self], alpha=-1.0, beta=float(other))

    def sum(self) -> "Tensor":
        return apply_primitive("sum", [self])

    def mean(self) -> "Tensor":
        return apply_primitive("mean", [self])

    def reshape(self, shape) -> "Tensor":
        return apply_primitive("reshape", [self], shape=tuple(shape))


def constant(data) -> Tensor:
    return Tensor(data, needs_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, needs_grad=True)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Node ids are globally increasing at Tensor creation, so every entry's
    input ids precede its output id. One tape per thread may be active.
    """

    def __init__(self):
        self.entries: list[tuple[tuple[int, ...], int, Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self.produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def record(self, inputs: Sequence[Tensor], out: Tensor, bw: Callable):
        for t in inputs:
            if t.needs_grad and t.node_id not in self.produced:
                self.leaves.setdefault(t.node_id, t)
        self.entries.append((tuple(t.node_id for t in inputs), out.node_id, bw))
        self.produced.add(out.node_id)
        out._tape = self

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate adjoints from a scalar loss back to every leaf.

        Returns a map node_id -> gradient array covering all needs_grad
        leaves touched by this tape; leaves unreachable from the loss get
        zeros. Leaf tensors also receive the result in their .grad slot.
        """
        if loss.shape != ():
            raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id not in self.produced:
            raise ValueError("backward: loss was not produced on this tape")
        adj: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for input_ids, out_id, bw in reversed(self.entries):
            g = adj.get(out_id)
            if g is None:
                continue
            for node_id, contrib in zip(input_ids, bw(g)):
                if contrib is None:
                    continue
                buf = adj.get(node_id)
                if isinstance(contrib, tuple):
                    idx, vals = contrib[1], contrib[2]
                    if buf is None:
                        buf = adj[node_id] = np.zeros(contrib[3])
                    np.add.at(buf, idx, vals)
                else:
                    if buf is None:
                        adj[node_id] = contrib.copy()
                    else:
                        buf += contrib
        out: dict[int, np.ndarray] = {}
        for node_id, leaf in self.leaves.items():
            g = adj.get(node_id)
            if g is None:
                g = np.zeros(leaf.shape)
            leaf.grad = g
            out[node_id] = g
        return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss._tape is None:
        raise ValueError("backward: loss was not produced on any tape")
    return loss._tape.backward(loss)


def _shape_error(kind: str, msg: str, *shapes):
    detail = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{kind}: {msg} (got {detail})")


def _require_same_shape(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise _shape_error(kind, "operands must share a shape", a.shape, b.shape)


# Each primitive: fwd(inputs, aux) -> (out_data, bw) where bw(g) yields one
# contribution per input: a dense array, None, or a sparse scatter spec
# ("rows"/"flat", indices, values, buffer_shape).


def _fwd_add(ts, aux):
    a, b = ts
    _require_same_shape("add", a, b)
    return a.data + b.data, lambda g: (g, g)


def _fwd_mul(ts, aux):
    a, b = ts
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return ad * bd, lambda g: (g * bd, g * ad)


def _fwd_scale_shift(ts, aux):
    (x,) = ts
    alpha, beta = aux["alpha"], aux["beta"]
    return alpha * x.data + beta, lambda g: (alpha * g,)


def _fwd_matmul(ts, aux):
    a, b = ts
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", "expected (n,k) @ (k,m)", a.shape, b.shape)
    ad, bd = a.data, b.data
    return ad @ bd, lambda g: (g @ bd.T, ad.T @ g)


def _fwd_affine(ts, aux):
    x, w = ts[0], ts[1]
    b = ts[2] if len(ts) == 3 else None
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or x.ndim not in (1, 2):
        raise _shape_error("affine", "expected x(...,d) with W(d,m)", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise _shape_error("affine", "bias must match W columns", b.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    if x.ndim == 1:
        def bw(g):
            gs = (wd @ g, np.outer(xd, g))
            return gs + (g,) if b is not None else gs
    else:
        def bw(g):
            gs = (g @ wd.T, xd.T @ g)
            return gs + (g.sum(axis=0),) if b is not None else gs

    return out, bw


def _fwd_tanh(ts, aux):
    (x,) = ts
    out = np.tanh(x.data)
    return out, lambda g: (g * (1.0 - out * out),)


def _fwd_sigmoid(ts, aux):
    (x,) = ts
    out = 1.0 / (1.0 + np.exp(-x.data))
    return out, lambda g: (g * out * (1.0 - out),)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _fwd_log_softmax(ts, aux):
    (x,) = ts
    if x.ndim not in (1, 2):
        raise _shape_error("log_softmax", "expected 1-D or 2-D input", x.shape)
    out = _log_softmax(x.data)
    s = np.exp(out)
    return out, lambda g: (g - s * g.sum(axis=-1, keepdims=x.ndim == 2),)


def _fwd_softmax(ts, aux):
    (x,) = ts
    if x.ndim not in (1, 2):
        raise _shape_error("softmax", "expected 1-D or 2-D input", x.shape)
    out = np.exp(_log_softmax(x.data))
    return out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=x.ndim == 2)),)


def _fwd_concat(ts, aux):
    if not ts:
        raise ValueError("concat: needs at least one input")
    nd = ts[0].ndim
    if nd not in (1, 2) or any(t.ndim != nd for t in ts):
        raise _shape_error("concat", "inputs must all be 1-D or all 2-D", *[t.shape for t in ts])
    if nd == 2 and any(t.shape[0] != ts[0].shape[0] for t in ts):
        raise _shape_error("concat", "2-D inputs must share row count", *[t.shape for t in ts])
    sizes = [t.shape[-1] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=-1)
    return out, lambda g: tuple(np.split(g, splits, axis=-1))


def _fwd_stack_rows(ts, aux):
    if not ts:
        raise ValueError("stack_rows: needs at least one input")
    if any(t.ndim != 1 or t.shape != ts[0].shape for t in ts):
        raise _shape_error("stack_rows", "inputs must be equal-length vectors", *[t.shape for t in ts])
    out = np.stack([t.data for t in ts], axis=0)
    return out, lambda g: tuple(g[i] for i in range(len(ts)))


def _fwd_row(ts, aux):
    (table,) = ts
    i = int(aux["index"])
    if table.ndim != 2:
        raise _shape_error("row", "expected a 2-D table", table.shape)
    if not 0 <= i < table.shape[0]:
        raise ValueError(f"row: index {i} out of range for table {table.shape}")
    shape = table.shape
    return table.data[i].copy(), lambda g: (("rows", np.array([i]), g[None, :], shape),)


def _fwd_rows(ts, aux):
    (table,) = ts
    ids = np.asarray(aux["indices"], dtype=np.intp)
    if table.ndim != 2:
        raise _shape_error("rows", "expected a 2-D table", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"rows: indices out of range for table {table.shape}")
    shape = table.shape
    return table.data[ids], lambda g: (("rows", ids, g, shape),)


def _fwd_gather(ts, aux):
    (x,) = ts
    ids = np.asarray(aux["indices"], dtype=np.intp)
    if x.ndim != 1:
        raise _shape_error("gather", "expected a 1-D input", x.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise ValueError(f"gather: indices out of range for vector {x.shape}")
    shape = x.shape
    return x.data[ids], lambda g: (("flat", ids, g, shape),)


def _fwd_sum(ts, aux):
    (x,) = ts
    shape = x.shape
    return np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),)


def _fwd_mean(ts, aux):
    (x,) = ts
    n = x.data.size
    shape = x.shape
    return np.asarray(x.data.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),)


def _fwd_reshape(ts, aux):
    (x,) = ts
    shape = aux["shape"]
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise _shape_error("reshape", f"cannot reshape to {shape}", x.shape)
    old = x.shape
    return x.data.reshape(shape), lambda g: (g.reshape(old),)


def _fwd_st_mixture(ts, aux):
    """Straight-through lookup: forward is table[index], backward pretends
    the forward had been the probability-weighted mixture of table rows."""
    probs, table = ts
    i = int(aux["index"])
    if probs.ndim != 1 or table.ndim != 2 or probs.shape[0] != table.shape[0]:
        raise _shape_error("st_mixture", "expected probs(m,) with table(m,d)", probs.shape, table.shape)
    if not 0 <= i < table.shape[0]:
        raise ValueError(f"st_mixture: index {i} out of range for table {table.shape}")
    pd, td = probs.data, table.data
    return td[i].copy(), lambda g: (td @ g, pd[:, None] * g[None, :])


_PRIMITIVES = {
    "add": _fwd_add,
    "mul": _fwd_mul,
    "scale_shift": _fwd_scale_shift,
    "matmul": _fwd_matmul,
    "affine": _fwd_affine,
    "tanh": _fwd_tanh,
    "sigmoid": _fwd_sigmoid,
    "softmax": _fwd_softmax,
    "log_softmax": _fwd_log_softmax,
    "concat": _fwd_concat,
    "stack_rows": _fwd_stack_rows,
    "row": _fwd_row,
    "rows": _fwd_rows,
    "gather": _fwd_gather,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "reshape": _fwd_reshape,
    "st_mixture": _fwd_st_mixture,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **aux) -> Tensor:
    """Apply a named primitive, recording it when differentiation is live."""
    fwd = _PRIMITIVES.get(kind)
    if fwd is None:
        raise ValueError(f"unknown primitive {kind!r}")
    out_data, bw = fwd(inputs, aux)
    tape = _current_tape()
    track = tape is not None and any(t.needs_grad for t in inputs)
    out = Tensor(out_data, needs_grad=track)
    if track:
        tape.record(inputs, out, bw)
    return out


# Thin named wrappers used throughout the model code.

def add(a, b):
    return apply_primitive("add", [a, b])

def mul(a, b):
    return apply_primitive("mul", [a, b])

def scale_shift(x, alpha, beta):
    return apply_primitive("scale_shift", [x], alpha=alpha, beta=beta)

def matmul(a, b):
    return apply_primitive("matmul", [a, b])

def affine(x, w, b=None):
    ts = [x, w] if b is None else [x, w, b]
    return apply_primitive("affine", ts)

def tanh(x):
    return apply_primitive("tanh", [x])

def sigmoid(x):
    return apply_primitive("sigmoid", [x])

def softmax(x):
    return apply_primitive("softmax", [x])

def log_softmax(x):
    return apply_primitive("log_softmax", [x])

def concat(ts):
    return apply_primitive("concat", list(ts))

def stack_rows(ts):
    return apply_primitive("stack_rows", list(ts))

def row(table, index):
    return apply_primitive("row", [table], index=index)

def rows(table, indices):
    return apply_primitive("rows", [table], indices=indices)

def gather(x, indices):
    return apply_primitive("gather", [x], indices=indices)

def tsum(x):
    return apply_primitive("sum", [x])

def tmean(x):
    return apply_primitive("mean", [x])

def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))

def st_mixture(probs, table, index):
    return apply_primitive("st_mixture", [probs, table], index=index)


def grad_check(fn: Callable[..., Tensor], point: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns the max over all coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    The function must be deterministic: it is re-evaluated many times.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    point = list(point)
    saved_flags = [t.needs_grad for t in point]
    for t in point:
        t.needs_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = fn(*point)
            if out.shape != ():
                raise ValueError(f"grad_check: function must return a scalar, got shape {out.shape}")
            tape.backward(out)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in point]

        worst = 0.0
        for t, ana in zip(point, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn(*point).data)
                flat[i] = orig - eps
                f_minus = float(fn(*point).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = ana.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(point, saved_flags):
            t.needs_grad = flag
