"""Reverse-mode differentiation over dense float64 tensors.

Define-by-run: primitives execute eagerly on numpy arrays and, when a Tape
is active, append a node holding the backward closure. A tape is rebuilt on
every forward pass and can be swept backward exactly once.

Broadcasting in binary elementwise ops is restricted to three documented
cases: identical shapes, one scalar (rank-0) operand, or a rank-1 operand
whose length equals the other operand's last dimension (row broadcast).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's rule."""


class DomainError(ValueError):
    """Input (or overflowed output) outside the primitive's numeric domain."""


class TapeError(RuntimeError):
    """Tape misuse: replayed backward, missing history, non-scalar root."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    `data` is always C-contiguous float64. `grad`, once populated by a
    backward sweep, matches `data`'s shape; gradients accumulate additively
    across sweeps until `zero_grad` (or manual reset).
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, check_finite: bool = True):
        arr = np.array(data, dtype=np.float64, order="C")
        if check_finite and arr.size and not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise DomainError(f"non-finite value at flat index {bad}")
        self.data = arr
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; non-Tensor operands must be Python scalars
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.float64(x))


def constant(data) -> Tensor:
    """Leaf tensor intended as a non-trained constant in a graph."""
    return Tensor(data)


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_TLS = threading.local()


def _active_stack() -> list["Tape"]:
    # per-thread: separate tapes on separate threads share no mutable state
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


class Tape:
    """Ordered record of executed primitives; one backward sweep allowed."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False
        self._produced: set[int] = set()

    def __enter__(self):
        _active_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active_stack().pop()
        assert popped is self
        return False

    def backward(self, root: Tensor):
        backward(self, root)


class no_tape:
    """Context manager suspending all recording (evaluation / detached math)."""

    def __enter__(self):
        stack = _active_stack()
        self._saved = stack[:]
        stack.clear()
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_stack().extend(self._saved)
        return False


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor],
           backward_fn: Callable) -> None:
    """Append a primitive execution to the active tape (no-op without one).

    `backward_fn(*output_grads)` must return per-input gradient arrays
    (None for inputs that receive no gradient), aligned with `inputs`.
    """
    stack = _active_stack()
    if stack:
        tape = stack[-1]
        tape.nodes.append(_Node(tuple(inputs), tuple(outputs), backward_fn))
        for out in outputs:
            tape._produced.add(id(out))


def backward(tape: Tape, root: Tensor) -> None:
    """Populate grads of every tensor feeding `root` with d(root)/d(tensor)."""
    if tape._spent:
        raise TapeError("backward already ran on this tape; re-run forward first")
    if root.data.ndim != 0:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if id(root) not in tape._produced:
        raise TapeError("root was not produced on this tape")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        out_grads = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [
            g if g is not None else np.zeros_like(o.data)
            for g, o in zip(out_grads, node.outputs)
        ]
        in_grads = node.backward_fn(*out_grads)
        for tensor, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            key = id(tensor)
            acc = grads.get(key)
            grads[key] = g if acc is None else acc + g

    seen: set[int] = set()
    for node in tape.nodes:
        for tensor in node.inputs + node.outputs:
            key = id(tensor)
            if key in seen:
                continue
            seen.add(key)
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != tensor.data.shape:
                g = np.broadcast_to(g, tensor.data.shape)
            tensor.grad = np.array(g) if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# Elementwise binary ops with the three documented broadcast cases


def _binary_case(a: Tensor, b: Tensor, op: str) -> str:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return "same"
    if sb == ():
        return "b_scalar"
    if sa == ():
        return "a_scalar"
    if len(sb) == 1 and len(sa) >= 2 and sb[0] == sa[-1]:
        return "b_row"
    if len(sa) == 1 and len(sb) >= 2 and sa[0] == sb[-1]:
        return "a_row"
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == ():
        return np.sum(g)
    if g.shape == shape:
        return g
    # row-broadcast case: collapse leading axes
    return np.sum(g.reshape(-1, shape[0]), axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_case(a, b, "add")
    out = Tensor._wrap(a.data + b.data)

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    record((a, b), (out,), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_case(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    record((a, b), (out,), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_case(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad * bd)

    def bwd(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    record((a, b), (out,), bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_case(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        bad = int(np.flatnonzero(bd.ravel() == 0.0)[0]) if bd.ndim else 0
        raise DomainError(f"div: zero denominator at flat index {bad}")
    out = Tensor._wrap(ad / bd)

    def bwd(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)

    record((a, b), (out,), bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(x.data * c)
    record((x,), (out,), lambda g: (g * c,))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of same-shape tensors; ties route gradient to `a`."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data
    out = Tensor._wrap(np.where(take_a, a.data, b.data))

    def bwd(g):
        return g * take_a, g * ~take_a

    record((a, b), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError("matmul supports rank-1/rank-2 operands only")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim else 0):
        raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
    out = Tensor._wrap(ad @ bd)

    def bwd(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        return g * bd, g * ad

    record((a, b), (out,), bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")
    out = Tensor._wrap(np.ascontiguousarray(x.data.T))
    record((x,), (out,), lambda g: (g.T,))
    return out


def diag_embed(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError("diag_embed expects a rank-1 tensor")
    out = Tensor._wrap(np.diag(v.data))
    record((v,), (out,), lambda g: (np.diagonal(g).copy(),))
    return out


# ---------------------------------------------------------------------------
# Shape ops


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].data.ndim
    if nd == 0:
        raise ShapeError("concat expects rank >= 1")
    axis = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and p.data.shape[ax] != parts[0].data.shape[ax]:
                raise ShapeError("concat: non-axis dims differ")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    record(tuple(parts), (out,), bwd)
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("stack of zero tensors")
    shape = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != shape:
            raise ShapeError("stack: shape mismatch")
    out = Tensor._wrap(np.stack([p.data for p in parts], axis=axis))

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i].copy() for i in range(len(parts)))

    record(tuple(parts), (out,), bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape} changes size")
    old = x.data.shape
    out = Tensor._wrap(x.data.reshape(shape))
    record((x,), (out,), lambda g: (g.reshape(old),))
    return out


# ---------------------------------------------------------------------------
# Elementwise nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # subgradient at 0 is 0
    out = Tensor._wrap(np.where(mask, x.data, 0.0))
    record((x,), (out,), lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor._wrap(s)
    record((x,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor._wrap(t)
    record((x,), (out,), lambda g: (g * (1.0 - t * t),))
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        bad = int(np.flatnonzero(~np.isfinite(e.ravel()))[0]) if e.ndim else 0
        raise DomainError(f"exp overflow at flat index {bad}")
    out = Tensor._wrap(e)
    record((x,), (out,), lambda g: (g * e,))
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        flat = x.data.ravel() if x.data.ndim else x.data.reshape(1)
        bad = int(np.flatnonzero(flat <= 0.0)[0])
        raise DomainError(f"log domain violation at flat index {bad}")
    out = Tensor._wrap(np.log(x.data))
    xd = x.data
    record((x,), (out,), lambda g: (g / xd,))
    return out


def absval(x: Tensor) -> Tensor:
    sign = np.sign(x.data)  # subgradient at 0 is 0
    out = Tensor._wrap(np.abs(x.data))
    record((x,), (out,), lambda g: (g * sign,))
    return out


# ---------------------------------------------------------------------------
# Reductions (full, fixed left-to-right summation order)


def _seq_sum(arr: np.ndarray) -> np.float64:
    # strict left-to-right accumulation (cumsum prefix sums), no pairwise trees
    flat = arr.ravel()
    if flat.size == 0:
        return np.float64(0.0)
    return np.cumsum(flat, dtype=np.float64)[-1]


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(_seq_sum(x.data)))
    shape = x.data.shape
    record((x,), (out,), lambda g: (np.full(shape, float(g)),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    out = Tensor._wrap(np.asarray(_seq_sum(x.data) / n))
    shape = x.data.shape
    record((x,), (out,), lambda g: (np.full(shape, float(g) / n),))
    return out


# ---------------------------------------------------------------------------
# Fused classification loss


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer targets.

    logits: (B, C) -> returns (B,);  (C,) -> returns scalar.
    """
    ld = logits.data
    squeeze = ld.ndim == 1
    if squeeze:
        ld = ld.reshape(1, -1)
    if ld.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects rank-1 or rank-2 logits")
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (ld.shape[0],):
        raise ShapeError(f"targets shape {t.shape} != batch ({ld.shape[0]},)")
    if np.any(t < 0) or np.any(t >= ld.shape[1]):
        raise DomainError("target class id out of range")

    shifted = ld - ld.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    z = ex.sum(axis=1, keepdims=True)
    p = ex / z
    losses = np.log(z[:, 0]) - shifted[np.arange(ld.shape[0]), t]
    out = Tensor._wrap(losses[0].reshape(()) if squeeze else losses)

    def bwd(g):
        gv = np.atleast_1d(np.asarray(g, dtype=np.float64)).reshape(-1, 1)
        gl = p * gv
        gl[np.arange(ld.shape[0]), t] -= gv[:, 0]
        return (gl[0] if squeeze else gl,)

    record((logits,), (out,), bwd)
    return out
