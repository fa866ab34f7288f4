"""Dense float64 tensors with reverse-mode automatic differentiation.

The op surface is deliberately small: elementwise arithmetic with
trailing-axis/broadcast affine support, 2-D matmul, einsum for the batched
attention contractions, axis reductions, gather/concat/narrow for assembling
feature batches, numerically stable (masked) softmax, layer norm, and
inverted dropout.  Everything is float64 and single-threaded: one Tape per
training step, recorded in topological order and consumed exactly once.

Forward values can optionally be checked for NaN/Inf after every op via
``set_debug_checks(True)`` (the test suite enables this).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "set_debug_checks",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "absolute",
    "tanh",
    "sigmoid",
    "softplus",
    "silu",
    "sin",
    "cos",
    "matmul",
    "einsum",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "stack",
    "narrow",
    "gather",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "masked_softmax",
    "logsumexp",
    "layer_norm",
    "dropout",
    "lift_unary",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf assertions after every forward op (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A contiguous float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of one forward pass; backward consumes it once."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every taped tensor."""
        if self._spent:
            raise RuntimeError("tape already consumed; build a new tape per step")
        if loss.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {loss.data.shape}"
            )
        self._spent = True
        loss._accumulate(np.ones((), dtype=np.float64))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _finish(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    tape = _current_tape()
    if tape is not None and requires:
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _finish(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _finish(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _finish(data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _finish(data, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise unary ops

def neg(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(-g)

    return _finish(-t.data, (t,), back)


def exp(t: Tensor) -> Tensor:
    out_data = np.exp(t.data)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * out_data)

    return _finish(out_data, (t,), back)


def log(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(g / t.data)

    return _finish(np.log(t.data), (t,), back)


def sqrt(t: Tensor) -> Tensor:
    out_data = np.sqrt(t.data)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * 0.5 / out_data)

    return _finish(out_data, (t,), back)


def square(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(g * 2.0 * t.data)

    return _finish(t.data * t.data, (t,), back)


def absolute(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(g * np.sign(t.data))

    return _finish(np.abs(t.data), (t,), back)


def tanh(t: Tensor) -> Tensor:
    out_data = np.tanh(t.data)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * (1.0 - out_data * out_data))

    return _finish(out_data, (t,), back)


def sigmoid(t: Tensor) -> Tensor:
    out_data = _sigmoid(t.data)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * out_data * (1.0 - out_data))

    return _finish(out_data, (t,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(t: Tensor) -> Tensor:
    x = t.data
    out_data = np.logaddexp(0.0, x)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * _sigmoid(x))

    return _finish(out_data, (t,), back)


def silu(t: Tensor) -> Tensor:
    s = _sigmoid(t.data)

    def back(g):
        if t.requires_grad:
            t._accumulate(g * s * (1.0 + t.data * (1.0 - s)))

    return _finish(t.data * s, (t,), back)


def sin(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(g * np.cos(t.data))

    return _finish(np.sin(t.data), (t,), back)


def cos(t: Tensor) -> Tensor:
    def back(g):
        if t.requires_grad:
            t._accumulate(-g * np.sin(t.data))

    return _finish(np.cos(t.data), (t,), back)


def lift_unary(
    t: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    derivative: Callable[[np.ndarray], np.ndarray],
) -> Tensor:
    """Build an elementwise op from plain numpy forward/derivative functions."""
    x = t.data

    def back(g):
        if t.requires_grad:
            t._accumulate(g * derivative(x))

    return _finish(forward(x), (t,), back)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k] x [k,n], got {a.shape} x {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _finish(data, (a, b), back)


def einsum(equation: str, *tensors: Tensor) -> Tensor:
    """Autodiff einsum for contractions whose input indices all appear
    elsewhere (no pure reductions; use reduce_sum for those)."""
    lhs, out_spec = equation.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != len(tensors):
        raise ShapeError(f"einsum '{equation}' expects {len(in_specs)} operands")
    datas = [t.data for t in tensors]
    data = np.einsum(equation, *datas)

    def back(g):
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                continue
            other_specs = [out_spec] + [s for j, s in enumerate(in_specs) if j != i]
            other_datas = [g] + [d for j, d in enumerate(datas) if j != i]
            if not set(in_specs[i]) <= set("".join(other_specs)):
                raise ShapeError(
                    f"einsum '{equation}' not differentiable w.r.t. operand {i}"
                )
            eq = ",".join(other_specs) + "->" + in_specs[i]
            t._accumulate(np.einsum(eq, *other_datas))

    return _finish(data, tensors, back)


# ---------------------------------------------------------------------------
# shape ops

def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = t.data.shape

    def back(g):
        if t.requires_grad:
            t._accumulate(g.reshape(orig))

    return _finish(t.data.reshape(shape), (t,), back)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def back(g):
        if t.requires_grad:
            t._accumulate(g.transpose(inv))

    return _finish(np.ascontiguousarray(t.data.transpose(axes)), (t,), back)


def broadcast_to(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = t.data.shape

    def back(g):
        if t.requires_grad:
            t._accumulate(_unbroadcast(g, orig))

    return _finish(np.broadcast_to(t.data, shape).copy(), (t,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _finish(data, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _finish(data, tensors, back)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[idx] = g
            t._accumulate(full)

    return _finish(np.ascontiguousarray(t.data[idx]), (t,), back)


def gather(t: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis 0; index may have any shape of integers."""
    index = np.asarray(index)
    data = t.data[index]

    def back(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, index, g)
            t._accumulate(full)

    return _finish(data, (t,), back)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not t.requires_grad:
            return
        if axis is None:
            t._accumulate(np.broadcast_to(g, t.data.shape).copy())
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % t.data.ndim for a in axes)
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        t._accumulate(np.broadcast_to(gg, t.data.shape).copy())

    return _finish(data, (t,), back)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = t.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([t.data.shape[a] for a in axes]))
    return mul(reduce_sum(t, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# normalization / attention kernels

def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if t.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            t._accumulate(out_data * (g - inner))

    return _finish(out_data, (t,), back)


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over `axis` restricted to entries where mask is True.

    Rows with no valid entry produce all-zero weights, so downstream
    attention reduces to the residual path for empty key sets.
    """
    if scores.data.shape[axis] == 0:
        def back_empty(g):
            if scores.requires_grad:
                scores._accumulate(g)

        return _finish(scores.data.copy(), (scores,), back_empty)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    neg = np.where(m, scores.data, -np.inf)
    row_max = neg.max(axis=axis, keepdims=True)
    empty = ~np.isfinite(row_max)
    row_max = np.where(empty, 0.0, row_max)
    e = np.exp(np.where(m, scores.data - row_max, -np.inf))
    e = np.where(m, e, 0.0)
    z = e.sum(axis=axis, keepdims=True)
    z_safe = np.where(z == 0.0, 1.0, z)
    out_data = e / z_safe

    def back(g):
        if scores.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            scores._accumulate(out_data * (g - inner))

    return _finish(out_data, (scores,), back)


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = t.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(t, Tensor(m))
    s = log(reduce_sum(exp(shifted), axis=axis, keepdims=True))
    out = add(s, Tensor(m))
    if not keepdims:
        new_shape = list(out.shape)
        del new_shape[axis if axis >= 0 else out.ndim + axis]
        out = reshape(out, new_shape)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def back(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            t1 = gx.mean(axis=-1, keepdims=True)
            t2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - t1 - xhat * t2) * inv)

    return _finish(out_data, (x, gain, bias), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _finish(x.data * keep, (x,), back)
