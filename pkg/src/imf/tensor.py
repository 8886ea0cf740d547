"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient. A tape is used once per training step::

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]   # -> 2 * x.data
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "TapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "leaky_relu",
    "elu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "abs_",
    "elementwise",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "segment_sum",
    "einsum",
    "normalize_rows",
    "cosine_rows",
    "cosine_matrix",
    "AdamState",
    "Adam",
    "adam_step",
    "parameters",
]

EPS = 1e-12

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation."""


class TapeError(RuntimeError):
    """Misuse of a tape (non-scalar loss, repeated backward, missing record)."""


class Tensor:
    """Immutable dense array of float64 values."""

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs are fresh arrays; skip the defensive copy
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.id = next(_ids)
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients:
    """Gradient buffers keyed by tensor identity."""

    def __init__(self, buffers: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._buffers = buffers
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.id in self._buffers:
            return self._buffers[t.id]
        if t.requires_grad:
            return np.zeros_like(t.data)
        raise KeyError(f"{t!r} does not require a gradient")

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._buffers

    def get(self, t: Tensor, default=None):
        return self._buffers.get(t.id, default)

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class Tape:
    """Records differentiable operations for a single backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self._done:
            raise TapeError("tape already consumed by backward(); start a new tape")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> Gradients:
        if self._done:
            raise TapeError("backward() called twice on the same tape")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor requiring a gradient")
        if not any(node.out is loss for node in self.nodes):
            raise TapeError("loss was not produced on this tape")
        self._done = True

        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {node.out.id for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(node.out.id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if gi.shape != inp.shape:
                    raise TapeError(f"gradient shape {gi.shape} != value shape {inp.shape}")
                grads[inp.id] = grads[inp.id] + gi if inp.id in grads else gi
                if inp.id not in produced:
                    leaves[inp.id] = inp
        return Gradients({k: grads[k] for k in leaves}, leaves)


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor._wrap(data, tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# binary arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# unary ops ------------------------------------------------------------------


def neg(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of clamping it to 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = constant(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = constant(a)
    pos = a.data > 0
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, alpha * em1)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, alpha * (em1 + 1.0)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = constant(a)
    out = _softplus(a.data)
    s = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * s,))


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def abs_(a) -> Tensor:
    a = constant(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "abs": abs_,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name, e.g. ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*args)


# reductions and shape ops ---------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in the backward pass."""
    a = constant(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for leading dimension {a.shape[0]}")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    a = constant(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {segments.shape[0]} segment ids for {a.shape[0]} rows")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return _make(out, (a,), lambda g: (g[segments],))


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` restricted to explicit output subscripts.

    Each index of an operand must appear in the output or in another operand,
    and no operand may repeat an index (no traces/diagonals).
    """
    operands = tuple(constant(t) for t in operands)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise NotImplementedError("einsum: repeated index within one operand")
        others = out_sub + "".join(x for j, x in enumerate(in_subs) if j != i)
        if any(c not in others for c in s):
            raise NotImplementedError(f"einsum: index in {s!r} is summed away locally")
    try:
        out = np.einsum(subscripts, *(t.data for t in operands), optimize=True)
    except ValueError as err:
        raise ShapeError(f"einsum {subscripts}: {err}") from None

    def backward(g):
        grads = []
        for i, s in enumerate(in_subs):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            rest = [x for j, x in enumerate(in_subs) if j != i]
            expr = ",".join([out_sub] + rest) + "->" + s
            rest_data = [operands[j].data for j in range(len(operands)) if j != i]
            grads.append(np.einsum(expr, g, *rest_data, optimize=True))
        return grads

    return _make(out, operands, backward)


# similarity -----------------------------------------------------------------


def normalize_rows(a, eps: float = EPS) -> Tensor:
    """Divide each row by ``max(norm, eps)``."""
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    clipped = norms > eps
    denom = np.where(clipped, norms, eps)
    out = a.data / denom

    def backward(g):
        # only rows above the guard depend on their own norm
        proj = (g * out).sum(axis=1, keepdims=True)
        return ((g - np.where(clipped, out * proj, 0.0)) / denom,)

    return _make(out, (a,), backward)


def cosine_rows(a, b, eps: float = EPS) -> Tensor:
    """Row-wise cosine similarity of ``a`` (n x d) with ``b`` (n x d or 1 x d)."""
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or b.shape[0] not in (1, a.shape[0]):
        raise ShapeError(f"cosine_rows: incompatible shapes {a.shape} and {b.shape}")
    return sum_(normalize_rows(a, eps) * normalize_rows(b, eps), axis=1)


def cosine_matrix(a, b, eps: float = EPS) -> Tensor:
    """All-pairs cosine similarity, ``out[i, j] = cos(a[i], b[j])``."""
    return matmul(normalize_rows(a, eps), transpose(normalize_rows(b, eps)))


# optimisation ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, Tensor]:
    """One bias-corrected Adam update. Returns fresh parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = Tensor(new, requires_grad=p.requires_grad, name=name)
    return updated


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return adam_step(params, grads, self.state)


def parameters(names: Iterable[str], arrays: Iterable[np.ndarray]) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=True, name=n) for n, a in zip(names, arrays)}
