"""Dense 2-D matrices with a small reverse-mode autodiff tape.

Only the operations the adapter layer and the toy models need are provided.
A matrix produced from inputs that live on a :class:`Tape` is itself recorded
on that tape; matrices without a tape are constants and never receive
gradients.

Broadcasting is deliberately narrow. The second operand of
:func:`broadcast_mul` / :func:`add_broadcast` must have the same shape as the
first, shape ``(rows, 1)`` (repeated across columns), or shape ``(1, 1)``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_precision(name: str) -> None:
    """Switch the run-wide element precision (``"f32"`` or ``"f64"``)."""
    global _default_dtype
    if name not in DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = np.dtype(DTYPES[name])


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _set_dtype(previous)


def _set_dtype(dtype: np.dtype) -> None:
    global _default_dtype
    _default_dtype = dtype


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, value in DTYPES.items():
        if dtype == value:
            return name
    raise ValueError(f"unsupported element type {dtype}")


class DenseMatrix:
    """Immutable 2-D array of floats, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, dtype=None):
        arr = np.array(values, dtype=dtype if dtype is not None else _default_dtype)
        if arr.ndim != 2:
            raise ShapeError(f"DenseMatrix needs 2-D data, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"DenseMatrix needs positive dimensions, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None = None, node: int | None = None) -> DenseMatrix:
        out = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.tape = tape
        out.node = node
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype=None) -> DenseMatrix:
        return cls(np.zeros((rows, cols)), dtype=dtype)

    @classmethod
    def eye(cls, n: int, dtype=None) -> DenseMatrix:
        return cls(np.eye(n), dtype=dtype)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> DenseMatrix:
        return DenseMatrix._wrap(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node}"
        return f"DenseMatrix({self.rows}x{self.cols}, {self.dtype}{tag})"

    def __matmul__(self, other: DenseMatrix) -> DenseMatrix:
        return matmul(self, other)


VJP = Callable[[np.ndarray], tuple]


class Tape:
    """Records differentiable operations in execution order.

    Not thread-safe: one tape per thread of training.
    """

    def __init__(self):
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[VJP | None] = []
        self.params: dict[str, int] = {}
        self.leaf_specs: dict[int, tuple[tuple[int, int], np.dtype]] = {}

    def __len__(self) -> int:
        return len(self.parents)

    def watch(self, m: DenseMatrix, name: str) -> DenseMatrix:
        """Mark ``m`` as a trainable leaf; its gradient is reported under ``name``."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} already watched on this tape")
        node = self._record((), None)
        self.params[name] = node
        self.leaf_specs[node] = (m.shape, m.dtype)
        return DenseMatrix._wrap(m.data, self, node)

    def _record(self, parents: tuple[int | None, ...], vjp: VJP | None) -> int:
        self.parents.append(parents)
        self.vjps.append(vjp)
        return len(self.parents) - 1


def _tape_of(*inputs: DenseMatrix) -> Tape | None:
    tape = None
    for m in inputs:
        if m.tape is not None:
            if tape is not None and m.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = m.tape
    return tape


def _result(arr: np.ndarray, inputs: tuple[DenseMatrix, ...], vjp: VJP) -> DenseMatrix:
    tape = _tape_of(*inputs)
    if tape is None:
        return DenseMatrix._wrap(arr)
    parents = tuple(m.node if m.tape is tape else None for m in inputs)
    return DenseMatrix._wrap(arr, tape, tape._record(parents, vjp))


def backward(tape: Tape, loss: DenseMatrix) -> dict[str, DenseMatrix]:
    """Gradients of a scalar ``loss`` for every watched parameter on ``tape``.

    Nodes are visited in exact reverse execution order; contributions to a
    node used several times are summed in that order.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones((1, 1), dtype=loss.dtype)}
    leaf_grads: dict[int, np.ndarray] = {}
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        vjp = tape.vjps[i]
        if vjp is None:
            leaf_grads[i] = g
            continue
        for parent, pg in zip(tape.parents[i], vjp(g)):
            if parent is None or pg is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    out = {}
    for name, node in tape.params.items():
        g = leaf_grads.get(node)
        if g is None:
            shape, dtype = tape.leaf_specs[node]
            g = np.zeros(shape, dtype=dtype)
        out[name] = DenseMatrix._wrap(g)
    return out


# -- broadcasting helpers --------------------------------------------------


def _check_broadcast(a: DenseMatrix, b: DenseMatrix, op: str) -> None:
    if b.shape == a.shape or b.shape == (a.rows, 1) or b.shape == (1, 1):
        return
    raise ShapeError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True)
    return g.sum(axis=1, keepdims=True)


# -- operations -------------------------------------------------------------


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.data, b.data

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), vjp)


def broadcast_mul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    _check_broadcast(a, b, "broadcast_mul")
    av, bv = a.data, b.data

    def vjp(g):
        return g * bv, _reduce_to(g * av, bv.shape)

    return _result(av * bv, (a, b), vjp)


def add_broadcast(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    _check_broadcast(a, b, "add_broadcast")
    shape = b.shape

    def vjp(g):
        return g, _reduce_to(g, shape)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    _check_broadcast(a, b, "sub")
    shape = b.shape

    def vjp(g):
        return g, -_reduce_to(g, shape)

    return _result(a.data - b.data, (a, b), vjp)


def scale(a: DenseMatrix, factor: float) -> DenseMatrix:
    """Multiply by a constant Python scalar."""
    f = a.data.dtype.type(factor)

    def vjp(g):
        return (g * f,)

    return _result(a.data * f, (a,), vjp)


def transpose(a: DenseMatrix) -> DenseMatrix:
    def vjp(g):
        return (g.T,)

    return _result(a.data.T, (a,), vjp)


def take(a: DenseMatrix, rows: slice = slice(None), cols: slice = slice(None)) -> DenseMatrix:
    """Contiguous sub-block ``a[rows, cols]``."""
    out = a.data[rows, cols]
    if out.size == 0:
        raise ShapeError(f"take: empty slice of {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, cols] = g
        return (full,)

    return _result(out, (a,), vjp)


def relu(a: DenseMatrix) -> DenseMatrix:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: DenseMatrix) -> DenseMatrix:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    t = np.tanh(c * (x + k * x**3))
    out = half * x * (1 + t)

    def vjp(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * dt),)

    return _result(out, (a,), vjp)


def softmax_rows(a: DenseMatrix) -> DenseMatrix:
    x = a.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (a,), vjp)


def sum_all(a: DenseMatrix) -> DenseMatrix:
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(keepdims=True), (a,), vjp)


def mean_all(a: DenseMatrix) -> DenseMatrix:
    shape = a.shape
    n = a.data.size

    def vjp(g):
        return (np.full(shape, g[0, 0] / n, dtype=g.dtype),)

    return _result(a.data.mean(keepdims=True), (a,), vjp)


def mse_loss(pred: DenseMatrix, target: DenseMatrix) -> DenseMatrix:
    """Mean over all elements of ``(pred - target)**2``; target is a constant."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        return (g[0, 0] * (2.0 / n) * diff, None)

    return _result(np.mean(diff * diff, keepdims=True), (pred, target.detach()), vjp)


def softmax_cross_entropy(logits: DenseMatrix, labels: np.ndarray) -> DenseMatrix:
    """Mean cross-entropy; ``logits`` is classes x samples, ``labels`` integer per column."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    k, n = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} columns but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    x = logits.data
    shifted = x - x.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logsum
    cols = np.arange(n)
    loss = -logp[labels, cols].mean(keepdims=True).reshape(1, 1)

    def vjp(g):
        p = np.exp(logp)
        p[labels, cols] -= 1
        return (p * (g[0, 0] / n),)

    return _result(loss.astype(x.dtype), (logits,), vjp)


def finite_difference_grad(f: Callable[[DenseMatrix], float], at: DenseMatrix, step: float = 1e-6) -> DenseMatrix:
    """Central-difference gradient of a scalar function of one matrix."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(at.data, dtype=at.dtype)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + step
        hi = float(f(DenseMatrix(base, dtype=at.dtype)))
        base[idx] = orig - step
        lo = float(f(DenseMatrix(base, dtype=at.dtype)))
        base[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return DenseMatrix._wrap(grad)
