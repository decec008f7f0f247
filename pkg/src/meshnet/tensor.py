"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor.
``Tensor.backward`` walks the recorded graph once in reverse topological
order and then releases it, so a second backward on the same loss fails.

Data lives in numpy arrays.  The default dtype is float32; wrap model
construction in ``precision(np.float64)`` for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = bool(os.environ.get("MESHNET_DEBUG"))
_branch_log: list | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check that runs after every op."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the discrete decisions (relu masks, argmax picks) of a forward.

    Two forwards whose logs differ crossed a kink of a piecewise-linear op;
    finite differences across such a kink are meaningless.
    """
    global _branch_log
    old = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = old


def _log_branch(op: str, decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append((op, decision.shape, decision.tobytes()))


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = ""
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis):
        return reduce_mean(self, axis)

    def max(self, axis):
        return reduce_max(self, axis)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        # Python scalars follow the default dtype; a 0-d float64 array would
        # otherwise promote float32 operands.
        return Tensor(np.asarray(x, dtype=_default_dtype))
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype.kind == "f" else _default_dtype
    return Tensor(arr, dtype=dtype)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent, in order.
    """
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    out._op = op
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    if _debug and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """``a`` of shape (..., K) times ``b`` of shape (K, N)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make_op(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expects a matrix")
    return make_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return make_op(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(out, tensors, backward, "concat")


def gather(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Batched take along ``axis``.

    ``index`` has shape ``a.shape[:axis] + tail``; the result has shape
    ``a.shape[:axis] + tail + a.shape[axis+1:]`` with
    ``out[b..., t...] = a[b..., index[b..., t...]]``.
    """
    index = np.asarray(index)
    if axis < 0:
        axis += a.ndim
    lead = a.shape[:axis]
    if index.shape[:axis] != lead:
        raise ShapeError("gather", a.shape, index.shape, detail=f"axis={axis}")
    n = a.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather: index out of range [0, {n})")
    tail = index.shape[axis:]
    rest = a.shape[axis + 1:]
    nlead = int(np.prod(lead, dtype=np.int64))
    a2 = a.data.reshape((nlead, n) + rest)
    idx2 = index.reshape(nlead, -1)
    rows = np.arange(nlead)[:, None]
    out = a2[rows, idx2].reshape(lead + tail + rest)

    def backward(g):
        ga = np.zeros_like(a2)
        np.add.at(ga, (rows, idx2), g.reshape((nlead, idx2.shape[1]) + rest))
        return (ga.reshape(a.shape),)

    return make_op(out, (a,), backward, "gather")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_op(np.asarray(out), (a,), backward, "reduce_sum")


def reduce_mean(a: Tensor, axis: int) -> Tensor:
    """Mean along one axis, independent of the order of elements on it.

    Values are sorted along ``axis`` before being summed, so any permutation
    of the reduced axis gives a bit-identical result.
    """
    if axis < 0:
        axis += a.ndim
    n = a.shape[axis]
    s = np.sort(a.data, axis=axis)
    acc = np.take(s, 0, axis=axis).copy()
    for k in range(1, n):
        acc += np.take(s, k, axis=axis)
    out = acc / a.data.dtype.type(n)

    def backward(g):
        ge = np.expand_dims(g / g.dtype.type(n), axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return make_op(out, (a,), backward, "reduce_mean")


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal element."""
    if axis < 0:
        axis += a.ndim
    arg = np.argmax(a.data, axis=axis)
    _log_branch("reduce_max", arg)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return make_op(out, (a,), backward, "reduce_max")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_branch("relu", np.packbits(mask))
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def sin(a: Tensor) -> Tensor:
    return make_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return make_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    scale = a.dtype.type(1.0 / (1.0 - p))
    mask = (rng.random(a.shape) >= p).astype(a.dtype) * scale
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize the last axis over all leading axes.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError("batch_norm", x.shape, weight.shape, bias.shape)
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if n < 1:
        raise ShapeError("batch_norm", x.shape, detail="empty batch")
    if training:
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x2 - mu) * inv_std
    out = (xhat * weight.data + bias.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        gw = (g2 * xhat).sum(axis=0)
        gb = g2.sum(axis=0)
        dxhat = g2 * weight.data
        if training:
            gx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            gx = dxhat * inv_std
        return gx.reshape(x.shape), gw, gb

    return make_op(out, (x, weight, bias), backward, "batch_norm")
