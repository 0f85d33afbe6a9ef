"""Dense float64 tensors with a small reverse-mode autodiff tape.

Operations build :class:`Tensor` values from numpy arrays. When a
:class:`Tape` is active and at least one input requires a gradient, the op
appends a node to the tape; :meth:`Tape.backward` then walks the tape in
reverse creation order, which is a valid reverse topological order because
nodes are only ever appended after their inputs exist.

Outside a tape every op is a plain numpy computation, which is what
no-gradient evaluation (EMA teacher forward, landscape grids) relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "matmul",
    "linear",
    "softmax",
    "layer_norm",
    "gelu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take_rows",
    "concat",
    "expand",
    "getitem",
    "log_softmax",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable wrapper around a float64 numpy array.

    ``name`` is set on leaves that stand for named parameters so that the
    tape can report gradients keyed by parameter name.
    """

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of the ops of one forward pass.

    Use as a context manager::

        with Tape() as tape:
            leaves = tape.watch(params)
            loss = model_loss(leaves, ...)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, params: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Wrap parameters as leaf tensors; only ``names`` (default all) require grad."""
        tracked = set(params) if names is None else set(names)
        out = {}
        for key, value in params.items():
            leaf = Tensor(value, requires_grad=key in tracked, name=key)
            if leaf.requires_grad:
                self.leaves[key] = leaf
            out[key] = leaf
        return out

    def _record(self, op, inputs, output, backward) -> Tensor:
        output.requires_grad = True
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward))
        return output

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every watched leaf.

        Watched leaves that never reached the loss get an all-zero gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        leaf_grads = {name: np.zeros_like(leaf.data) for name, leaf in self.leaves.items()}
        leaf_ids = {id(leaf): name for name, leaf in self.leaves.items()}

        if id(loss) in leaf_ids:
            leaf_grads[leaf_ids[id(loss)]] += np.ones_like(loss.data)
            return leaf_grads
        if loss._node is None or loss._node >= len(self.nodes) or self.nodes[loss._node].output is not loss:
            return leaf_grads

        grads[loss._node] = np.ones_like(loss.data)
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is not None:
                    if inp._node in grads:
                        grads[inp._node] = grads[inp._node] + gi
                    else:
                        grads[inp._node] = gi
                elif id(inp) in leaf_ids:
                    leaf_grads[leaf_ids[id(inp)]] += gi
        return leaf_grads


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]._record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``; ``ndtr`` is the erf form of the normal CDF."""
    x = _as_tensor(x)
    cdf = ndtr(x.data)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", (x,), x.data * cdf, backward)


# -- reductions -------------------------------------------------------------

def sum(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, backward)


def mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", (x,), out, backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    # one 2-D GEMM is markedly faster than a batched 3-D matmul here
    out = (x.data.reshape(-1, x.shape[-1]) @ weight.data.T).reshape(x.shape[:-1] + (weight.shape[0],))
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("linear", inputs, out, backward)


# -- normalisation ----------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the affine gain and shift."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gx_hat = g * weight.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, weight, bias), out, backward)


# -- shape plumbing ---------------------------------------------------------

def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)

    basic = all(isinstance(i, (int, slice)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (x,), x.data[index], backward)


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, k] = x[b, idx[b, k]]`` for x of shape (B, N, D)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_rows: data {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _emit("take_rows", (x,), out, backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[p.shape for p in parts]} along axis {axis}") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", tuple(parts), out, backward)


def expand(x, shape: tuple[int, ...]) -> Tensor:
    """Broadcast ``x`` to ``shape``; gradient sums back over broadcast axes."""
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("expand", (x,), out, lambda g: (_unbroadcast(g, x.shape),))
