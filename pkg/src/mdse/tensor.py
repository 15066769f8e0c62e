"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When grad recording is enabled and at
least one input requires a gradient, the output carries a reference to its
inputs and a local backward rule; :func:`backward` topologically orders that
graph (the tape) and runs the rules once each, in reverse.

Broadcasting is deliberately narrow: scalar-with-tensor, and bias-add of a
vector along the last axis. Anything else raises :class:`ShapeError`; the
explicit :func:`expand` op covers the remaining cases with an auditable rule.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class BackwardError(RuntimeError):
    """backward() called on something that is not a taped scalar."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a Python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Tape for ``root``: every node appears after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between steps);
    intermediate gradients are recomputed from scratch each call.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise BackwardError(f"backward() requires a scalar tensor, got shape {shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        if g is None:
            continue
        local = node._backward(g)
        for parent, pg in zip(node._parents, local):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "bias_a"
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce(g: np.ndarray, kind: str, side: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"scalar_{side}":
        return np.asarray(g.sum()).reshape(shape)
    if kind == f"bias_{side}":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    kind = _broadcast_kind(a.data, b.data)

    def bw(g):
        return _reduce(g, kind, "a", a.shape), _reduce(g, kind, "b", b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    kind = _broadcast_kind(a.data, b.data)

    def bw(g):
        return _reduce(g, kind, "a", a.shape), _reduce(-g, kind, "b", b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce(g * bd, kind, "a", a.shape) if a.requires_grad else None
        gb = _reduce(g * ad, kind, "b", b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (e.g. an attention mask) with numpy broadcasting."""
    const = np.asarray(const, dtype=DTYPE)
    out = x.data + const
    if out.shape != x.shape:
        raise ShapeError(f"constant of shape {const.shape} would change shape {x.shape}")
    return _make(out, (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable constant array of the same shape (dropout masks)."""
    const = np.asarray(const, dtype=DTYPE)
    if const.shape != x.shape:
        raise ShapeError(f"constant shape {const.shape} != tensor shape {x.shape}")
    return _make(x.data * const, (x,), lambda g: (g * const,), "mul_const")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along ``axis``; the gradient is routed to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), bw, "max")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_wrap(t) for t in xs]
    ref = xs[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes so it takes ``shape``; trailing dims must match."""
    shape = tuple(shape)
    if shape[len(shape) - x.ndim:] != x.shape:
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    lead = tuple(range(len(shape) - x.ndim))
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=lead),), "expand")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out, dtype=DTYPE), (x,), bw, "index")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]} ({weight.shape})")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------- normalisation / probabilities


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        n = xd.shape[-1]
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        ggam = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0) if gamma.requires_grad else None
        gbet = g.reshape(-1, xd.shape[-1]).sum(axis=0) if beta.requires_grad else None
        return gx, ggam, gbet

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each last-axis vector to unit L2 norm. Zero vectors raise."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("cannot L2-normalise a zero-norm vector")
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis of equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def take_last(x: Tensor, idx) -> Tensor:
    """Gather ``x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"take_last index shape {idx.shape} != {x.shape[:-1]}")
    ix = idx[..., None]
    out = np.take_along_axis(x.data, ix, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ix, g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), bw, "take_last")


def cross_entropy(logits: Tensor, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(``logits``).

    ``weights`` (same shape as targets) zeroes out e.g. padding positions.
    ``reduction`` is ``"mean"`` (over weighted positions), ``"sum"`` or ``"none"``.
    """
    nll = scale(take_last(log_softmax(logits), targets), -1.0)
    if weights is not None:
        nll = mul_const(nll, np.asarray(weights, dtype=DTYPE))
    if reduction == "none":
        return nll
    total = sum(nll)
    if reduction == "sum":
        return total
    denom = float(np.asarray(weights).sum()) if weights is not None else float(nll.size)
    return scale(total, 1.0 / denom)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad**2) for p in params if p.grad is not None])))
