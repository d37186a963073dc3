"""Minimal dense tensors with reverse-mode differentiation on top of numpy.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them. :func:`backward` walks
the graph once in reverse topological order.

Binary ops only broadcast over leading batch dimensions: the shorter
operand's shape must be a suffix of the longer one's.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
DEBUG = False
NEG_INF = -np.inf


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are incompatible (only leading-batch broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("add", a, b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("sub", a, b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)

        def bw_scalar(g):
            _acc(a, g * c)

        return _node(a.data * c, (a,), bw_scalar, "scale")
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        _acc(a, g * sign)

    return _node(np.abs(a.data), (a,), bw, "abs")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _node(out, (a,), bw, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner))

    return _node(out, (a,), bw, "gelu")


# ----------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2:
        # shared weight: fold batch dims into rows
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw_w(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _acc(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _acc(b, a2.T @ g2)

        return _node(out, (a, b), bw_w, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from e

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _node(out, (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} mismatch off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _node(np.array(out, copy=True), (a,), bw, "slice")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape) / n)

    return _node(out, (a,), bw, "mean")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _acc(table, full)

    return _node(table.data[ids], (table,), bw, "embedding")


# ----------------------------------------------------------------------------
# normalisation / attention


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(a.data, axis)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), bw, "softmax")


def layernorm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
              axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis``; optional affine (weight, bias) over the last axis."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    n = x.shape[axis]
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        if bias is not None and bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.shape))
        if weight is not None:
            if weight.requires_grad:
                _acc(weight, _unbroadcast(g * xhat, weight.shape))
            g = g * weight.data
        if x.requires_grad:
            gx = inv / n * (n * g - g.sum(axis=axis, keepdims=True)
                            - xhat * (g * xhat).sum(axis=axis, keepdims=True))
            _acc(x, gx)

    return _node(out, parents, bw, "layernorm")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v over the last two axes.

    ``mask`` is an additive constant broadcastable to (..., Lq, Lk); use
    ``NEG_INF`` to hide keys. Every query must keep at least one key.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] \
            or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    p = _softmax_np(scores, -1)
    out = p @ v.data

    def bw(g):
        if v.requires_grad:
            _acc(v, np.swapaxes(p, -1, -2) @ g)
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            _acc(q, gs @ k.data)
        if k.requires_grad:
            _acc(k, np.swapaxes(gs, -1, -2) @ q.data)

    return _node(out, (q, k, v), bw, "attention")


# ----------------------------------------------------------------------------
# backward


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Intermediate gradients are dropped afterwards and, unless
    ``retain_graph``, the recorded graph is released.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None
            if not retain_graph:
                node._backward = None
                node._parents = ()


def no_leaf_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# finite-difference checking


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    seed: int = 0,
    h: float = 1e-5,
    tol: float | None = None,
    max_elements: int | None = None,
    order: int = 2,
    fd_dtype=np.float64,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``inputs`` holds arrays or shapes (shapes are filled with standard normal
    draws from ``seed``). ``fn`` maps Tensors to a scalar Tensor. With
    ``max_elements`` only that many randomly chosen coordinates per input are
    perturbed. ``order=4`` uses the five-point stencil, which matters when
    gradients are small enough for truncation error to dominate. ``fd_dtype``
    sets the precision of the difference quotient only (``np.longdouble``
    lowers its rounding floor for gradients near 1e-8); analytic gradients
    are always 64-bit. When ``tol`` is given, an AssertionError is raised above it.
    Runs in 64-bit precision.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        arrays = []
        for x in inputs:
            if isinstance(x, np.ndarray):
                arrays.append(np.array(x, dtype=fd_dtype, copy=True))
            else:
                arrays.append(rng.standard_normal(tuple(x)).astype(fd_dtype))
        leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        backward(out)
        analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

        def evaluate():
            with precision(fd_dtype):
                return fn(*[Tensor(a) for a in arrays]).data.reshape(())[()]

        worst = 0.0
        for a, ga in zip(arrays, analytic):
            flat = a.reshape(-1)
            coords = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                coords = rng.choice(flat.size, size=max_elements, replace=False)
            gflat = ga.reshape(-1)
            for i in coords:
                orig = flat[i]

                def at(d):
                    flat[i] = orig + d
                    return evaluate()

                if order == 4:
                    num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
                else:
                    num = (at(h) - at(-h)) / (2 * h)
                flat[i] = orig
                worst = max(worst, float(relative_error(np.longdouble(gflat[i]), np.longdouble(num))))
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tol:.1e}")
    return worst
