"""Dense-tensor reverse-mode automatic differentiation.

A :class:`Graph` is a tape: every primitive is evaluated eagerly when it is
appended, and :meth:`Graph.backprop` walks the tape backwards in node-index
order. Node values are plain numpy arrays (read-only once recorded).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import simplex


class Op(str, enum.Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SCALE = "multiply-by-scalar"
    CONCAT = "concat"
    SLICE = "slice"
    EMBEDDING = "embedding-lookup"
    LAYER_NORM = "layer-norm"
    GELU = "gelu"
    RELU = "relu"
    SOFTMAX = "softmax"
    LOG = "log"
    MEAN = "mean"
    SUM = "sum"
    SQUARED_ERROR = "squared-error"
    CROSS_ENTROPY = "cross-entropy-with-logits"
    GRAD_REVERSE = "grad-reverse"
    SPARSEMAX = "sparsemax"
    SPARSEMAX_LOSS = "sparsemax-loss"


class ShapeError(ValueError):
    """Parent shapes are invalid for the requested primitive."""

    def __init__(self, op: Op | str, shapes, detail: str = ""):
        self.op = Op(op).value if isinstance(op, Op) else str(op)
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{self.op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ValueError):
    pass


@dataclass
class Node:
    op: Op
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = True
    cache: Any = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


_GELU_C = math.sqrt(2.0 / math.pi)


class Graph:
    """Recorded computation with eager forward values.

    ``dtype`` defaults to float32; the gradient-check harness rebuilds graphs
    in float64 so central differences are not swamped by rounding.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def shape(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].value.shape

    # -- leaves -------------------------------------------------------------

    def _leaf(self, value, name, requires_grad) -> int:
        arr = np.array(value, dtype=self.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"leaf {name or len(self.nodes)}: non-finite value")
        arr.flags.writeable = False
        self.nodes.append(Node(Op.LEAF, (), arr, name=name, requires_grad=requires_grad))
        return len(self.nodes) - 1

    def param(self, name: str, value) -> int:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        idx = self._leaf(value, name, True)
        self.params[name] = idx
        return idx

    def constant(self, value) -> int:
        return self._leaf(value, None, False)

    # -- primitives ---------------------------------------------------------

    def apply(self, kind: Op | str, parents, **attrs) -> int:
        kind = Op(kind)
        if kind is Op.LEAF:
            raise ValueError("leaves are created with param() or constant()")
        parents = tuple(int(p) for p in parents)
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise IndexError(f"{kind.value}: unknown parent node {p}")
        vals = [self.nodes[p].value for p in parents]
        value, cache = _FORWARD[kind](vals, attrs)
        value = np.asarray(value, dtype=self.dtype)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{kind.value}: produced non-finite output from inputs {[v.shape for v in vals]}")
        value.flags.writeable = False
        requires_grad = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(Node(kind, parents, value, attrs, requires_grad=requires_grad, cache=cache))
        return len(self.nodes) - 1

    def matmul(self, a, b, transpose_b=False):
        return self.apply(Op.MATMUL, (a, b), transpose_b=transpose_b)

    def add(self, a, b):
        return self.apply(Op.ADD, (a, b))

    def scale(self, x, c):
        return self.apply(Op.SCALE, (x,), scalar=float(c))

    def concat(self, xs, axis=-1):
        return self.apply(Op.CONCAT, xs, axis=axis)

    def slice(self, x, axis, start, stop, squeeze=False):
        return self.apply(Op.SLICE, (x,), axis=axis, start=start, stop=stop, squeeze=squeeze)

    def embedding(self, table, ids):
        return self.apply(Op.EMBEDDING, (table,), ids=np.asarray(ids))

    def layer_norm(self, x, gain, bias, eps=1e-5):
        return self.apply(Op.LAYER_NORM, (x, gain, bias), eps=eps)

    def gelu(self, x):
        return self.apply(Op.GELU, (x,))

    def relu(self, x):
        return self.apply(Op.RELU, (x,))

    def softmax(self, x, mask=None):
        return self.apply(Op.SOFTMAX, (x,), mask=mask)

    def log(self, x):
        return self.apply(Op.LOG, (x,))

    def mean(self, x):
        return self.apply(Op.MEAN, (x,))

    def sum(self, x):
        return self.apply(Op.SUM, (x,))

    def squared_error(self, pred, target):
        return self.apply(Op.SQUARED_ERROR, (pred, target))

    def cross_entropy(self, logits, targets):
        """Mean cross-entropy; integer targets (``-1`` = ignored) or row distributions."""
        return self.apply(Op.CROSS_ENTROPY, (logits,), targets=np.asarray(targets))

    def grad_reverse(self, x, lam):
        return grad_reverse(self, x, lam)

    def sparsemax(self, x):
        return self.apply(Op.SPARSEMAX, (x,))

    def sparsemax_loss(self, scores, gold):
        return self.apply(Op.SPARSEMAX_LOSS, (scores,), gold=np.asarray(gold))

    # -- reverse pass -------------------------------------------------------

    def backprop(self, loss: int) -> dict[int, np.ndarray]:
        return backprop(self, loss)

    def param_grads(self, table: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter-name view of a gradient table (zeros for unreached params)."""
        out = {}
        for name, idx in self.params.items():
            g = table.get(idx)
            out[name] = g if g is not None else np.zeros_like(self.nodes[idx].value)
        return out


def apply_primitive(graph: Graph, kind: Op | str, parents, attrs: dict | None = None) -> int:
    return graph.apply(kind, parents, **(attrs or {}))


def grad_reverse(graph: Graph, x: int, lam: float) -> int:
    """Identity forward; scales the upstream gradient by ``-lam`` on the way back."""
    lam = float(lam)
    if not lam >= 0:
        raise ValueError(f"grad-reverse: lambda must be >= 0, got {lam}")
    return graph.apply(Op.GRAD_REVERSE, (x,), lam=lam)


def backprop(graph: Graph, loss: int) -> dict[int, np.ndarray]:
    """Gradient of scalar node ``loss`` with respect to every node that feeds it.

    Nodes are visited in descending index order and contributions are
    accumulated in that fixed order, so repeated runs are bitwise identical.
    """
    out = graph.nodes[loss].value
    if out.size != 1:
        raise ShapeError("backprop", [out.shape], "loss must be a scalar")
    grads: dict[int, np.ndarray] = {loss: np.ones_like(out)}
    for i in range(loss, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.op is Op.LEAF:
            continue
        vals = [graph.nodes[p].value for p in node.parents]
        pgrads = _BACKWARD[node.op](g, vals, node.value, node.attrs, node.cache)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not graph.nodes[p].requires_grad:
                continue
            pg = np.asarray(pg, dtype=graph.dtype)
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return grads


def finite_diff_check(
    f: Callable[[Graph, int], int],
    x,
    eps: float = 1e-4,
    dtype=np.float64,
) -> float:
    """Max coordinate-wise relative error between backprop and central differences.

    ``f(graph, x_node)`` must build a scalar loss node from the input node.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x = np.array(x, dtype=dtype)

    def evaluate(point):
        g = Graph(dtype)
        xi = g.param("x", point)
        loss = f(g, xi)
        return g, xi, loss

    g, xi, loss = evaluate(x)
    analytic = g.backprop(loss).get(xi)
    if analytic is None:
        analytic = np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        gp, _, lp = evaluate(plus.reshape(x.shape))
        gm, _, lm = evaluate(minus.reshape(x.shape))
        fp = float(gp.value(lp).reshape(()))
        fm = float(gm.value(lm).reshape(()))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is non-finite near coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# forward rules: (parent values, attrs) -> (value, cache)


def _fwd_matmul(vals, attrs):
    a, b = vals
    if attrs.get("transpose_b"):
        b = _swap_last(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(Op.MATMUL, [v.shape for v in vals], "inner extents differ")
    try:
        return np.matmul(a, b), None
    except ValueError as exc:
        raise ShapeError(Op.MATMUL, [v.shape for v in vals], str(exc)) from None


def _fwd_add(vals, attrs):
    a, b = vals
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(Op.ADD, [a.shape, b.shape]) from None
    return a + b, None


def _fwd_scale(vals, attrs):
    return vals[0] * vals[0].dtype.type(attrs["scalar"]), None


def _fwd_concat(vals, attrs):
    axis = attrs.get("axis", -1)
    try:
        return np.concatenate(vals, axis=axis), None
    except ValueError:
        raise ShapeError(Op.CONCAT, [v.shape for v in vals]) from None


def _fwd_slice(vals, attrs):
    (x,) = vals
    axis = attrs["axis"] % x.ndim
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(Op.SLICE, [x.shape], f"range [{start}, {stop}) on axis {axis}")
    if attrs.get("squeeze") and stop - start != 1:
        raise ShapeError(Op.SLICE, [x.shape], "squeeze needs a width-1 slice")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    out = x[tuple(index)]
    if attrs.get("squeeze"):
        out = np.squeeze(out, axis=axis)
    return out, None


def _fwd_embedding(vals, attrs):
    (table,) = vals
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(Op.EMBEDDING, [table.shape], "table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(Op.EMBEDDING, [table.shape, ids.shape], f"id out of range [0, {table.shape[0]})")
    return table[ids], None


def _fwd_layer_norm(vals, attrs):
    x, gain, bias = vals
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(Op.LAYER_NORM, [v.shape for v in vals])
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + attrs.get("eps", 1e-5))
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _fwd_gelu(vals, attrs):
    (x,) = vals
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0), None


def _fwd_softmax(vals, attrs):
    (x,) = vals
    mask = attrs.get("mask")
    if mask is not None:
        x = x + mask
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _fwd_log(vals, attrs):
    (x,) = vals
    if (x <= 0).any():
        raise NonFiniteError("log: input must be strictly positive")
    return np.log(x), None


def _fwd_mean(vals, attrs):
    return np.mean(vals[0]).reshape(1), None


def _fwd_sum(vals, attrs):
    return np.sum(vals[0]).reshape(1), None


def _fwd_squared_error(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(Op.SQUARED_ERROR, [a.shape, b.shape])
    d = a - b
    rows = d.size // d.shape[-1]
    return (np.sum(d * d) / rows).reshape(1), rows


def _fwd_cross_entropy(vals, attrs):
    (logits,) = vals
    targets = attrs["targets"]
    c = logits.shape[-1]
    flat = logits.reshape(-1, c)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if targets.dtype.kind in "iu":
        t = targets.reshape(-1)
        if t.shape[0] != flat.shape[0]:
            raise ShapeError(Op.CROSS_ENTROPY, [logits.shape, targets.shape])
        keep = t >= 0
        if (t >= c).any():
            raise ShapeError(Op.CROSS_ENTROPY, [logits.shape, targets.shape], "target class out of range")
        n = int(keep.sum())
        if n == 0:
            return np.zeros(1), (logp, None, 0)
        loss = -logp[keep, t[keep]].sum() / n
        return np.asarray(loss).reshape(1), (logp, t, n)
    soft = targets.reshape(-1, c)
    if soft.shape != flat.shape:
        raise ShapeError(Op.CROSS_ENTROPY, [logits.shape, targets.shape])
    n = flat.shape[0]
    return np.asarray(-(soft * logp).sum() / n).reshape(1), (logp, soft, n)


def _fwd_grad_reverse(vals, attrs):
    return vals[0], None


def _fwd_sparsemax(vals, attrs):
    return simplex.sparsemax(vals[0]), None


def _fwd_sparsemax_loss(vals, attrs):
    (scores,) = vals
    gold = attrs["gold"].reshape(-1)
    flat = scores.reshape(-1, scores.shape[-1])
    if gold.shape[0] != flat.shape[0]:
        raise ShapeError(Op.SPARSEMAX_LOSS, [scores.shape, gold.shape])
    losses, grads = simplex.sparsemax_loss(flat, gold)
    n = flat.shape[0]
    return np.asarray(losses.sum() / n).reshape(1), grads / n


_FORWARD = {
    Op.MATMUL: _fwd_matmul,
    Op.ADD: _fwd_add,
    Op.SCALE: _fwd_scale,
    Op.CONCAT: _fwd_concat,
    Op.SLICE: _fwd_slice,
    Op.EMBEDDING: _fwd_embedding,
    Op.LAYER_NORM: _fwd_layer_norm,
    Op.GELU: _fwd_gelu,
    Op.RELU: _fwd_relu,
    Op.SOFTMAX: _fwd_softmax,
    Op.LOG: _fwd_log,
    Op.MEAN: _fwd_mean,
    Op.SUM: _fwd_sum,
    Op.SQUARED_ERROR: _fwd_squared_error,
    Op.CROSS_ENTROPY: _fwd_cross_entropy,
    Op.GRAD_REVERSE: _fwd_grad_reverse,
    Op.SPARSEMAX: _fwd_sparsemax,
    Op.SPARSEMAX_LOSS: _fwd_sparsemax_loss,
}


# ---------------------------------------------------------------------------
# backward rules: (upstream, parent values, output, attrs, cache) -> parent grads


def _bwd_matmul(g, vals, out, attrs, cache):
    a, b = vals
    tb = attrs.get("transpose_b")
    bm = _swap_last(b) if tb else b
    ga = _unbroadcast(np.matmul(g, _swap_last(bm)), a.shape)
    if bm.ndim == 2:
        gbm = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gbm = np.matmul(_swap_last(a), g)
        gbm = _unbroadcast(gbm, bm.shape)
    gb = _swap_last(gbm) if tb else gbm
    return ga, gb


def _bwd_add(g, vals, out, attrs, cache):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_scale(g, vals, out, attrs, cache):
    return (g * g.dtype.type(attrs["scalar"]),)


def _bwd_concat(g, vals, out, attrs, cache):
    axis = attrs.get("axis", -1) % out.ndim
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _bwd_slice(g, vals, out, attrs, cache):
    (x,) = vals
    axis = attrs["axis"] % x.ndim
    if attrs.get("squeeze"):
        g = np.expand_dims(g, axis)
    full = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(attrs["start"], attrs["stop"])
    full[tuple(index)] = g
    return (full,)


def _bwd_embedding(g, vals, out, attrs, cache):
    (table,) = vals
    ids = attrs["ids"].reshape(-1)
    full = np.zeros_like(table)
    np.add.at(full, ids, g.reshape(-1, table.shape[1]))
    return (full,)


def _bwd_layer_norm(g, vals, out, attrs, cache):
    x, gain, bias = vals
    xhat, inv = cache
    lead = tuple(range(x.ndim - 1))
    ggain = (g * xhat).sum(axis=lead)
    gbias = g.sum(axis=lead)
    dxhat = g * gain
    gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggain, gbias


def _bwd_gelu(g, vals, out, attrs, cache):
    (x,) = vals
    t = cache
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _bwd_relu(g, vals, out, attrs, cache):
    return (g * (vals[0] > 0),)


def _bwd_softmax(g, vals, out, attrs, cache):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _bwd_log(g, vals, out, attrs, cache):
    return (g / vals[0],)


def _bwd_mean(g, vals, out, attrs, cache):
    (x,) = vals
    return (np.full_like(x, g.reshape(()) / x.size),)


def _bwd_sum(g, vals, out, attrs, cache):
    return (np.full_like(vals[0], g.reshape(())),)


def _bwd_squared_error(g, vals, out, attrs, cache):
    a, b = vals
    d = (2.0 / cache) * g.reshape(()) * (a - b)
    return d, -d


def _bwd_cross_entropy(g, vals, out, attrs, cache):
    (logits,) = vals
    logp, t, n = cache
    if n == 0:
        return (np.zeros_like(logits),)
    p = np.exp(logp)
    if t is None or t.ndim == 2:
        soft = t
        grad = (p * soft.sum(axis=1, keepdims=True) - soft) / n
    else:
        keep = t >= 0
        grad = p * keep[:, None]
        grad[keep, t[keep]] -= 1.0
        grad /= n
    return ((g.reshape(()) * grad).reshape(logits.shape),)


def _bwd_grad_reverse(g, vals, out, attrs, cache):
    return (g * g.dtype.type(-attrs["lam"]),)


def _bwd_sparsemax(g, vals, out, attrs, cache):
    return (simplex.sparsemax_backward(out, g),)


def _bwd_sparsemax_loss(g, vals, out, attrs, cache):
    return ((g.reshape(()) * cache).reshape(vals[0].shape),)


_BACKWARD = {
    Op.MATMUL: _bwd_matmul,
    Op.ADD: _bwd_add,
    Op.SCALE: _bwd_scale,
    Op.CONCAT: _bwd_concat,
    Op.SLICE: _bwd_slice,
    Op.EMBEDDING: _bwd_embedding,
    Op.LAYER_NORM: _bwd_layer_norm,
    Op.GELU: _bwd_gelu,
    Op.RELU: _bwd_relu,
    Op.SOFTMAX: _bwd_softmax,
    Op.LOG: _bwd_log,
    Op.MEAN: _bwd_mean,
    Op.SUM: _bwd_sum,
    Op.SQUARED_ERROR: _bwd_squared_error,
    Op.CROSS_ENTROPY: _bwd_cross_entropy,
    Op.GRAD_REVERSE: _bwd_grad_reverse,
    Op.SPARSEMAX: _bwd_sparsemax,
    Op.SPARSEMAX_LOSS: _bwd_sparsemax_loss,
}
