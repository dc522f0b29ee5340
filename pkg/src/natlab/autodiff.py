"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Graph records operations eagerly in creation order; backward() walks the
node list in strict reverse order, accumulating adjoints additively. Tensors
are immutable after creation. One active Graph per training thread.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

NEG_INF = -1.0e30  # -inf sentinel that survives max / log-sum-exp / subtraction

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operation inputs do not conform to the kind's shape rule."""


class Tensor:
    """A float64 array, optionally attached to a computation graph.

    A Tensor with ``node_id is None`` is detached and never receives gradient.
    """

    __slots__ = ("data", "node_id", "graph")

    def __init__(self, data, node_id=None, graph=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node_id={self.node_id})"


class _Node:
    __slots__ = ("kind", "input_ids", "vjp", "shape")

    def __init__(self, kind, input_ids, vjp, shape):
        self.kind = kind
        self.input_ids = input_ids
        self.vjp = vjp  # callable(adjoint) -> list of adjoints per input, or None for leaves
        self.shape = shape


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _require(cond, kind, msg):
    if not cond:
        raise ShapeError(f"{kind}: {msg}")


# ---------------------------------------------------------------------------
# operation kernels: each returns (out_data, vjp)
# ---------------------------------------------------------------------------

def _op_add(xs, attrs):
    a, b = xs
    out = a + b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_sub(xs, attrs):
    a, b = xs
    out = a - b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _op_mul(xs, attrs):
    a, b = xs
    out = a * b
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _op_neg(xs, attrs):
    (a,) = xs
    return -a, lambda g: (-g,)


def _op_scale(xs, attrs):
    (a,) = xs
    c = float(attrs["value"])
    return a * c, lambda g: (g * c,)


def _op_matmul(xs, attrs):
    a, b = xs
    _require(a.ndim >= 2 and b.ndim >= 2, "matmul",
             f"needs >=2-d operands, got {a.shape} @ {b.shape}")
    _require(a.shape[-1] == b.shape[-2], "matmul",
             f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _op_transpose(xs, attrs):
    (a,) = xs
    axes = tuple(attrs["axes"])
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


def _op_reshape(xs, attrs):
    (a,) = xs
    shape = tuple(attrs["shape"])
    _require(np.prod(shape, dtype=int) == a.size, "reshape",
             f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


def _op_concat(xs, attrs):
    axis = int(attrs.get("axis", 0))
    _require(len(xs) >= 1, "concat", "needs at least one input")
    out = np.concatenate(xs, axis=axis)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _op_slice(xs, attrs):
    (a,) = xs
    key = tuple(slice(*s) if isinstance(s, (tuple, list)) else s
                for s in attrs["key"])

    def vjp(g):
        full = np.zeros_like(a)
        full[key] = g
        return (full,)

    return np.ascontiguousarray(a[key]), vjp


def _op_sigmoid(xs, attrs):
    (a,) = xs
    out = 1.0 / (1.0 + np.exp(-a))
    return out, lambda g: (g * out * (1.0 - out),)


def _op_gelu(xs, attrs):
    (a,) = xs
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    out = a * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)

    return out, vjp


def _op_log(xs, attrs):
    (a,) = xs
    return np.log(a), lambda g: (g / a,)


def _op_exp(xs, attrs):
    (a,) = xs
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _op_abs(xs, attrs):
    (a,) = xs
    # subgradient 0 at the kink
    return np.abs(a), lambda g: (g * np.sign(a),)


def _op_softmax(xs, attrs):
    (a,) = xs
    axis = int(attrs.get("axis", -1))
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return out, vjp


def _op_log_softmax(xs, attrs):
    (a,) = xs
    axis = int(attrs.get("axis", -1))
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return out, vjp


def _op_layer_norm(xs, attrs):
    (a,) = xs
    eps = float(attrs.get("eps", 1e-6))
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a - mean) * inv
    n = a.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),)

    del n
    return out, vjp


def _op_masked_fill(xs, attrs):
    (a,) = xs
    mask = np.asarray(attrs["mask"], dtype=bool)
    value = float(attrs["value"])
    mask_b = np.broadcast_to(mask, a.shape)
    out = np.where(mask_b, value, a)
    return out, lambda g: (np.where(mask_b, 0.0, g),)


def _op_sum(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", None)
    keepdims = bool(attrs.get("keepdims", False))
    out = a.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return out, vjp


def _op_mean(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", None)
    keepdims = bool(attrs.get("keepdims", False))
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return out, vjp


def _op_conv1d(xs, attrs):
    """Same-padded 1-D convolution over time.

    input (T, Cin) or (B, T, Cin); weight (K, Cin, Cout); stride from attrs.
    """
    x, w = xs
    _require(x.ndim in (2, 3), "conv1d", f"input must be 2-d or 3-d, got {x.shape}")
    _require(w.ndim == 3, "conv1d", f"weight must be (K, Cin, Cout), got {w.shape}")
    _require(x.shape[-1] == w.shape[1], "conv1d",
             f"channel mismatch: input {x.shape} vs weight {w.shape}")
    stride = int(attrs.get("stride", 1))
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    B, T, Cin = xb.shape
    K, _, Cout = w.shape
    pad = (K - 1) // 2
    t_out = (T + stride - 1) // stride
    xp = np.zeros((B, T + K - 1, Cin))
    xp[:, pad:pad + T] = xb
    out = np.zeros((B, t_out, Cout))
    for k in range(K):
        seg = xp[:, k:k + T:stride][:, :t_out]
        out += np.matmul(seg, w[k])

    def vjp(g):
        gb = g[None] if squeeze and g.ndim == 2 else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for k in range(K):
            seg = xp[:, k:k + T:stride][:, :t_out]
            gw[k] = np.einsum("btc,btd->cd", seg, gb)
            sub = gxp[:, k:k + T:stride][:, :t_out]
            sub += np.matmul(gb, w[k].T)
        gx = gxp[:, pad:pad + T]
        return (gx[0] if squeeze else gx, gw)

    return out[0] if squeeze else out, vjp


_OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "neg": _op_neg,
    "scale": _op_scale,
    "matmul": _op_matmul,
    "transpose": _op_transpose,
    "reshape": _op_reshape,
    "concat": _op_concat,
    "slice": _op_slice,
    "sigmoid": _op_sigmoid,
    "gelu": _op_gelu,
    "log": _op_log,
    "exp": _op_exp,
    "abs": _op_abs,
    "softmax": _op_softmax,
    "log_softmax": _op_log_softmax,
    "layer_norm": _op_layer_norm,
    "masked_fill": _op_masked_fill,
    "sum": _op_sum,
    "mean": _op_mean,
    "conv1d": _op_conv1d,
}


def register_op(kind, fn):
    """Register an additional operation kernel (used by the CTC loss node)."""
    _OPS[kind] = fn


class Graph:
    """Eagerly built computation graph; discarded after backward."""

    def __init__(self):
        self.nodes = []

    def leaf(self, data) -> Tensor:
        nid = len(self.nodes)
        t = Tensor(data, node_id=nid, graph=self)
        self.nodes.append(_Node("leaf", (), None, t.data.shape))
        return t

    def apply(self, kind, inputs, attrs=None) -> Tensor:
        if kind not in _OPS:
            raise ValueError(f"unknown operation kind: {kind!r}")
        attrs = attrs or {}
        datas = []
        input_ids = []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.node_id is not None and x.graph is not self:
                    raise ValueError(f"{kind}: input belongs to a different graph")
                datas.append(x.data)
                input_ids.append(x.node_id)
            else:
                datas.append(np.asarray(x, dtype=np.float64))
                input_ids.append(None)
        out_data, vjp = _OPS[kind](datas, attrs)
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(input_ids), vjp, out_data.shape))
        return Tensor(out_data, node_id=nid, graph=self)

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar loss; returns {node_id: gradient Tensor}.

        Every leaf receives an entry; leaves unreachable from the loss get a
        zero gradient of their own shape.
        """
        if loss.graph is not self or loss.node_id is None:
            raise ValueError("loss does not belong to this graph")
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        adjoints = [None] * len(self.nodes)
        adjoints[loss.node_id] = np.ones(self.nodes[loss.node_id].shape)
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = adjoints[nid]
            if g is None or node.vjp is None:
                continue
            input_grads = node.vjp(g)
            for iid, ig in zip(node.input_ids, input_grads):
                if iid is None or ig is None:
                    continue
                if adjoints[iid] is None:
                    adjoints[iid] = np.array(ig, copy=True)
                else:
                    adjoints[iid] += ig
        grads = {}
        for nid, node in enumerate(self.nodes):
            if node.kind != "leaf":
                continue
            g = adjoints[nid]
            grads[nid] = Tensor(np.zeros(node.shape) if g is None else g)
        return grads

    # convenience wrappers -------------------------------------------------

    def add(self, a, b):
        return self.apply("add", [a, b])

    def sub(self, a, b):
        return self.apply("sub", [a, b])

    def mul(self, a, b):
        return self.apply("mul", [a, b])

    def neg(self, a):
        return self.apply("neg", [a])

    def scale(self, a, c):
        return self.apply("scale", [a], {"value": c})

    def matmul(self, a, b):
        return self.apply("matmul", [a, b])

    def transpose(self, a, axes):
        return self.apply("transpose", [a], {"axes": axes})

    def reshape(self, a, shape):
        return self.apply("reshape", [a], {"shape": shape})

    def concat(self, xs, axis=0):
        return self.apply("concat", xs, {"axis": axis})

    def slice(self, a, key):
        return self.apply("slice", [a], {"key": key})

    def sigmoid(self, a):
        return self.apply("sigmoid", [a])

    def gelu(self, a):
        return self.apply("gelu", [a])

    def softmax(self, a, axis=-1):
        return self.apply("softmax", [a], {"axis": axis})

    def log_softmax(self, a, axis=-1):
        return self.apply("log_softmax", [a], {"axis": axis})

    def layer_norm(self, a, eps=1e-6):
        return self.apply("layer_norm", [a], {"eps": eps})

    def masked_fill(self, a, mask, value):
        return self.apply("masked_fill", [a], {"mask": mask, "value": value})

    def sum(self, a, axis=None, keepdims=False):
        return self.apply("sum", [a], {"axis": axis, "keepdims": keepdims})

    def mean(self, a, axis=None, keepdims=False):
        return self.apply("mean", [a], {"axis": axis, "keepdims": keepdims})

    def abs(self, a):
        return self.apply("abs", [a])

    def conv1d(self, x, w, stride=1):
        return self.apply("conv1d", [x, w], {"stride": stride})


def grad_check(f, x, step=1e-5):
    """Max relative error between analytic gradient of f at x and central
    finite differences.

    f must build its own Graph from a leaf for the supplied array and return
    (scalar Tensor, gradient array for x). For convenience f may instead take
    a Tensor leaf and return the scalar Tensor; then the graph is managed here.
    """
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    xt = g.leaf(x)
    loss = f(xt)
    if loss.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    analytic = loss.graph.backward(loss)[xt.node_id].data

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        g2 = Graph()
        hi = f(g2.leaf(x)).item()
        flat[i] = orig - step
        g3 = Graph()
        lo = f(g3.leaf(x)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)
        if not np.isfinite(num_flat[i]):
            raise FloatingPointError(f"non-finite finite difference at coordinate {i}")
    if not np.all(np.isfinite(analytic)):
        bad = int(np.argmax(~np.isfinite(analytic.reshape(-1))))
        raise FloatingPointError(f"non-finite analytic gradient at coordinate {bad}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    # ignore coordinates where both sides are essentially zero
    tiny = (np.abs(analytic) < 1e-10) & (np.abs(numeric) < 1e-10)
    rel[tiny] = 0.0
    return float(rel.max()) if rel.size else 0.0
