"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records a closure mapping the output gradient to one
gradient per parent. ``backward`` replays that record in reverse
topological order. Shapes are checked at each primitive; the only
implicit broadcast is scalar-with-tensor. Row/column broadcasts go
through the explicit ``add_bias`` and ``scale_rows`` primitives, and
``matmul`` follows the usual batched-matrix rule (a 2-D right operand is
shared across the leading axes of the left one).
"""
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "tensor", "no_grad", "grad_enabled", "backward", "grad_check",
    "grad_check_params", "add", "sub", "mul", "neg", "scale_shift", "matmul", "swap_last",
    "permute", "reshape", "elementwise", "relu", "sigmoid", "exp", "log", "cos", "sin",
    "softmax_rows", "sum", "mean", "add_bias", "scale_rows", "row_normalize",
    "causal_mask_fill", "layer_norm", "embedding", "cross_entropy", "dropout",
    "prefix_attend", "rotate_pairs",
]

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "flags", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.flags = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale_shift(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scale_shift(self, 1.0, -float(other))

    def __rsub__(self, other):
        return scale_shift(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale_shift(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division: use row_normalize")
        return scale_shift(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Reverse-topological record of the graph feeding one scalar."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        order, seen = [], set()
        stack = [(loss, False)]
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
        order.reverse()
        return cls(order)

    def replay(self, seed):
        grads = {id(self.nodes[0]): seed}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-enabled leaf ancestor.

    Intermediate gradients are released as soon as they have been propagated.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")
    Tape.from_loss(loss).replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale_shift(x, scale=1.0, shift=0.0):
    return _make(x.data * scale + shift, (x,), lambda g: (g * scale,), "scale_shift")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ ({a.shape[-1]} vs {b.shape[-2]}) for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading extents differ for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def swap_last(x):
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def permute(x, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# element-wise


def relu(x):
    xd = x.data
    return _make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), "relu")


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def cos(x):
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def sin(x):
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "cos": cos, "sin": sin}


def elementwise(op_kind, x, scale=1.0, shift=0.0):
    """Dispatch by name; ``"scale+shift"`` computes ``x * scale + shift``."""
    if op_kind == "scale+shift":
        return scale_shift(x, scale, shift)
    try:
        return _ELEMENTWISE[op_kind](x)
    except KeyError:
        raise ValueError(f"unknown element-wise op {op_kind!r}") from None


# ---------------------------------------------------------------------------
# reductions and row ops


def softmax_rows(x):
    if x.ndim < 2:
        raise ValueError(f"softmax_rows needs rank >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax_rows")


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return scale_shift(sum(x, axis=axis), 1.0 / n, 0.0)


def add_bias(x, b):
    if b.shape != x.shape[-1:]:
        raise ValueError(f"add_bias: bias shape {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def scale_rows(x, s):
    """Multiply row ``x[..., i, :]`` by ``s[..., i]``."""
    if s.shape != x.shape[:-1]:
        raise ValueError(f"scale_rows: scale shape {s.shape} does not match rows of {x.shape}")
    xd, sd = x.data, s.data
    return _make(xd * sd[..., None], (x, s), lambda g: (g * sd[..., None], (g * xd).sum(axis=-1)),
                 "scale_rows")


def row_normalize(num, den, floor=1e-6):
    """``num[..., i, :] / den[..., i]``; rows whose denominator is below ``floor`` become zero.

    The returned tensor carries a boolean ``flags`` array marking floored rows.
    """
    if den.shape != num.shape[:-1]:
        raise ValueError(f"row_normalize: denominator shape {den.shape} does not match {num.shape}")
    nd, dd = num.data, den.data
    ok = dd >= floor
    safe = np.where(ok, dd, 1.0)
    out = np.where(ok[..., None], nd / safe[..., None], 0.0)

    def bw(g):
        gn = np.where(ok[..., None], g / safe[..., None], 0.0)
        gd = np.where(ok, -(g * nd).sum(axis=-1) / safe ** 2, 0.0)
        return gn, gd

    res = _make(out, (num, den), bw, "row_normalize")
    res.flags = ~ok
    return res


def causal_mask_fill(x):
    """Set entries above the diagonal of the last two axes to -inf (pre-softmax)."""
    n1, n2 = x.shape[-2:]
    mask = np.triu(np.ones((n1, n2), dtype=bool), k=1)
    return _make(np.where(mask, -np.inf, x.data), (x,), lambda g: (np.where(mask, 0.0, g),),
                 "causal_mask_fill")


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxh = g * gd
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return _make(xh * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"embedding: ids out of range [0, {weight.shape[0]})")
    wshape = weight.shape

    def bw(g):
        gw = np.zeros(wshape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def cross_entropy(logits, targets):
    """Mean token cross-entropy; ``targets`` holds class ids for ``logits[..., :]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = t.size
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# attention primitives


def prefix_attend(a, b, v):
    """Causal ``out[i] = sum_{j<=i} (a[i].b[j]) v[j]`` with a fused backward."""
    _same_shape(a, b, "prefix_attend")
    if a.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"prefix_attend: value rows {v.shape} do not match {a.shape}")
    ad, bd, vd = a.data, b.data, v.data
    return _make(kernels.prefix_forward(ad, bd, vd), (a, b, v),
                 lambda g: kernels.prefix_backward(ad, bd, vd, g), "prefix_attend")


def rotate_pairs(x, angles):
    """Rotate feature pairs (2m, 2m+1) of row n by ``angles[n, m]`` (rotary transform)."""
    n, d = x.shape[-2:]
    if d % 2:
        raise ValueError(f"rotate_pairs needs an even feature extent, got {d}")
    if angles.shape != (n, d // 2):
        raise ValueError(f"rotate_pairs: angles shape {angles.shape}, expected {(n, d // 2)}")
    c, s = np.cos(angles), np.sin(angles)

    def rot(arr, sign):
        x0, x1 = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = x0 * c - sign * x1 * s
        out[..., 1::2] = sign * x0 * s + x1 * c
        return out

    return _make(rot(x.data, 1.0), (x,), lambda g: (rot(g, -1.0),), "rotate_pairs")


# ---------------------------------------------------------------------------
# finite differences


def _rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check_params(f, params, h=1e-5):
    """Max relative error between backprop and central differences over ``params``.

    ``f`` takes no arguments and must read ``params`` (leaf tensors) each call.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = np.empty(p.shape)
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            with no_grad():
                up = f().item()
            flat[idx] = orig - h
            with no_grad():
                down = f().item()
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def grad_check(f, x, h=1e-5):
    """Max relative error of ``d f(x) / dx`` against central differences with step ``h``."""
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    return grad_check_params(lambda: f(leaf), [leaf], h=h)
