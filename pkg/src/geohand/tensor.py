"""Dense float64 tensors with a small reverse-mode gradient engine.

Every differentiable primitive lives in ``PRIMITIVES`` as a forward/backward
pair.  ``forward`` looks the primitive up by name, runs it, and records a node
on the output tensor; ``backward`` walks the recorded graph in reverse
topological order.  Backward rules are resolved through the registry at
backward time, so a rule can be swapped out (e.g. for fault injection in the
gradient checker's own tests).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible extents."""


class GraphError(RuntimeError):
    """Raised for malformed backward requests (non-scalar loss, detached leaves)."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "saved", "attrs", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.saved: Any = None
        self.attrs: dict = {}
        self.name = name

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return forward("neg", [self])

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return forward("getitem", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    doc: str = ""


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, backward: Callable, doc: str = ""):
    def deco(fwd):
        PRIMITIVES[name] = Primitive(name, fwd, backward, doc)
        return fwd
    return deco


def forward(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``op_kind`` on ``inputs`` and record it for backward."""
    try:
        prim = PRIMITIVES[op_kind]
    except KeyError:
        raise KeyError(f"unknown op_kind {op_kind!r}") from None
    ins = tuple(as_tensor(x) for x in inputs)
    out_data, saved = prim.forward(*(t.data for t in ins), **attrs)
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in ins):
        out.requires_grad = True
        out.op = op_kind
        out.inputs = ins
        out.saved = saved
        out.attrs = attrs
    return out


# ---------------------------------------------------------------------------
# Graph + backward
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from one output, inputs before outputs."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.records if t.is_leaf]


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None, graph: Graph | None = None) -> dict[int, np.ndarray]:
    """Accumulate dLoss/dLeaf into ``leaf.grad`` for every reachable leaf.

    ``leaves`` optionally names tensors that must receive a gradient; a named
    leaf the loss does not depend on raises ``GraphError``.
    Returns a map from ``id(tensor)`` to its gradient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph.trace(loss)
    if leaves is not None:
        reached = {id(t) for t in graph.records}
        for leaf in leaves:
            if id(leaf) not in reached:
                raise GraphError(f"leaf {leaf.name or leaf.shape} is detached from the loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.records):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        prim = PRIMITIVES[node.op]
        in_grads = prim.backward(g, node.saved, node.attrs)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.op}: backward produced {pg.shape} for input of shape {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, *arrays) -> None:
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {[a.shape for a in arrays]}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _add_bwd(g, saved, attrs):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


@primitive("add", _add_bwd)
def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def _sub_bwd(g, saved, attrs):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@primitive("sub", _sub_bwd)
def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, (a.shape, b.shape)


def _mul_bwd(g, saved, attrs):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("mul", _mul_bwd)
def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, (a, b)


def _div_bwd(g, saved, attrs):
    a, b = saved
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@primitive("div", _div_bwd)
def _div_fwd(a, b):
    _check_broadcast("div", a, b)
    return a / b, (a, b)


@primitive("neg", lambda g, saved, attrs: (-g,))
def _neg_fwd(a):
    return -a, None


@primitive("exp", lambda g, out, attrs: (g * out,))
def _exp_fwd(a):
    out = np.exp(a)
    return out, out


@primitive("log", lambda g, a, attrs: (g / a,))
def _log_fwd(a):
    return np.log(a), a


@primitive("sqrt", lambda g, out, attrs: (g * 0.5 / out,))
def _sqrt_fwd(a):
    out = np.sqrt(a)
    return out, out


# L1 subgradient at 0 is 0 (np.sign(0) == 0).
@primitive("abs", lambda g, a, attrs: (g * np.sign(a),))
def _abs_fwd(a):
    return np.abs(a), a


@primitive("square", lambda g, a, attrs: (2.0 * g * a,))
def _square_fwd(a):
    return a * a, a


def _clamp_max_bwd(g, a, attrs):
    return (g * (a < attrs["cap"]),)


@primitive("clamp_max", _clamp_max_bwd, "min(x, cap); zero gradient at and above the cap")
def _clamp_max_fwd(a, cap):
    return np.minimum(a, cap), a


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

@primitive("sigmoid", lambda g, out, attrs: (g * out * (1.0 - out),))
def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, out


@primitive("tanh", lambda g, out, attrs: (g * (1.0 - out * out),))
def _tanh_fwd(a):
    out = np.tanh(a)
    return out, out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_bwd(g, saved, attrs):
    a, cdf = saved
    return (g * (cdf + a * _INV_SQRT2PI * np.exp(-0.5 * a * a)),)


@primitive("gelu", _gelu_bwd, "exact erf GELU")
def _gelu_fwd(a):
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    return a * cdf, (a, cdf)


def _softmax_bwd(g, saved, attrs):
    out = saved
    ax = attrs["axis"]
    return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)


@primitive("softmax", _softmax_bwd)
def _softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _sum_bwd(g, shape, attrs):
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


@primitive("sum", _sum_bwd)
def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), a.shape


def _mean_bwd(g, saved, attrs):
    shape, count = saved
    (gs,) = _sum_bwd(g, shape, attrs)
    return (gs / count,)


@primitive("mean", _mean_bwd)
def _mean_fwd(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    return out, (a.shape, a.size // np.size(out))


@primitive("reshape", lambda g, shape, attrs: (g.reshape(shape),))
def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), a.shape
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None


@primitive("transpose", lambda g, axes, attrs: (g.transpose(np.argsort(axes)),))
def _transpose_fwd(a, axes):
    if len(axes) != a.ndim:
        raise ShapeError(f"transpose: axes {axes} do not match rank {a.ndim}")
    return a.transpose(axes), tuple(axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem_bwd(g, shape, attrs):
    index = attrs["index"]
    out = np.zeros(shape, dtype=DTYPE)
    if _is_basic_index(index):
        out[index] += g
    else:
        np.add.at(out, index, g)
    return (out,)


@primitive("getitem", _getitem_bwd)
def _getitem_fwd(a, index):
    return a[index], a.shape


def _concat_bwd(g, sizes, attrs):
    axis = attrs.get("axis", 0)
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


@primitive("concat", _concat_bwd)
def _concat_fwd(*arrays, axis=0):
    ref = arrays[0]
    ax = axis % ref.ndim
    for a in arrays[1:]:
        if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: extents {[x.shape for x in arrays]} disagree off axis {axis}")
    return np.concatenate(arrays, axis=axis), [a.shape[ax] for a in arrays]


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def _matmul_bwd(g, saved, attrs):
    a, b = saved
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@primitive("matmul", _matmul_bwd)
def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _norm_bwd(g, saved, attrs):
    a, out = saved
    keep = out if attrs.get("keepdims", False) else np.expand_dims(out, attrs["axis"])
    gk = g if attrs.get("keepdims", False) else np.expand_dims(g, attrs["axis"])
    safe = np.where(keep > 0, keep, 1.0)
    return (np.where(keep > 0, gk * a / safe, 0.0),)


@primitive("norm", _norm_bwd, "Euclidean norm along one axis; zero gradient at the origin")
def _norm_fwd(a, axis=-1, keepdims=False):
    out = np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))
    return out, (a, out)


def _attention_bwd(g, saved, attrs):
    q, k, v, p, scale = saved
    gv = np.swapaxes(p, -1, -2) @ g
    gp = g @ np.swapaxes(v, -1, -2)
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    gq = (gs @ k) * scale
    gk = (np.swapaxes(gs, -1, -2) @ q) * scale
    return gq, gk, gv


@primitive("attention", _attention_bwd, "softmax(q k^T / sqrt(d)) v over the last two axes")
def _attention_fwd(q, k, v):
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return p @ v, (q, k, v, p, scale)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _layer_norm_bwd(g, saved, attrs):
    xhat, rstd, w = saved
    gw = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx_hat = g * w
    n = xhat.shape[-1]
    gx = rstd / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return gx, gw, gb


@primitive("layer_norm", _layer_norm_bwd)
def _layer_norm_fwd(x, w, b, eps=1e-5):
    if w.shape != (x.shape[-1],) or b.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine {w.shape}/{b.shape} vs features {x.shape[-1]}")
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * w + b, (xhat, rstd, w)


def _group_norm_bwd(g, saved, attrs):
    xhat, rstd, w, groups = saved
    bsz, c = xhat.shape[:2]
    gw = (g * xhat).sum(axis=(0, 2, 3))
    gb = g.sum(axis=(0, 2, 3))
    gxh = (g * w[None, :, None, None]).reshape(bsz, groups, -1)
    xh = xhat.reshape(bsz, groups, -1)
    n = xh.shape[-1]
    gx = rstd / n * (n * gxh - gxh.sum(-1, keepdims=True) - xh * (gxh * xh).sum(-1, keepdims=True))
    return gx.reshape(xhat.shape), gw, gb


@primitive("group_norm", _group_norm_bwd)
def _group_norm_fwd(x, w, b, groups=8, eps=1e-5):
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected (batch, channels, height, width), got {x.shape}")
    bsz, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.reshape(bsz, groups, -1)
    mu = xg.mean(-1, keepdims=True)
    var = xg.var(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(x.shape)
    out = xhat * w[None, :, None, None] + b[None, :, None, None]
    return out, (xhat, rstd, w, groups)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def _conv2d_bwd(g, saved, attrs):
    cols, w_shape, x_shape, w = saved
    pad = attrs.get("padding", 0)
    cout, cin, kh, kw = w_shape
    bsz, _, h, wd = x_shape
    # g: (B, Cout, Ho, Wo); cols: (B, Ho, Wo, Cin*kh*kw)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g2.T @ cols.reshape(-1, cin * kh * kw)).reshape(w_shape)
    gb = g.sum(axis=(0, 2, 3))
    gcols = (g2 @ w.reshape(cout, -1)).reshape(bsz, g.shape[2], g.shape[3], cin, kh, kw)
    gxp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return gx, gw, gb


@primitive("conv2d", _conv2d_bwd, "stride-1 2-D convolution with symmetric zero padding")
def _conv2d_fwd(x, w, b, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape} incompatible")
    cout, cin, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {xp.shape[2:]}")
    if kh == 1 and kw == 1:
        cols = xp.transpose(0, 2, 3, 1)
    else:
        # (B, Cin, Ho, Wo, kh, kw) -> (B, Ho, Wo, Cin, kh, kw)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    bsz, ho, wo = cols.shape[:3]
    cols = np.ascontiguousarray(cols).reshape(bsz, ho, wo, cin * kh * kw)
    out = cols.reshape(-1, cin * kh * kw) @ w.reshape(cout, -1).T + b
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, w.shape, x.shape, w)


def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells floor(i*n_in/n_out) .. ceil((i+1)*n_in/n_out)-1."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _pool_bwd(g, saved, attrs):
    ph, pw = saved
    return (np.einsum("bcij,ih,jw->bchw", g, ph, pw, optimize=True),)


@primitive("adaptive_avg_pool2d", _pool_bwd)
def _pool_fwd(x, out_hw):
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: expected 4-D input, got {x.shape}")
    oh, ow = out_hw
    if oh > x.shape[2] or ow > x.shape[3]:
        raise ShapeError(f"adaptive_avg_pool2d: output {out_hw} larger than input {x.shape[2:]}")
    ph, pw = pool_matrix(x.shape[2], oh), pool_matrix(x.shape[3], ow)
    return np.einsum("ih,bchw,jw->bcij", ph, x, pw, optimize=True), (ph, pw)


# ---------------------------------------------------------------------------
# Public functional API
# ---------------------------------------------------------------------------

def add(a, b): return forward("add", [a, b])
def sub(a, b): return forward("sub", [a, b])
def mul(a, b): return forward("mul", [a, b])
def div(a, b): return forward("div", [a, b])
def exp(a): return forward("exp", [a])
def log(a): return forward("log", [a])
def sqrt(a): return forward("sqrt", [a])
def tabs(a): return forward("abs", [a])
def square(a): return forward("square", [a])
def clamp_max(a, cap: float): return forward("clamp_max", [a], cap=cap)
def sigmoid(a): return forward("sigmoid", [a])
def tanh(a): return forward("tanh", [a])
def gelu(a): return forward("gelu", [a])
def softmax(a, axis: int = -1): return forward("softmax", [a], axis=axis)
def matmul(a, b): return forward("matmul", [a, b])
def reshape(a, shape): return forward("reshape", [a], shape=tuple(shape))
def transpose(a, axes): return forward("transpose", [a], axes=tuple(axes))
def concat(tensors, axis: int = 0): return forward("concat", list(tensors), axis=axis)
def norm(a, axis: int = -1, keepdims: bool = False): return forward("norm", [a], axis=axis, keepdims=keepdims)
def attention(q, k, v): return forward("attention", [q, k, v])
def layer_norm(x, w, b, eps: float = 1e-5): return forward("layer_norm", [x, w, b], eps=eps)
def conv2d(x, w, b, padding: int = 0): return forward("conv2d", [x, w, b], padding=padding)
def adaptive_avg_pool2d(x, out_hw): return forward("adaptive_avg_pool2d", [x], out_hw=tuple(out_hw))


def tsum(a, axis=None, keepdims=False):
    return forward("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return forward("mean", [a], axis=axis, keepdims=keepdims)


def group_norm(x, w, b, groups: int = 8, eps: float = 1e-5):
    return forward("group_norm", [x, w, b], groups=groups, eps=eps)


def default_groups(channels: int, preferred: int = 8) -> int:
    return preferred if channels >= preferred and channels % preferred == 0 else 1


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------

class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    n_coords: int

    def __float__(self) -> float:
        return self.max_rel_err


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-6, seed: int = 0,
               detail: bool = False, max_coords: int | None = None):
    """Compare backward against central differences.

    ``inputs`` entries are either shape tuples (a random N(0,1) leaf is made
    for each) or existing tensors, which are perturbed in place and restored.
    ``fn`` receives the tensors positionally and must return a scalar.
    The error is max |analytic - numeric| / max(1, |analytic|).
    ``max_coords`` probes a random subset of at most that many coordinates per input.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    rng = np.random.default_rng(seed)
    leaves = []
    for item in inputs:
        if isinstance(item, Tensor):
            leaves.append(item)
        else:
            leaves.append(Tensor(rng.standard_normal(tuple(item)), requires_grad=True))
    saved_flags = [t.requires_grad for t in leaves]
    saved_grads = [t.grad for t in leaves]
    for t in leaves:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        out = fn(*leaves)
        if out.data.size != 1:
            raise GraphError(f"grad_check needs a scalar output, got {out.shape}")
        if out.requires_grad:
            backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

        worst = (0.0, -1, ())
        n_coords = 0
        with no_grad():
            for li, t in enumerate(leaves):
                flat = t.data.reshape(-1)
                probe = range(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    probe = np.sort(rng.choice(flat.size, max_coords, replace=False))
                for i in probe:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(fn(*leaves).data)
                    flat[i] = orig - eps
                    fm = float(fn(*leaves).data)
                    flat[i] = orig
                    idx = tuple(int(k) for k in np.unravel_index(i, t.shape))
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise NonFiniteError(f"non-finite value at input {li}, coordinate {idx}")
                    num = (fp - fm) / (2 * eps)
                    a = analytic[li].reshape(-1)[i]
                    err = abs(a - num) / max(1.0, abs(a))
                    n_coords += 1
                    if err > worst[0]:
                        worst = (err, li, idx)
    finally:
        for t, flag, g in zip(leaves, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
    result = GradCheckResult(worst[0], worst[1], worst[2], n_coords)
    return result if detail else result.max_rel_err
