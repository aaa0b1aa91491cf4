"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Ops record themselves on the active :class:`Graph` when at least one input
requires a gradient; outside a graph they are plain numpy forward passes.
Leading batch dimensions are allowed everywhere (a ``[m x n]`` op accepts
``[..., n]``); broadcasting is limited to a trailing bias/suffix operand.
"""

import contextvars
import os

import numpy as np

from . import flops
from .flops import attention_flops, gelu_flops, layer_norm_flops, linear_flops, softmax_flops

DTYPE = np.float64
MASK_VALUE = -1e30
DEBUG = os.environ.get("VQNQS_DEBUG", "0") not in ("", "0")

_tape = contextvars.ContextVar("vqnqs_tape", default=None)


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._op = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out, self.inputs, self.vjp = out, inputs, vjp


class Graph:
    """Tape of recorded ops; use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc):
        _tape.reset(self._token)
        return False

    @property
    def parameters(self):
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and not t._op:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss):
        return backward(self, loss)


class no_grad:
    """Suspend recording even inside a graph."""

    def __enter__(self):
        self._token = _tape.set(None)

    def __exit__(self, *exc):
        _tape.reset(self._token)
        return False


def _emit(data, inputs, vjp):
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor(data)
    out._op = True
    tape = _tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(graph: Graph, loss: Tensor):
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._op:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    if not loss._op and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return {t.name or id(t): t.grad for t in graph.parameters}


def _rows(shape):
    return int(np.prod(shape[:-1], dtype=np.int64))


def _reduce_to(g, shape):
    """Sum a broadcast gradient back to a trailing-suffix ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=keep, keepdims=True) if keep else g


def _check_suffix(a, b, op):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and all(
        bs in (1, as_) for as_, bs in zip(a.shape[a.ndim - b.ndim :], b.shape)
    ):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    flops.record(a.size)
    return _emit(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    _check_suffix(a, b, "sub")
    flops.record(a.size)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    flops.record(a.size)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def div(a, b):
    """Elementwise ``a / b`` with ``b`` a scalar or same-shaped tensor."""
    a, b = _t(a), _t(b)
    if b.size != 1 and b.shape != a.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} are not compatible")
    flops.record(a.size)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        gb = -g * out / bd
        return g / bd, (gb.sum().reshape(bd.shape) if b.size == 1 else gb)

    return _emit(out, (a, b), vjp)


def scale(x, c: float):
    x = _t(x)
    flops.record(x.size)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def exp(x):
    x = _t(x)
    flops.record(x.size)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def square(x):
    x = _t(x)
    flops.record(x.size)
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def gelu(x):
    """tanh approximation of GELU."""
    x = _t(x)
    flops.record(gelu_flops(x.size))
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    # x*x*x rather than x**3: the power ufunc is several times slower
    t = np.tanh(c * (xd + 0.044715 * (xd * xd * xd)))
    y = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(y, (x,), vjp)


# ------------------------------------------------------------------ reductions


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    flops.record(x.size)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = _t(x)
    flops.record(x.size)
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_last(x):
    """Sum over the last axis."""
    x = _t(x)
    flops.record(x.size)
    shape = x.shape
    return _emit(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def dot(a, b):
    a, b = _t(a), _t(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal 1-D shapes, got {a.shape} and {b.shape}")
    flops.record(2 * a.size)
    ad, bd = a.data, b.data
    return _emit(np.array(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def mean_pool_rows(x):
    """Mean over the second-to-last (position) axis: ``[..., T, d] -> [..., d]``."""
    x = _t(x)
    flops.record(x.size)
    T = x.shape[-2]
    shape = x.shape
    return _emit(
        x.data.mean(axis=-2),
        (x,),
        lambda g: (np.broadcast_to(g[..., None, :] / T, shape).copy(),),
    )


# ------------------------------------------------------------------ shape ops


def reshape(x, shape):
    x = _t(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = _t(x)
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis=-1):
    xs = [_t(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def split_last(x, sizes):
    """Split the last axis into consecutive chunks (one output per chunk)."""
    x = _t(x)
    cuts = np.cumsum(sizes)[:-1]
    outs = []
    for i, part in enumerate(np.split(x.data, cuts, axis=-1)):
        outs.append(_emit(np.ascontiguousarray(part), (x,), _split_vjp(x.shape, cuts, i)))
    return outs


def _split_vjp(shape, cuts, i):
    def vjp(g):
        full = np.zeros(shape)
        np.split(full, cuts, axis=-1)[i][...] = g
        return (full,)

    return vjp


def take(x, idx):
    """Rows ``x[idx]`` along axis 0; gradients scatter-add back."""
    x = _t(x)
    idx = np.asarray(idx)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), vjp)


def embedding_lookup(table, ids):
    """``table[ids]`` for a ``[V x d]`` table and integer ids of any shape."""
    table = _t(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")
    return take(table, ids)


def gather_last(x, ids):
    """``x[..., ids]`` picking one entry of the last axis per leading index."""
    x = _t(x)
    ids = np.asarray(ids)[..., None]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, ids, g[..., None], axis=-1)
        return (full,)

    return _emit(np.take_along_axis(x.data, ids, axis=-1)[..., 0], (x,), vjp)


# ------------------------------------------------------------------- layers


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = _t(x), _t(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    m, (n, p) = _rows(x.shape), weight.shape
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (p,):
            raise ShapeError(f"linear: bias shape {bias.shape}, expected ({p},)")
    flops.record(linear_flops(m, n, p, bias is not None))
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y += bias.data

    def vjp(g):
        g2 = g.reshape(-1, p)
        gx = g @ wd.T
        gw = xd.reshape(-1, n).T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(y, inputs, vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least two features")
    flops.record(layer_norm_flops(_rows(x.shape), n))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return _emit(y, (x, gamma, beta), vjp)


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    x = _t(x)
    flops.record(softmax_flops(_rows(x.shape), x.shape[-1]))
    y = _softmax_np(x.data)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = _t(x)
    flops.record(softmax_flops(_rows(x.shape), x.shape[-1]))
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    return _emit(y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),))


def masked_attention(q, k, v, causal=False):
    """``softmax(q k^T / sqrt(d_h) + mask) v`` over ``[..., T, d_h]`` inputs."""
    q, k, v = _t(q), _t(k), _t(v)
    if not (q.shape == k.shape == v.shape) or q.ndim < 2:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must agree")
    T, dh = q.shape[-2:]
    n_mats = _rows(q.shape[:-1])
    flops.record(n_mats * attention_flops(T, dh, causal))
    scale_ = 1.0 / np.sqrt(dh)
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale_
    if causal:
        s = s + np.triu(np.full((T, T), MASK_VALUE), k=1)
    p = _softmax_np(s)
    out = p @ vd

    def vjp(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ g
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _emit(out, (q, k, v), vjp)


def split_heads(x, n_heads):
    """``[..., T, d] -> [..., n_heads, T, d / n_heads]``."""
    x = _t(x)
    *lead, T, d = x.shape
    x = reshape(x, (*lead, T, n_heads, d // n_heads))
    nl = len(lead)
    return transpose(x, (*range(nl), nl + 1, nl, nl + 2))


def merge_heads(x):
    """Inverse of :func:`split_heads`."""
    x = _t(x)
    *lead, H, T, dh = x.shape
    nl = len(lead)
    x = transpose(x, (*range(nl), nl + 1, nl, nl + 2))
    return reshape(x, (*lead, T, H * dh))


def spmv(matrix, x):
    """Constant sparse (or dense) matrix times a 1-D tensor."""
    x = _t(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmv: matrix {matrix.shape} incompatible with {x.shape}")
    nnz = getattr(matrix, "nnz", matrix.shape[0] * matrix.shape[1])
    flops.record(2 * nnz)
    return _emit(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),))


# ------------------------------------------------------ finite differences


def numerical_grad(f, x: np.ndarray, eps=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored)."""
    g = np.zeros_like(x, dtype=DTYPE)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = float(f())
        x[i] = orig - eps
        fm = float(f())
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, arrays, eps=1e-5):
    """Compare autodiff and central-difference gradients of ``fn``.

    ``fn`` maps tensors (one per array) to a scalar tensor. Returns the worst
    relative error over all inputs.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    leaves = [parameter(a) for a in arrays]
    with Graph() as g:
        loss = fn(*leaves)
    backward(g, loss)
    worst = 0.0
    for leaf in leaves:

        def f():
            with no_grad():
                return fn(*leaves).data

        num = numerical_grad(f, leaf.data, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(ana, num))
    return worst
