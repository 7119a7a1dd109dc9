"""Small reverse-mode autodiff engine on top of numpy.

Tensors are float64 arrays.  Operations executed inside an active
:class:`Graph` are recorded on its tape when any input requires a gradient;
outside a graph nothing is recorded, which is how inference runs.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (w * w).sum()
    ...     g.backward(loss)
    >>> w.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

import json
import struct
import threading
import zlib
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "NonFiniteError", "GraphError",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "relu", "exp",
    "log", "square", "sqrt", "sum", "mean", "max", "concat", "stack",
    "reshape", "broadcast_to", "gather", "index", "norm", "layer_norm",
    "reparameterize", "AdamState", "Adam", "adam_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_local = threading.local()


def _active_graph():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_graph")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None   # (backward_fn, inputs) for recorded results
        self._graph = None

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
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._graph is None:
            raise GraphError("tensor was not produced inside a Graph")
        self._graph.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @staticmethod
    def _wrap(arr):
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        t._graph = None
        return t

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, key): return index(self, key)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=-1): return max(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)


class Graph:
    """Tape of recorded operations.

    Nodes are appended as operations execute, so the tape is already in
    topological order; ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        out._node = (backward_fn, inputs)
        out._graph = self
        out.requires_grad = True
        self.nodes.append(out)

    def backward(self, loss):
        if loss._graph is not self:
            raise GraphError("loss was not produced by this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            backward_fn, inputs = out._node
            in_grads = backward_fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    if not _finite(gi):
                        raise NonFiniteError(f"non-finite gradient for {t.name or 'leaf'}")
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.release()

    def release(self):
        for out in self.nodes:
            out._node = None
        self.nodes = []


def _t(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _finite(arr):
    # a single reduction propagates any nan/inf
    return bool(np.isfinite(np.sum(arr)))


def _result(arr, inputs, backward_fn):
    if not _finite(arr):
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor._wrap(arr)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise

def add(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = _t(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = _t(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = _t(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    a = _t(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    """Square root; the gradient at exactly zero is taken as zero."""
    a = _t(a)
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _result(out, (a,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


# linear algebra

def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None):
    """Shared affine map over the last axis: ``x @ w + b``.

    ``x`` may carry any number of leading (batch, point) axes.
    """
    x, w = _t(x), _t(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    inputs = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        inputs = (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, inputs, backward)


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(a, axis=None, keepdims=False):
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def max(a, axis=-1):
    """Max-reduction along one axis; the gradient goes to the argmax entry."""
    a = _t(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), backward)


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    a = _t(a)
    axis = axis % a.ndim
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return _result(out, (a,), backward)


def layer_norm(a, eps=1e-5):
    """Normalize each feature vector (last axis) to zero mean, unit variance."""
    a = _t(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (a,), backward)


# structure

def concat(tensors, axis=-1):
    ts = [_t(t) for t in tensors]
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: np.split(g, splits, axis=axis))


def stack(tensors, axis=-1):
    ts = [_t(t) for t in tensors]
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise ShapeError(f"stack: shapes differ {[x.shape for x in ts]}")
    axis = axis % (len(shape) + 1)
    return _result(np.stack([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))])


def reshape(a, shape):
    a = _t(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = _t(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def index(a, key):
    a = _t(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        if _is_basic(key):
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _result(np.array(out), (a,), backward)


def _is_basic(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def gather(a, idx, axis):
    """``np.take_along_axis`` with a scatter-add backward."""
    a = _t(a)
    idx = np.asarray(idx)
    axis = axis % a.ndim
    try:
        out = np.take_along_axis(a.data, idx, axis=axis)
    except (ValueError, IndexError) as err:
        raise ShapeError(f"gather: {err}") from None

    def backward(g):
        ga = np.zeros_like(a.data)
        _scatter_add(ga, idx, g, axis)
        return (ga,)

    return _result(out, (a,), backward)


def _scatter_add(target, idx, values, axis):
    idx = np.broadcast_to(idx, values.shape)
    grids = list(np.indices(values.shape, sparse=True))
    grids[axis] = idx
    np.add.at(target, tuple(grids), values)


def reparameterize(mu, logvar, noise):
    """Differentiable Gaussian sample ``mu + exp(logvar / 2) * noise``."""
    mu, logvar, noise = _t(mu), _t(logvar), _t(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape}")
    return mu + exp(logvar * 0.5) * noise


# optimizer

class AdamState:
    def __init__(self, shapes, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-6):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.step = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay


def adam_step(params, grads, state):
    """One Adam update in place, with decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step: non-finite gradient")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
    return params, state


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, tensors, **kwargs):
        self.tensors = list(tensors)
        self.state = AdamState([t.shape for t in self.tensors], **kwargs)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self):
        adam_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state)


# checkpoints

_CKPT_MAGIC = b"CASSCKPT"
_CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, params, meta=None):
    """Write named float64 arrays plus a JSON header to ``path``.

    Layout: magic, u32 version, u32 header length, JSON header, raw '<f8'
    payload in header order, u32 crc32 of everything before it.
    """
    names = list(params)
    arrays = [np.ascontiguousarray(np.asarray(getattr(params[n], "data", params[n])), dtype="<f8")
              for n in names]
    header = {
        "meta": meta or {},
        "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join([_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(hbytes)), hbytes]
                    + [a.tobytes() for a in arrays])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Return ``(params, meta)`` where params maps names to float64 arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[16:16 + hlen])
    except ValueError as err:
        raise CheckpointError(f"{path}: bad header") from err
    offset = 16 + hlen
    params = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointError(f"{path}: payload size mismatch")
    return params, header["meta"]
