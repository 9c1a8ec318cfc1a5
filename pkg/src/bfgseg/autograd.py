"""Reverse-mode differentiation over dense float64 numpy arrays.

A :class:`Tensor` records the primitive that produced it and a closure that
maps the output gradient to gradients of its inputs. :func:`backward` walks
the recorded graph once in reverse topological order.

Every primitive checks its forward value for NaN/Inf and raises
:class:`~bfgseg.errors.NumericError` naming the operation.
"""
import json

import numpy as np

from . import kernels
from .errors import ContractError, GraphError, NumericError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._consumed = False
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite value in leaf tensor {name or ''}".rstrip())

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, wrt=None):
        return backward(self, wrt)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return gather_rows(self, rows)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NumericError(f"non-finite value produced by {op} (inputs {shapes})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw, "div")


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient flows only where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor

    def bw(g):
        return (g * keep,)
    return _make(np.where(keep, a.data, floor), (a,), bw, "clamp_min")


# elementwise unary

def negate(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError(f"log of non-positive value (input {a.shape})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    """Square root. At exactly zero the gradient is taken as 0 (subgradient)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError(f"sqrt of negative value (input {a.shape})")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    return _make(out, (a,), bw, "sqrt")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


# linear algebra and shape

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ContractError(f"transpose: expected 2-D, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ContractError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return _make(out, tuple(tensors), bw, "concat")


# reductions

def sum_over_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean_over_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return div(sum_over_axis(a, axis, keepdims), float(count))


def max_over_axis(a, axis, keepdims=False):
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ContractError(f"max_over_axis: empty axis {axis} in {a.shape}")
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis), g, axis=axis)
        return (grad,)
    return _make(out, (a,), bw, "max")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)
    return _make(out, (a,), bw, "log_softmax")


def l2_row_norms(a):
    """Euclidean norm of each row of a 2-D tensor; zero rows get gradient 0."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ContractError(f"l2_row_norms: expected 2-D, got {a.shape}")
    out = np.sqrt(np.sum(a.data * a.data, axis=1))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return ((g / safe * (out > 0))[:, None] * a.data,)
    return _make(out, (a,), bw, "l2_row_norms")


# indexing

def gather_rows(a, indices):
    """Select rows ``a[indices]``; ``indices`` may be any integer array or a boolean mask."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.dtype == bool:
        if idx.shape != (a.shape[0],):
            raise ContractError(f"gather_rows: mask shape {idx.shape} vs rows {a.shape[0]}")
        idx = np.flatnonzero(idx)
    idx = idx.astype(np.int64, copy=False)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def bw(g):
        grad = np.zeros(a.shape)
        rest = a.shape[1:]
        kernels.scatter_add_rows(grad.reshape(a.shape[0], -1), idx.reshape(-1),
                                 g.reshape(idx.size, int(np.prod(rest, dtype=np.int64))))
        return (grad,)
    return _make(out, (a,), bw, "gather_rows")


def scatter_mean(a, indices, bins):
    """Row ``b`` of the output is the mean of the rows of ``a`` with ``indices == b``.

    Rows are summed in input order, so a single bin reproduces ``a.mean(axis=0)``.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ContractError(f"scatter_mean: indices {idx.shape} vs rows {a.shape}")
    counts = np.bincount(idx, minlength=bins) if idx.size else np.zeros(bins, int)
    if len(counts) > bins or np.any(counts[:bins] == 0):
        raise ContractError(f"scatter_mean: empty or out-of-range bin (counts {counts.tolist()})")
    members = [np.flatnonzero(idx == b) for b in range(bins)]
    out = np.stack([a.data[m].sum(axis=0) for m in members]) / counts[:, None]

    def bw(g):
        return ((g / counts[:, None])[idx],)
    return _make(out, (a,), bw, "scatter_mean")


def stop_gradient(a):
    """Same values, cut out of the graph."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# backward pass

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a dict mapping each leaf tensor that requires grad to its gradient.
    Leaves listed in ``wrt`` but not reachable from ``loss`` get zero gradients.
    A graph can be differentiated once; build a new forward pass to go again.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward: loss must be a scalar tensor, got shape {shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                leaves[id(node)] = node
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                elif node.grad is None:
                    node.grad = np.zeros_like(node.data)
            continue
        if node._consumed:
            raise GraphError(f"backward: node {node.op} was already differentiated")
        node._consumed = True
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    loss._consumed = True
    for leaf in wrt or ():
        if id(leaf) not in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaves[id(leaf)] = leaf
    return {leaf: leaf.grad for leaf in leaves.values()}


# checkpoint container

CHECKPOINT_FORMAT = "bfgseg-checkpoint-v1"


def save_checkpoint(path, arrays, meta=None):
    """Write named float64 arrays plus a JSON metadata record to an ``.npz`` file.

    Layout: one npz member per array, keyed by its dotted name, and one
    ``__meta__`` member holding UTF-8 JSON bytes (uint8) with at least
    ``{"format": "bfgseg-checkpoint-v1"}``.
    """
    meta = dict(meta or {})
    meta["format"] = CHECKPOINT_FORMAT
    payload = {name: np.asarray(v, dtype=np.float64) for name, v in arrays.items()}
    if "__meta__" in payload:
        raise ContractError("checkpoint: '__meta__' is a reserved name")
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ContractError(f"checkpoint {path}: missing __meta__ record")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"checkpoint {path}: unsupported format {meta.get('format')!r}")
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    return arrays, meta


class Adam:
    """Adaptive moment estimation with per-group learning rates.

    ``groups`` is a list of ``(params, lr)`` where params is a dict name -> Tensor.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(dict(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        for params, _ in self.groups:
            for name, p in params.items():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params.values():
                p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for params, lr in self.groups:
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad
                self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
                self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
                if lr == 0.0:
                    continue
                m_hat = self.m[name] / c1
                v_hat = self.v[name] / c2
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t):
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()
        self.t = int(t)
