"""
Dense real-valued tensors with a recording tape for reverse-mode differentiation.

Complex quantities never appear here: callers carry them as two real planes.
Primitives record themselves on the active tape only when a tape is open and
at least one operand requires a gradient.
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from lib.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

PRECISIONS = {
    'f32': np.float32,
    'f64': np.float64,
}

_local = threading.local()


def _state():
    if not hasattr(_local, 'dtype'):
        _local.dtype = np.float64
        _local.tapes = []
        _local.faults = {}
    return _local


def get_dtype():
    """Current floating dtype for newly created tensors"""
    return _state().dtype


def set_precision(name):
    """Switch the calling thread to 'f32' or 'f64'"""
    if name not in PRECISIONS:
        raise ContractError(f"unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    _state().dtype = PRECISIONS[name]
    logger.debug(f"Precision set to {name}")


def get_precision():
    dtype = get_dtype()
    for name, value in PRECISIONS.items():
        if value == dtype:
            return name
    return 'f64'


@contextmanager
def precision(name):
    """Temporarily switch precision for the calling thread"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextmanager
def fault_injection(op, input_index, scale):
    """
    Scale the vector-Jacobian product that primitive `op` sends to its
    input number `input_index`. Used to show that gradient checks catch a
    wrong backward term.
    """
    faults = _state().faults
    faults[(op, input_index)] = scale
    try:
        yield
    finally:
        faults.pop((op, input_index), None)


class Tensor:
    """Row-major dense array with an optional gradient buffer"""

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, values, requires_grad):
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def size(self):
        return int(self.values.size)

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        if self.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def numpy(self):
        return self.values

    def __repr__(self):
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)


class Node:
    """One executed primitive: its operands, its result and its VJP"""

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """
    Ordered record of executed primitives. Recording order is a topological
    order of the computation, so backward simply walks it in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(self, loss)


def _active_tape():
    tapes = _state().tapes
    return tapes[-1] if tapes else None


def emit(op, inputs, values, vjp):
    """
    Wrap `values` as the result of primitive `op` and record it on the active
    tape. `vjp(grad_out)` returns one gradient (or None) per entry of `inputs`.
    """
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, tracked)
    if tracked:
        node = Node(op, inputs, out, vjp)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(tape, loss):
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every leaf tensor that requires
    a gradient. Calling twice without `zero_grad` accumulates.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node not in tape.nodes:
        raise ContractError("loss was not produced on this tape")

    faults = _state().faults
    adjoints = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        grad_out = adjoints.pop(id(node.output), None)
        if grad_out is None:
            continue
        grads = node.vjp(grad_out)
        for index, (tensor, grad) in enumerate(zip(node.inputs, grads)):
            if grad is None or not tensor.requires_grad:
                continue
            scale = faults.get((node.op, index))
            if scale is not None:
                grad = grad * scale
            if grad.shape != tensor.values.shape:
                raise DimensionError(
                    f"{node.op} backward produced gradient {grad.shape} for operand {tensor.values.shape}"
                )
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.values)
                tensor.grad += grad
            else:
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(op, *arrays):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericError(op, f"{op}: input contains NaN or Inf")


def _require_2d(op, t):
    if t.values.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-d tensor, got shape {t.shape}")


# -- linear ---------------------------------------------------------------

def affine(x, W, b=None):
    """out[i][j] = sum_k x[i][k] * W[k][j] + b[j]"""
    _require_2d('affine', x)
    _require_2d('affine', W)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x{list(x.shape)} does not match W{list(W.shape)}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias{list(b.shape)} does not match W{list(W.shape)}")
    _check_finite('affine', x.values, W.values)

    xv, Wv = x.values, W.values
    out = xv @ Wv
    if b is not None:
        out = out + b.values

    def vjp(g):
        grads = [g @ Wv.T, xv.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = [x, W] if b is None else [x, W, b]
    return emit('affine', inputs, out, vjp)


# -- pointwise ------------------------------------------------------------

def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _binary_operands(op, a, b):
    a_scalar = isinstance(a, (int, float))
    b_scalar = isinstance(b, (int, float))
    if a_scalar and b_scalar:
        raise ContractError(f"{op}: at least one operand must be a tensor")
    if not a_scalar and not b_scalar and a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")
    return a_scalar, b_scalar


def sigmoid(x):
    s = _sigmoid(x.values)
    return emit('sigmoid', [x], s, lambda g: [g * s * (1.0 - s)])


def silu(x):
    z = x.values
    s = _sigmoid(z)
    return emit('silu', [x], z * s, lambda g: [g * s * (1.0 + z * (1.0 - s))])


def exp(x):
    e = np.exp(x.values)
    return emit('exp', [x], e, lambda g: [g * e])


def mul(a, b):
    a_scalar, b_scalar = _binary_operands('mul', a, b)
    if a_scalar:
        return emit('mul', [b], a * b.values, lambda g: [g * a])
    if b_scalar:
        return emit('mul', [a], a.values * b, lambda g: [g * b])
    av, bv = a.values, b.values
    return emit('mul', [a, b], av * bv, lambda g: [g * bv, g * av])


def add(a, b):
    a_scalar, b_scalar = _binary_operands('add', a, b)
    if a_scalar:
        return emit('add', [b], a + b.values, lambda g: [g])
    if b_scalar:
        return emit('add', [a], a.values + b, lambda g: [g])
    return emit('add', [a, b], a.values + b.values, lambda g: [g, g])


def sub(a, b):
    a_scalar, b_scalar = _binary_operands('sub', a, b)
    if a_scalar:
        return emit('sub', [b], a - b.values, lambda g: [-g])
    if b_scalar:
        return emit('sub', [a], a.values - b, lambda g: [g])
    return emit('sub', [a, b], a.values - b.values, lambda g: [g, -g])


_POINTWISE = {
    'sigmoid': sigmoid,
    'silu': silu,
    'exp': exp,
    'mul': mul,
    'add': add,
    'sub': sub,
}


def pointwise(name, *args):
    """Dispatch an elementwise primitive by name"""
    if name not in _POINTWISE:
        raise ContractError(f"unknown pointwise primitive '{name}'")
    return _POINTWISE[name](*args)


# -- layer-axis primitives for the lower-bound schedule ---------------------

def softmax_dim0(X):
    """Column-wise softmax over the first axis, max-subtracted"""
    _require_2d('softmax_dim0', X)
    _check_finite('softmax_dim0', X.values)
    shifted = X.values - X.values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    P = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        return [P * (g - (g * P).sum(axis=0, keepdims=True))]

    return emit('softmax_dim0', [X], P, vjp)


def cumsum_shifted_dim0(P):
    """out[k] = sum_{i<=k} P[i] - P[0]; the first row is exactly zero"""
    _require_2d('cumsum_shifted_dim0', P)
    out = np.cumsum(P.values, axis=0) - P.values[0]
    out[0] = 0.0

    def vjp(g):
        grad = np.cumsum(g[::-1], axis=0)[::-1].copy()
        grad[0] = 0.0
        return [grad]

    return emit('cumsum_shifted_dim0', [P], out, vjp)


def flip_rows(X):
    _require_2d('flip_rows', X)
    return emit('flip_rows', [X], X.values[::-1].copy(), lambda g: [g[::-1].copy()])


def take_row(X, k):
    _require_2d('take_row', X)
    if not 0 <= k < X.shape[0]:
        raise DimensionError(f"take_row: row {k} outside shape {list(X.shape)}")
    shape = X.values.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        grad[k] = g
        return [grad]

    return emit('take_row', [X], X.values[k].copy(), vjp)


def tile_rows(v, n):
    """Repeat a vector as n identical rows (the only broadcast the core offers)"""
    if v.values.ndim != 1:
        raise DimensionError(f"tile_rows: expected a vector, got shape {v.shape}")
    out = np.tile(v.values, (n, 1))
    return emit('tile_rows', [v], out, lambda g: [g.sum(axis=0)])


# -- normalisation --------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row standardisation followed by an affine rescale"""
    _require_2d('layer_norm', x)
    q = x.shape[1]
    if q < 2:
        raise DimensionError(f"layer_norm: needs at least 2 columns, got shape {list(x.shape)}")
    if gain.shape != (q,) or bias.shape != (q,):
        raise DimensionError(
            f"layer_norm: gain{list(gain.shape)}/bias{list(bias.shape)} do not match x{list(x.shape)}"
        )
    _check_finite('layer_norm', x.values)

    centred = x.values - x.values.mean(axis=1, keepdims=True)
    var = (centred * centred).mean(axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    # zero-variance rows with eps=0 normalise to zero rather than NaN
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = centred * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def vjp(g):
        gxhat = g * gv
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return [gx, (g * xhat).sum(axis=0), g.sum(axis=0)]

    return emit('layer_norm', [x, gain, bias], out, vjp)


# -- shape plumbing -------------------------------------------------------

def concat_cols(a, b):
    _require_2d('concat_cols', a)
    _require_2d('concat_cols', b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {list(a.shape)} vs {list(b.shape)}")
    split = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)
    return emit('concat_cols', [a, b], out, lambda g: [g[:, :split].copy(), g[:, split:].copy()])


def take_cols(x, start, stop):
    _require_2d('take_cols', x)
    shape = x.values.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        grad[:, start:stop] = g
        return [grad]

    return emit('take_cols', [x], x.values[:, start:stop].copy(), vjp)


def embedding(W, ids):
    """Gather rows of W for integer ids"""
    _require_2d('embedding', W)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= W.shape[0]):
        raise ContractError(f"embedding: token id outside [0, {W.shape[0]})")
    shape = W.values.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, ids, g)
        return [grad]

    return emit('embedding', [W], W.values[ids], vjp)


def sum_all(x):
    shape = x.values.shape
    return emit('sum_all', [x], np.array(x.values.sum()), lambda g: [np.full(shape, g, dtype=x.values.dtype)])


def mean_all(x):
    shape = x.values.shape
    n = x.values.size
    return emit('mean_all', [x], np.array(x.values.mean()), lambda g: [np.full(shape, g / n, dtype=x.values.dtype)])
