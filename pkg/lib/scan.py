"""
Complex element-wise linear recurrence

    h_t = lambda_t * exp(i*theta_t) * h_{t-1} + b_t

computed three ways (fused sequential loop, work-efficient parallel scan over
affine maps, materialized token mixing matrix) plus its exact backward pass.
Complex values are carried as real/imaginary planes. Arrays put time on axis
-2 and hidden width on axis -1; any leading axes are independent batch lanes.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lib.errors import ContractError, DimensionError, SizeError
from lib.tensor import emit

logger = logging.getLogger(__name__)

DEFAULT_PARALLEL_THRESHOLD = 512
DEFAULT_MATERIALIZE_CAP = 512


@dataclass
class ComplexSeq:
    """Length-n, width-d complex sequence as two planes"""
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"ComplexSeq planes differ: re{list(self.re.shape)} im{list(self.im.shape)}")

    @property
    def n(self):
        return self.re.shape[-2]

    @property
    def d(self):
        return self.re.shape[-1]

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def magnitude(self):
        return np.hypot(self.re, self.im)


@dataclass
class DecaySeq:
    """
    Magnitudes lambda (..., n, d) in [0, 1] and phases theta. theta is either
    shared across time with shape (d,), or per step with lambda's shape.
    """
    lam: np.ndarray
    theta: np.ndarray

    @property
    def time_shared(self):
        return self.theta.ndim == 1


@dataclass
class ScanElement:
    """The affine map h -> a*h + b over complex state, as planes"""
    a_re: np.ndarray
    a_im: np.ndarray
    b_re: np.ndarray
    b_im: np.ndarray

    @classmethod
    def identity(cls, shape, dtype=np.float64):
        return cls(
            np.ones(shape, dtype=dtype),
            np.zeros(shape, dtype=dtype),
            np.zeros(shape, dtype=dtype),
            np.zeros(shape, dtype=dtype),
        )

    def apply(self, h_re, h_im):
        return (
            self.a_re * h_re - self.a_im * h_im + self.b_re,
            self.a_re * h_im + self.a_im * h_re + self.b_im,
        )


def _check_decay(decay, c):
    if decay.lam.shape != c.re.shape:
        raise DimensionError(f"lambda{list(decay.lam.shape)} does not match input{list(c.re.shape)}")
    if decay.theta.shape not in ((c.d,), c.re.shape):
        raise DimensionError(f"theta{list(decay.theta.shape)} does not match input{list(c.re.shape)}")
    if decay.lam.size:
        slack = 4 * np.finfo(decay.lam.dtype).eps
        low, high = decay.lam.min(), decay.lam.max()
        if low < -slack or high > 1.0 + slack:
            raise ContractError(f"lambda must lie in [0, 1], got range [{low}, {high}]")


def make_elements(decay, c):
    """a_t = lambda_t * exp(i*theta), b_t = (1 - lambda_t) * c_t"""
    _check_decay(decay, c)
    lam = decay.lam
    weight = 1.0 - lam
    return ScanElement(
        lam * np.cos(decay.theta),
        lam * np.sin(decay.theta),
        weight * c.re,
        weight * c.im,
    )


def compose(later, earlier):
    """The map 'apply earlier, then later'"""
    a_re = later.a_re * earlier.a_re - later.a_im * earlier.a_im
    a_im = later.a_re * earlier.a_im + later.a_im * earlier.a_re
    b_re = later.a_re * earlier.b_re - later.a_im * earlier.b_im + later.b_re
    b_im = later.a_re * earlier.b_im + later.a_im * earlier.b_re + later.b_im
    return ScanElement(a_re, a_im, b_re, b_im)


# -- recurrence kernels over raw coefficient planes -------------------------

def _rotation(lam, theta):
    return lam * np.cos(theta), lam * np.sin(theta)


def _sequential(a_re, a_im, b_re, b_im, h0=None):
    n = a_re.shape[-2]
    out_re = np.empty_like(b_re)
    out_im = np.empty_like(b_im)
    if h0 is None:
        h_re = np.zeros(b_re[..., 0, :].shape, dtype=b_re.dtype)
        h_im = np.zeros_like(h_re)
    else:
        h_re, h_im = h0
    for t in range(n):
        ar, ai = a_re[..., t, :], a_im[..., t, :]
        h_re, h_im = ar * h_re - ai * h_im + b_re[..., t, :], ar * h_im + ai * h_re + b_im[..., t, :]
        out_re[..., t, :] = h_re
        out_im[..., t, :] = h_im
    return out_re, out_im


def _blelloch(a_re, a_im, b_re, b_im, h0=None):
    n = a_re.shape[-2]
    size = 1
    while size < n:
        size *= 2

    lead = a_re.shape[:-2] + (size, a_re.shape[-1])
    tree = ScanElement.identity(lead, dtype=b_re.dtype)
    tree.a_re[..., :n, :] = a_re
    tree.a_im[..., :n, :] = a_im
    tree.b_re[..., :n, :] = b_re
    tree.b_im[..., :n, :] = b_im
    original = ScanElement(*(p.copy() for p in (tree.a_re, tree.a_im, tree.b_re, tree.b_im)))

    def view(index):
        return ScanElement(tree.a_re[..., index, :], tree.a_im[..., index, :],
                           tree.b_re[..., index, :], tree.b_im[..., index, :])

    def store(index, element):
        tree.a_re[..., index, :] = element.a_re
        tree.a_im[..., index, :] = element.a_im
        tree.b_re[..., index, :] = element.b_re
        tree.b_im[..., index, :] = element.b_im

    # up-sweep: each right child absorbs its left sibling
    step = 2
    while step <= size:
        left = slice(step // 2 - 1, size, step)
        right = slice(step - 1, size, step)
        store(right, compose(view(right), view(left)))
        step *= 2

    # down-sweep to the exclusive prefix
    store(slice(size - 1, size), ScanElement.identity(lead[:-2] + (1, lead[-1]), dtype=b_re.dtype))
    step = size
    while step >= 2:
        left = slice(step // 2 - 1, size, step)
        right = slice(step - 1, size, step)
        carried = view(left)
        carried = ScanElement(*(p.copy() for p in (carried.a_re, carried.a_im, carried.b_re, carried.b_im)))
        prefix = view(right)
        store(left, prefix)
        store(right, compose(carried, view(left)))
        step //= 2

    inclusive = compose(original, tree)
    if h0 is None:
        return inclusive.b_re[..., :n, :], inclusive.b_im[..., :n, :]
    h_re, h_im = h0
    h_re = np.expand_dims(h_re, -2)
    h_im = np.expand_dims(h_im, -2)
    out_re, out_im = inclusive.apply(h_re, h_im)
    return out_re[..., :n, :], out_im[..., :n, :]


def _coefficients(decay, c):
    """Rotation planes and the tied input term (1 - lambda) * c"""
    _check_decay(decay, c)
    a_re, a_im = _rotation(decay.lam, decay.theta)
    weight = 1.0 - decay.lam
    return a_re, a_im, weight * c.re, weight * c.im


def sequential_scan(decay, c, h0=None):
    """All h_1..h_n of the tied recurrence in one fused pass over t"""
    out_re, out_im = _sequential(*_coefficients(decay, c), h0=h0)
    return ComplexSeq(out_re, out_im)


def parallel_scan(decay, c, h0=None):
    """Inclusive prefix composition of the scan elements via up/down-sweep"""
    if c.n < 1:
        raise ContractError("parallel_scan needs at least one time step")
    out_re, out_im = _blelloch(*_coefficients(decay, c), h0=h0)
    return ComplexSeq(out_re, out_im)


def run_scan(decay, c, h0=None, parallel_threshold=DEFAULT_PARALLEL_THRESHOLD):
    """Sequential kernel by default, parallel scan above the length threshold"""
    if c.n > parallel_threshold:
        return parallel_scan(decay, c, h0=h0)
    return sequential_scan(decay, c, h0=h0)


# -- mixing-matrix view -----------------------------------------------------

@dataclass
class MixingMatrix:
    """
    Per hidden dimension, the lower-triangular token mixing matrix
    A = Lambda * Theta, each of shape (d, n, n) indexed [dim, t, s].
    """
    lam: np.ndarray
    theta_re: np.ndarray
    theta_im: np.ndarray

    @property
    def re(self):
        return self.lam * self.theta_re

    @property
    def im(self):
        return self.lam * self.theta_im

    def apply(self, c):
        """H = A C for a single (n, d) complex sequence"""
        a_re, a_im = self.re, self.im
        h_re = np.einsum('dts,sd->td', a_re, c.re) - np.einsum('dts,sd->td', a_im, c.im)
        h_im = np.einsum('dts,sd->td', a_re, c.im) + np.einsum('dts,sd->td', a_im, c.re)
        return ComplexSeq(h_re, h_im)


def mixing_matrix(decay, n, cap=DEFAULT_MATERIALIZE_CAP):
    """
    Materialize Lambda[t][s] = (1 - lambda_s) * prod_{k=s+1..t} lambda_k and
    Theta[t][s] = exp(i * phase(s -> t)) for one (n, d) decay sequence.
    """
    if n > cap:
        raise SizeError(f"mixing matrix of length {n} exceeds the materialization cap {cap}")
    lam = decay.lam
    if lam.ndim != 2 or lam.shape[0] != n:
        raise DimensionError(f"mixing_matrix expects lambda of shape ({n}, d), got {list(lam.shape)}")
    d = lam.shape[1]
    dtype = lam.dtype

    big_lambda = np.zeros((d, n, n), dtype=dtype)
    for s in range(n):
        weight = 1.0 - lam[s]
        big_lambda[:, s, s] = weight
        if s + 1 < n:
            big_lambda[:, s + 1:, s] = (weight[None, :] * np.cumprod(lam[s + 1:], axis=0)).T

    t_idx, s_idx = np.tril_indices(n)
    if decay.time_shared:
        phase = (t_idx - s_idx)[None, :] * decay.theta[:, None]
    else:
        running = np.cumsum(decay.theta, axis=0)
        phase = (running[t_idx] - running[s_idx]).T
    theta_re = np.zeros((d, n, n), dtype=dtype)
    theta_im = np.zeros((d, n, n), dtype=dtype)
    theta_re[:, t_idx, s_idx] = np.cos(phase)
    theta_im[:, t_idx, s_idx] = np.sin(phase)
    return MixingMatrix(big_lambda, theta_re, theta_im)


def toeplitz_deviation(mix):
    """Largest spread of Theta entries along any lower diagonal"""
    d, n, _ = mix.theta_re.shape
    worst = 0.0
    for offset in range(n):
        t = np.arange(offset, n)
        s = t - offset
        for plane in (mix.theta_re, mix.theta_im):
            diagonal = plane[:, t, s]
            spread = float((diagonal.max(axis=1) - diagonal.min(axis=1)).max())
            worst = max(worst, spread)
    return worst


def export_mixing_csv(mix, dims, out_dir, prefix='mixing'):
    """
    One CSV per hidden dimension: a row per target step t, and for each
    source step s the columns re_s, im_s of A[t][s].
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a_re, a_im = mix.re, mix.im
    n = a_re.shape[1]
    written = []
    for dim in dims:
        if not 0 <= dim < a_re.shape[0]:
            raise DimensionError(f"hidden dimension {dim} outside width {a_re.shape[0]}")
        path = out_dir / f"{prefix}_dim{dim}.csv"
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            header = ['t']
            for s in range(n):
                header.extend([f're_{s}', f'im_{s}'])
            writer.writerow(header)
            for t in range(n):
                row = [t]
                for s in range(n):
                    row.extend([repr(float(a_re[dim, t, s])), repr(float(a_im[dim, t, s]))])
                writer.writerow(row)
        written.append(path)
        logger.info(f"Mixing matrix for dim {dim} written to {path}")
    return written


# -- backward ---------------------------------------------------------------

def _reduce_theta(grad, theta_shape):
    if len(theta_shape) == 1:
        return grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    return grad


def _recurrence_backward(lam, theta, h_re, h_im, g_re, g_im, h0=None):
    """
    Reverse-time adjoint accumulation for h_t = a_t h_{t-1} + b_t.
    Returns gradients for lambda, theta (same shape as given) and b planes.
    """
    a_re, a_im = _rotation(lam, theta)
    n = lam.shape[-2]
    adj_re = np.empty_like(g_re)
    adj_im = np.empty_like(g_im)
    carry_re = np.zeros_like(g_re[..., 0, :])
    carry_im = np.zeros_like(carry_re)
    for t in range(n - 1, -1, -1):
        carry_re = g_re[..., t, :] + carry_re
        carry_im = g_im[..., t, :] + carry_im
        adj_re[..., t, :] = carry_re
        adj_im[..., t, :] = carry_im
        ar = a_re[..., t, :]
        ai = a_im[..., t, :]
        # conjugate rotation-scaling hands the adjoint to h_{t-1}
        carry_re, carry_im = ar * carry_re + ai * carry_im, ar * carry_im - ai * carry_re

    prev_re = np.zeros_like(h_re)
    prev_im = np.zeros_like(h_im)
    prev_re[..., 1:, :] = h_re[..., :-1, :]
    prev_im[..., 1:, :] = h_im[..., :-1, :]
    if h0 is not None:
        prev_re[..., 0, :] = h0[0]
        prev_im[..., 0, :] = h0[1]

    # d loss / d a_t = adj_t * conj(h_{t-1})
    ga_re = adj_re * prev_re + adj_im * prev_im
    ga_im = adj_im * prev_re - adj_re * prev_im
    cos, sin = np.cos(theta), np.sin(theta)
    grad_lam = ga_re * cos + ga_im * sin
    grad_theta = lam * (ga_im * cos - ga_re * sin)
    return grad_lam, _reduce_theta(grad_theta, theta.shape), adj_re, adj_im


def scan_backward(decay, c, h, grad_h, h0=None):
    """
    Gradients of the tied recurrence with respect to lambda, theta and c,
    given the stored forward output h and the output adjoint grad_h.
    """
    _check_decay(decay, c)
    if h.re.shape != c.re.shape or grad_h.re.shape != c.re.shape:
        raise DimensionError("scan_backward: forward record and adjoint must match the input shape")
    grad_lam, grad_theta, adj_re, adj_im = _recurrence_backward(
        decay.lam, decay.theta, h.re, h.im, grad_h.re, grad_h.im, h0=h0
    )
    weight = 1.0 - decay.lam
    grad_c = ComplexSeq(weight * adj_re, weight * adj_im)
    grad_lam = grad_lam - (adj_re * c.re + adj_im * c.im)
    return grad_lam, grad_theta, grad_c


# -- differentiable primitive -----------------------------------------------

def recurrence(lam, theta, b_re, b_im, batch, parallel_threshold=DEFAULT_PARALLEL_THRESHOLD):
    """
    Tape primitive over tensors. lam, b_re, b_im are (batch*n, d) with rows
    ordered batch-major; theta is (d,) or (batch*n, d). The input weighting
    of b is left to ordinary primitives so every gate variant shares this
    kernel. Returns a (batch*n, 2d) tensor [Re(h) | Im(h)].
    """
    rows, d = lam.shape
    if rows % batch:
        raise DimensionError(f"recurrence: {rows} rows do not split into {batch} sequences")
    n = rows // batch
    for name, t in (('b_re', b_re), ('b_im', b_im)):
        if t.shape != lam.shape:
            raise DimensionError(f"recurrence: {name}{list(t.shape)} does not match lambda{list(lam.shape)}")

    def lanes(array):
        return array.reshape(batch, n, d)

    lam_v = lanes(lam.values)
    theta_v = theta.values if theta.values.ndim == 1 else lanes(theta.values)
    decay = DecaySeq(lam_v, theta_v)
    c = ComplexSeq(lanes(b_re.values), lanes(b_im.values))
    _check_decay(decay, c)
    a_re, a_im = _rotation(lam_v, theta_v)
    if n > parallel_threshold:
        h_re, h_im = _blelloch(a_re, a_im, c.re, c.im)
    else:
        h_re, h_im = _sequential(a_re, a_im, c.re, c.im)
    out = np.concatenate([h_re.reshape(rows, d), h_im.reshape(rows, d)], axis=1)

    def vjp(g):
        g_re = lanes(g[:, :d])
        g_im = lanes(g[:, d:])
        grad_lam, grad_theta, adj_re, adj_im = _recurrence_backward(lam_v, theta_v, h_re, h_im, g_re, g_im)
        if theta.values.ndim != 1:
            grad_theta = grad_theta.reshape(rows, d)
        return [grad_lam.reshape(rows, d), grad_theta, adj_re.reshape(rows, d), adj_im.reshape(rows, d)]

    return emit('recurrence', [lam, theta, b_re, b_im], out, vjp)
