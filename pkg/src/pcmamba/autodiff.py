"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of operations the PCM layer, the selective scan and the toy
denoiser need are provided. Every op lives in ``OPS`` so the gradient-check
suite can verify it has covered all of them.

Usage::

    x = Tensor(np.random.randn(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(mul(x, x))
    grads = backward(loss, tape)
    grads[x]  # == 2 * x.data
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "GraphError", "NonFiniteError", "OPS", "backward",
    "finite_diff_grad", "no_grad_value",
]

OPS: dict[str, Callable] = {}


class GraphError(RuntimeError):
    """Raised when backward cannot reach the loss from the recorded tape."""


class NonFiniteError(ValueError):
    """Raised when an operation consumes NaN or Inf."""


class Tensor:
    """A dense float64 array plus a ``requires_grad`` flag.

    Treated as immutable: ops never write into ``data``. Optimisers rebind
    ``data`` between steps, never while a tape is live.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        raise TypeError("use take()/slice_axis() so indexing is recorded on the tape")


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed ops; activate with ``with Tape() as tape``.

    Single-threaded. Each thread has its own stack of active tapes, so batch
    elements can be differentiated on independent tapes in parallel.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{name}: non-finite input")


def _emit(name, out: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    tracked = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    tape = _active()
    if tracked and tape is not None:
        tape.records.append(_Record(name, inputs, result, bw))
    return result


def _register(fn):
    OPS[fn.__name__.rstrip("_")] = fn
    return fn


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

@_register
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@_register
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


@_register
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


@_register
def scale(a: Tensor, s: float) -> Tensor:
    _check_finite("scale", a.data)
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


@_register
def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a.data)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


@_register
def softplus(a: Tensor) -> Tensor:
    _check_finite("softplus", a.data)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = np.exp(-np.logaddexp(0.0, -x))
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


_GELU_K = math.sqrt(2.0 / math.pi)


@_register
def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    _check_finite("gelu", a.data)
    x = a.data
    x2 = x * x
    inner = _GELU_K * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _emit("gelu", out, (a,), bw)


# below this |z| the ZOH factor uses its series limit
PHI_SERIES_THRESHOLD = 1e-8


def phi_values(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, equal to 1 in the limit z -> 0."""
    small = np.abs(z) < PHI_SERIES_THRESHOLD
    if not small.any():
        return np.expm1(z) / z
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _phi_prime(z: np.ndarray, ez: np.ndarray | None = None, ph: np.ndarray | None = None) -> np.ndarray:
    """d/dz of phi = (exp(z) - phi(z)) / z, with a series near 0."""
    ez = np.exp(z) if ez is None else ez
    ph = phi_values(z) if ph is None else ph
    small = np.abs(z) < 1e-3
    if not small.any():
        return (ez - ph) / z
    safe = np.where(small, 1.0, z)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, (ez - ph) / safe)


@_register
def phi(a: Tensor) -> Tensor:
    """Zero-order-hold input factor (exp(z) - 1) / z."""
    _check_finite("phi", a.data)
    z = a.data
    return _emit("phi", phi_values(z), (a,), lambda g: (g * _phi_prime(z),))


# --- reductions and linear algebra -------------------------------------------

@_register
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("sum", a.data)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bw)


@_register
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


@_register
def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics with batch broadcasting; both operands >= 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), bw)


@_register
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its last (channel) axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs at least one channel")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_finite("layer_norm", x.data, gain.data, bias.data)
    c = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = inv / c * (c * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", out, (x, gain, bias), bw)


@_register
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (a,), bw)


# --- shape and indexing ------------------------------------------------------

@_register
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


@_register
def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


@_register
def flip(a: Tensor, axis: int) -> Tensor:
    return _emit("flip", np.flip(a.data, axis).copy(), (a,),
                 lambda g: (np.flip(g, axis).copy(),))


@_register
def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


@_register
def take(a: Tensor, index, axis: int) -> Tensor:
    """Gather along ``axis``; ``index`` is a 1-d integer array."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _emit("take", np.take(a.data, index, axis=axis), (a,), bw)


@_register
def paste(base: Tensor, index, values: Tensor, axis: int) -> Tensor:
    """Copy of ``base`` with positions ``index`` along ``axis`` replaced by ``values``.

    ``index`` must not repeat. Positions not in ``index`` are bit-identical to ``base``.
    """
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index, dtype=np.intp)
    if len(np.unique(index)) != len(index):
        raise ValueError("paste index must not contain duplicates")
    out = base.data.copy()
    np.moveaxis(out, axis, 0)[index] = np.moveaxis(values.data, axis, 0)

    def bw(g):
        gb = g.copy()
        np.moveaxis(gb, axis, 0)[index] = 0.0
        gv = np.take(g, index, axis=axis)
        return gb, gv

    return _emit("paste", out, (base, values), bw)


# --- linear recurrence ---------------------------------------------------------

def _time_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, 1, 0))


def _seq_time_major(decay: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = np.empty_like(u)
    state = np.zeros_like(u[0])
    for t in range(u.shape[0]):
        np.multiply(decay[t], state, out=state)
        np.add(state, u[t], out=state)
        h[t] = state
    return h


def scan_kernel_sequential(log_decay: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h_t = exp(log_decay_t) * h_{t-1} + u_t along axis 1, h_{-1} = 0."""
    h = _seq_time_major(np.exp(_time_major(log_decay)), _time_major(u))
    return np.moveaxis(h, 0, 1)


def scan_kernel_chunked(log_decay: np.ndarray, u: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence, evaluated segment-wise.

    Each segment of ``chunk`` steps maps an incoming state as h -> P*h + q. All
    segments are scanned at once from a zero state, then a sequential pass over
    the (P, q) summaries supplies each segment's incoming state.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    L = u.shape[1]
    if chunk >= L:
        return scan_kernel_sequential(log_decay, u)
    a, x = _time_major(log_decay), _time_major(u)
    rest = x.shape[1:]
    n_seg = -(-L // chunk)
    pad = n_seg * chunk - L
    if pad:
        widths = [(0, pad)] + [(0, 0)] * len(rest)
        a, x = np.pad(a, widths), np.pad(x, widths)
    # (chunk, n_seg, ...): position-within-segment major, so each step is contiguous
    a = np.ascontiguousarray(a.reshape((n_seg, chunk) + rest).swapaxes(0, 1))
    x = np.ascontiguousarray(x.reshape((n_seg, chunk) + rest).swapaxes(0, 1))

    cum = np.cumsum(a, axis=0)
    local = _seq_time_major(np.exp(a), x)

    seg_decay = np.exp(cum[-1])
    seg_in = np.zeros_like(x[0])
    carry = np.zeros_like(x[0, 0])
    for j in range(1, n_seg):
        carry = seg_decay[j - 1] * carry + local[-1, j - 1]
        seg_in[j] = carry

    h = local + np.exp(cum) * seg_in
    h = h.swapaxes(0, 1).reshape((n_seg * chunk,) + rest)[:L]
    return np.moveaxis(h, 0, 1)


def _run_kernel(log_decay, u, chunk):
    if chunk is None:
        return scan_kernel_sequential(log_decay, u)
    return scan_kernel_chunked(log_decay, u, chunk)


@_register
def linear_scan(log_decay: Tensor, u: Tensor, chunk: int | None = None) -> Tensor:
    """Diagonal linear recurrence along axis 1 (the token axis).

    ``chunk=None`` selects the sequential kernel, otherwise the segmented one.
    The backward pass is the same recurrence run in reverse time.
    """
    log_decay, u = as_tensor(log_decay), as_tensor(u)
    if log_decay.shape != u.shape:
        raise ValueError("log_decay and u must share a shape")
    if u.ndim < 2 or u.shape[1] < 1:
        raise ValueError("linear_scan needs a non-empty token axis")
    _check_finite("linear_scan", log_decay.data, u.data)
    ad, h = log_decay.data, _run_kernel(log_decay.data, u.data, chunk)

    def bw(g):
        # adjoint: lam_t = g_t + exp(a_{t+1}) * lam_{t+1}
        shifted = np.zeros_like(ad)
        shifted[:, :-1] = ad[:, 1:]
        lam = np.flip(_run_kernel(np.flip(shifted, 1), np.flip(g, 1), chunk), 1)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        return lam * np.exp(ad) * h_prev, lam.copy()

    return _emit("linear_scan", h, (log_decay, u), bw)


def _selective_forward(x, delta, A, B, C, chunk):
    dA = delta[..., None] * A
    ph = phi_values(dA)
    u = ph * (delta * x)[..., None]
    u *= B[:, :, None, :]
    if chunk is None:
        decay = np.exp(dA)
        h = np.moveaxis(_seq_time_major(_time_major(decay), _time_major(u)), 0, 1)
    else:
        decay = None
        h = scan_kernel_chunked(dA, u, chunk)
    y = np.einsum("blcn,bln->blc", h, C)
    return y, h, dA, ph, decay


def selective_scan_states(x, delta, A, B, C, chunk=None) -> np.ndarray:
    return _selective_forward(x, delta, A, B, C, chunk)[1]


@_register
def selective_scan(x, delta, A, B, C, chunk: int | None = None) -> Tensor:
    """Fused zero-order-hold selective scan without the skip term.

    Shapes: x, delta (b, L, c); A (c, N) negative; B, C (b, L, N). Returns
    y_t = <C_t, h_t> with h_t = exp(delta_t A) h_{t-1} + phi(delta_t A) delta_t B_t x_t.
    """
    x, delta, A, B, C = (as_tensor(v) for v in (x, delta, A, B, C))
    _check_finite("selective_scan", x.data, delta.data, A.data, B.data, C.data)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError("selective_scan needs a non-empty (b, L, c) input")
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    y, h, dA, ph, decay = _selective_forward(xd, dd, Ad, Bd, Cd, chunk)

    def bw(gy):
        gh = gy[..., None] * Cd[:, :, None, :]
        gC = np.einsum("blc,blcn->bln", gy, h)
        shifted = np.zeros_like(dA)
        shifted[:, :-1] = dA[:, 1:]
        lam = np.flip(_run_kernel(np.flip(shifted, 1), np.flip(gh, 1), chunk), 1)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        ez = np.exp(dA) if decay is None else decay
        g_dA = lam * ez * h_prev
        # u = ph * (delta * x) * B
        lamB = lam * Bd[:, :, None, :]
        dx = dd * xd
        g_ph = lamB * dx[..., None]
        g_dA += g_ph * _phi_prime(dA, ez, ph)
        s_phB = (lamB * ph).sum(-1)
        gx = s_phB * dd
        gdelta = s_phB * xd + (g_dA * Ad).sum(-1)
        gA = np.einsum("blcn,blc->cn", g_dA, dd)
        gB = np.einsum("blcn,blc->bln", lam * ph, dx)
        return gx, gdelta, gA, gB, gC

    return _emit("selective_scan", y, (x, delta, A, B, C), bw)


# --- reverse pass ------------------------------------------------------------

def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping leaf -> gradient for every ``requires_grad`` leaf the tape
    touched, plus every tensor in ``wrt`` (zero if it is off the path). Each
    leaf's ``.grad`` is set too.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise GraphError("loss was not produced on this tape (detached graph)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64).reshape(inp.shape)

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        result[leaf] = grads.get(key, np.zeros(leaf.shape))
    for t in wrt or ():
        if t not in result:
            result[t] = np.zeros(t.shape)
    for t, g in result.items():
        t.grad = g
    return result


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = no_grad_value(f(Tensor(plus.reshape(base.shape))))
        fm = no_grad_value(f(Tensor(minus.reshape(base.shape))))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("finite_diff_grad: f returned a non-finite value")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)


def no_grad_value(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
