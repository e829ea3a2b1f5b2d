"""Selective state-space scan (diagonal, input-dependent B, C and step size)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import param


@dataclass
class SsmParams:
    A_log: Tensor      # (c, N); A = -exp(A_log)
    W_B: Tensor        # (c, N)
    W_C: Tensor        # (c, N)
    W_delta: Tensor    # (c, c)
    delta_bias: Tensor # (c,)
    D: Tensor          # (c,)

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, d_state: int, std: float = 0.02,
             dt_min: float = 1e-3, dt_max: float = 0.1) -> "SsmParams":
        """S4D-real style init: -A spans [1, d_state] log-uniformly, D = 1.

        The step-size bias is the inverse softplus of a log-uniform draw in
        [dt_min, dt_max], so early steps keep a long memory.
        """
        a = np.log(np.geomspace(1.0, max(d_state, 1), d_state))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), c))
        return cls(
            A_log=param(np.tile(a, (c, 1))),
            W_B=param(rng.normal(0.0, std, (c, d_state))),
            W_C=param(rng.normal(0.0, std, (c, d_state))),
            W_delta=param(rng.normal(0.0, std, (c, c))),
            delta_bias=param(dt + np.log(-np.expm1(-dt))),
            D=param(np.ones(c)),
        )

    @classmethod
    def skip_only(cls, c: int, d_state: int = 1) -> "SsmParams":
        """Zero projections with D = 1: the scan reduces to y = x."""
        return cls(param(np.zeros((c, d_state))), param(np.zeros((c, d_state))),
                   param(np.zeros((c, d_state))), param(np.zeros((c, c))),
                   param(np.zeros(c)), param(np.ones(c)))


def discretize(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold: A_bar = exp(dA), B_bar = (exp(dA) - 1) / (dA) * delta * B.

    Elementwise on the diagonal, broadcasting. For |delta*A| below 1e-8 the
    series limit B_bar = delta * B is used.
    """
    A, B, delta = (np.asarray(v, dtype=np.float64) for v in (A, B, delta))
    if np.any(delta <= 0):
        raise ValueError("step size delta must be positive")
    if np.any(A >= 0):
        raise ValueError("A must be strictly negative")
    dA = delta * A
    return np.exp(dA), ad.phi_values(dA) * delta * B


def selective_project(x, p: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-token (B_t, C_t, delta_t) from a (b, L, c) sequence."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != p.channels:
        raise ValueError(f"expected (b, L, {p.channels}) input, got {x.shape}")
    B = ad.matmul(x, p.W_B)
    C = ad.matmul(x, p.W_C)
    delta = ad.softplus(ad.add(ad.matmul(x, p.W_delta), p.delta_bias))
    return B, C, delta


def _scan(x, p: SsmParams, chunk: int | None) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError("scan needs a non-empty (b, L, c) sequence")
    B, C, delta = selective_project(x, p)
    A = ad.scale(ad.exp(p.A_log), -1.0)
    y = ad.selective_scan(x, delta, A, B, C, chunk=chunk)
    return ad.add(y, ad.mul(x, p.D))


def scan_composed(x, p: SsmParams, chunk: int | None = None) -> Tensor:
    """The same scan assembled from elementwise ops and ``linear_scan``.

    Slower; kept as an independent route for checking the fused op.
    """
    x = ad.as_tensor(x)
    b, L, c = x.shape
    N = p.d_state
    B, C, delta = selective_project(x, p)
    A = ad.scale(ad.exp(p.A_log), -1.0)
    dt4 = ad.reshape(delta, (b, L, c, 1))
    dA = ad.mul(dt4, A)
    B_bar = ad.mul(ad.mul(ad.phi(dA), dt4), ad.reshape(B, (b, L, 1, N)))
    u = ad.mul(B_bar, ad.reshape(x, (b, L, c, 1)))
    h = ad.linear_scan(dA, u, chunk=chunk)
    y = ad.sum_(ad.mul(h, ad.reshape(C, (b, L, 1, N))), axis=-1)
    return ad.add(y, ad.mul(x, p.D))


def scan_sequential(x, p: SsmParams) -> Tensor:
    """Reference scan: one token at a time, h_0 = 0."""
    return _scan(x, p, None)


def scan_chunked(x, p: SsmParams, chunk: int = 64) -> Tensor:
    """Segmented scan; numerically equal to :func:`scan_sequential`."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return _scan(x, p, chunk)


def scan_states(x, p: SsmParams, chunk: int | None = None) -> np.ndarray:
    """Hidden states h, shape (b, L, c, N); for inspection only."""
    x = ad.as_tensor(x)
    B, C, delta = selective_project(x, p)
    return ad.selective_scan_states(x.data, delta.data, p.A, B.data, C.data, chunk)


def ssm_bidirectional(x, p_fwd: SsmParams, p_bwd: SsmParams, chunk: int | None = None) -> Tensor:
    """Average of a forward scan and a time-reversed backward scan."""
    x = ad.as_tensor(x)
    if p_fwd.channels != x.shape[-1] or p_bwd.channels != x.shape[-1]:
        raise ValueError("parameter channel count does not match input")
    fwd = _scan(x, p_fwd, chunk)
    bwd = ad.flip(_scan(ad.flip(x, 1), p_bwd, chunk), 1)
    return ad.scale(ad.add(fwd, bwd), 0.5)
