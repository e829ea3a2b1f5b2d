"""Parallel-control Mamba layer and the cross-attention comparator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import ControlMask, TokenLayout, mask_ssm_forward
from .nn import MLP, Linear, param, static
from .ssm import SsmParams


class GateConfig(NamedTuple):
    g_audio: int
    g_motion: int

    def validate(self) -> "GateConfig":
        if self.g_audio not in (0, 1) or self.g_motion not in (0, 1):
            raise ValueError(f"gates must be 0 or 1, got {tuple(self)}")
        if self.g_audio + self.g_motion == 0:
            raise ValueError("at least one gate must be open (g_audio + g_motion > 0)")
        return self

    @property
    def label(self) -> str:
        return f"{self.g_audio}{self.g_motion}"

    @classmethod
    def parse(cls, text: str) -> "GateConfig":
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 2:
            raise ValueError(f"gates must look like 'A,M', got {text!r}")
        return cls(int(parts[0]), int(parts[1])).validate()


GATE_CONFIGS = (GateConfig(0, 1), GateConfig(1, 0), GateConfig(1, 1))


def sample_gate_config(rng: np.random.Generator) -> GateConfig:
    """Uniform draw over the three admissible gate settings."""
    return GATE_CONFIGS[int(rng.integers(len(GATE_CONFIGS)))]


def resolve_masks(gates: GateConfig, face: ControlMask, audio: ControlMask,
                  motion: ControlMask) -> tuple[ControlMask, ControlMask]:
    """Branch masks for a gate setting; a lone active branch controls the whole face."""
    gates = GateConfig(*gates).validate()
    if gates == (1, 1):
        return audio, motion
    return face, face


@dataclass
class BranchParams:
    ctl_proj: Linear
    fwd: SsmParams
    bwd: SsmParams

    @classmethod
    def init(cls, rng, c: int, d_ctl: int, d_state: int) -> "BranchParams":
        return cls(Linear.init(rng, d_ctl, c), SsmParams.init(rng, c, d_state),
                   SsmParams.init(rng, c, d_state))


@dataclass
class PcmParams:
    f_theta1: MLP | None
    f_theta2: MLP | None
    id_proj: Linear
    audio: BranchParams
    motion: BranchParams
    norm_gain: Tensor
    norm_bias: Tensor
    eps: float = static(1e-5)
    chunk: int | None = static(None)
    mask_drop: bool = static(True)
    use_identity: bool = static(True)

    @property
    def channels(self) -> int:
        return self.norm_gain.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, d_id: int, d_ctl: int, d_state: int,
             chunk: int | None = None, mask_drop: bool = True,
             use_identity: bool = True) -> "PcmParams":
        return cls(
            f_theta1=MLP.init(rng, c),
            f_theta2=MLP.init(rng, c, zero_out=True),
            id_proj=Linear.init(rng, d_id, c),
            audio=BranchParams.init(rng, c, d_ctl, d_state),
            motion=BranchParams.init(rng, c, d_ctl, d_state),
            norm_gain=param(np.ones(c)),
            norm_bias=param(np.zeros(c)),
            chunk=chunk, mask_drop=mask_drop, use_identity=use_identity,
        )


def _apply(f, x):
    return x if f is None else f(x)


def concat_identity(z, e_id, p: PcmParams) -> Tensor:
    """[id_proj(e_id); f_theta1(z)]: one identity token ahead of the content tokens."""
    z = ad.as_tensor(z)
    e_id = ad.as_tensor(e_id)
    if e_id.ndim == 1:
        e_id = ad.reshape(e_id, (1, e_id.shape[0]))
    if e_id.shape[-1] != p.id_proj.n_in:
        raise ValueError(f"identity embedding has {e_id.shape[-1]} channels, "
                         f"projection expects {p.id_proj.n_in}")
    b = z.shape[0]
    if e_id.shape[0] != b:
        raise ValueError("identity embedding batch does not match z")
    id_tok = ad.reshape(p.id_proj(e_id), (b, 1, p.channels))
    return ad.concat([id_tok, _apply(p.f_theta1, z)], axis=1)


def pcm_forward(z, e_id, e_audio, e_motion, m_audio: ControlMask, m_motion: ControlMask,
                gates: GateConfig, p: PcmParams, layout: TokenLayout,
                trace: list | None = None) -> Tensor:
    """Gated two-branch Mask-SSM, layer norm of the branch sum, MLP and residual.

    A closed gate's branch contributes ``z`` unchanged and its inputs are never
    read. With ``p.mask_drop`` off both branches scan every token (the ablation).
    """
    gates = GateConfig(*gates).validate()
    z = ad.as_tensor(z)
    if not p.mask_drop:
        m_audio = ControlMask.full(layout.height, layout.width, "audio")
        m_motion = ControlMask.full(layout.height, layout.width, "motion")
    elif gates == (1, 1) and (m_audio.grid & m_motion.grid).any():
        raise ValueError("audio and motion masks overlap while both gates are open")

    if p.use_identity:
        z_prime, n_id = concat_identity(z, e_id, p), 1
    else:
        z_prime, n_id = _apply(p.f_theta1, z), 0

    def branch(bp: BranchParams, e_ctl, m):
        e_ctl = ad.as_tensor(e_ctl)
        return mask_ssm_forward(z, z_prime, m, bp.ctl_proj(e_ctl), (bp.fwd, bp.bwd), layout,
                                n_identity=n_id, chunk=p.chunk, trace=trace)

    z1 = branch(p.audio, e_audio, m_audio) if gates.g_audio else z
    z2 = branch(p.motion, e_motion, m_motion) if gates.g_motion else z
    o1 = ad.layer_norm(ad.add(z1, z2), p.norm_gain, p.norm_bias, p.eps)
    return ad.add(_apply(p.f_theta2, o1), z)


@dataclass
class AttnParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @classmethod
    def init(cls, rng, c: int, d_ctl: int | None = None, d_head: int | None = None) -> "AttnParams":
        d_ctl = d_ctl or c
        d_head = d_head or c
        return cls(param(rng.normal(0, c ** -0.5, (c, d_head))),
                   param(rng.normal(0, d_ctl ** -0.5, (d_ctl, d_head))),
                   param(rng.normal(0, 0.02, (d_ctl, c))))


def cross_attention_baseline(z, e_ctl, params: AttnParams) -> Tensor:
    """Single-head cross-attention: queries from z, keys/values from e_ctl, plus residual."""
    z, e_ctl = ad.as_tensor(z), ad.as_tensor(e_ctl)
    if e_ctl.shape[1] == 0:
        raise ValueError("cross-attention needs at least one control token")
    if z.shape[-1] != params.W_q.shape[0] or e_ctl.shape[-1] != params.W_k.shape[0]:
        raise ValueError("channel dims incompatible with attention parameters")
    q = ad.matmul(z, params.W_q)
    k = ad.matmul(e_ctl, params.W_k)
    v = ad.matmul(e_ctl, params.W_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), params.W_q.shape[1] ** -0.5)
    return ad.add(z, ad.matmul(ad.softmax(scores, axis=-1), v))


def cross_attention_blocked(z: np.ndarray, e_ctl: np.ndarray, params: AttnParams,
                            block: int = 1024) -> np.ndarray:
    """Forward-only :func:`cross_attention_baseline` over query blocks (bounded memory)."""
    Wq, Wk, Wv = params.W_q.data, params.W_k.data, params.W_v.data
    k = e_ctl @ Wk
    v = e_ctl @ Wv
    kt = np.swapaxes(k, -1, -2)
    s = Wq.shape[1] ** -0.5
    out = np.empty_like(z)
    for i in range(0, z.shape[1], block):
        scores = (z[:, i:i + block] @ Wq) @ kt * s
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[:, i:i + block] = z[:, i:i + block] + scores @ v
    return out
