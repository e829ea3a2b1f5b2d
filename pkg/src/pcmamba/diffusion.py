"""Desk-scale epsilon-prediction diffusion over synthetic talking-head latents.

The synthetic task has known ground truth: inside the mouth mask, channel 0 of
frame t equals the audio scalar a_t; inside the motion mask it equals m_t;
everything else is a static texture seeded by the identity vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import ControlMask, Rect, TokenLayout, flatten, make_masks, unflatten
from .nn import MLP, Linear, named_parameters, param, static
from .pcm import (AttnParams, GateConfig, PcmParams, cross_attention_baseline, pcm_forward,
                  resolve_masks, sample_gate_config)

VARIANTS = ("full", "no_mask_drop", "no_identity", "cross_attention")
_TEXTURE_SEED = 20240917


# --- schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray       # (T,), betas[t-1] is beta_t
    alpha_bar: np.ndarray   # (T+1,), alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int, beta_min: float = 1e-3, beta_max: float = 0.2) -> DiffusionSchedule:
    """Linear beta ramp; alpha_bar_t = prod_{s<=t} (1 - beta_s)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    betas = np.array([beta_min]) if T == 1 else np.linspace(beta_min, beta_max, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(betas, alpha_bar)


def add_noise(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is an int or one int per sample."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond, eps_uncond, s: float) -> np.ndarray:
    """eps_uncond + s (eps_cond - eps_uncond); s = 1 and s = 0 return an input exactly."""
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    if s == 1:
        return eps_cond.copy()
    if s == 0:
        return eps_uncond.copy()
    return eps_uncond + s * (eps_cond - eps_uncond)


# --- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class MaskSet:
    face: ControlMask
    audio: ControlMask
    motion: ControlMask

    @classmethod
    def from_rects(cls, mouth: Rect, face: Rect, layout: TokenLayout) -> "MaskSet":
        return cls(*make_masks(mouth, face, layout))


@dataclass
class ConditionBundle:
    e_audio: np.ndarray     # (b, f, d_emb)
    e_motion: np.ndarray    # (b, f, d_emb)
    e_id: np.ndarray        # (b, d_id)
    reference: np.ndarray   # (b, f, h, w, c_lat)
    masks: MaskSet
    gates: GateConfig = GateConfig(1, 1)

    def with_gates(self, gates) -> "ConditionBundle":
        return replace(self, gates=GateConfig(*gates).validate())

    def subset(self, idx) -> "ConditionBundle":
        return replace(self, e_audio=self.e_audio[idx], e_motion=self.e_motion[idx],
                       e_id=self.e_id[idx], reference=self.reference[idx])


@dataclass
class SyntheticSet:
    x0: np.ndarray          # (n, f, h, w, c_lat)
    audio: np.ndarray       # (n, f)
    motion: np.ndarray      # (n, f)
    cond: ConditionBundle

    def __len__(self) -> int:
        return self.x0.shape[0]

    def subset(self, idx) -> "SyntheticSet":
        return SyntheticSet(self.x0[idx], self.audio[idx], self.motion[idx], self.cond.subset(idx))


def smooth_walk(rng: np.random.Generator, count: int, frames: int, rho: float = 0.7,
                sigma: float = 0.35) -> np.ndarray:
    """Mean-reverting random walks clipped to [-1, 1], shape (count, frames)."""
    out = np.empty((count, frames))
    x = rng.uniform(-1.0, 1.0, count)
    for t in range(frames):
        if t:
            x = np.clip(rho * x + sigma * rng.standard_normal(count), -1.0, 1.0)
        out[:, t] = x
    return out


def featurize(values: np.ndarray, dim: int = 8) -> np.ndarray:
    """Fixed sinusoidal features of scalars in [-1, 1]: (..., ) -> (..., dim)."""
    k = np.arange(dim // 2)
    w = math.pi / 2.0 ** (len(k) - 1 - k)
    ang = values[..., None] * w
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def identity_texture(e_id: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Static (n, f, h, w, c) texture, a fixed nonlinear function of the identity vector."""
    basis_rng = np.random.default_rng(_TEXTURE_SEED)
    shape = (layout.height, layout.width, layout.channels)
    basis = basis_rng.normal(0.0, 1.0 / math.sqrt(e_id.shape[1]),
                             (e_id.shape[1], int(np.prod(shape))))
    tex = np.tanh(e_id @ basis).reshape((-1, 1) + shape)
    return np.repeat(tex, layout.frames, axis=1)


def compose_latent(texture: np.ndarray, audio: np.ndarray, motion: np.ndarray,
                   masks: MaskSet) -> np.ndarray:
    """Write a_t into the mouth region and m_t into the motion region of channel 0."""
    x0 = texture.copy()
    am = masks.audio.grid.astype(bool)
    mm = masks.motion.grid.astype(bool)
    ch0 = x0[..., 0]
    ch0[:, :, am] = audio[:, :, None]
    ch0[:, :, mm] = motion[:, :, None]
    return x0


def gen_synthetic(count: int, layout: TokenLayout, rng: np.random.Generator,
                  masks: MaskSet, d_id: int = 8, d_emb: int = 8) -> SyntheticSet:
    """Draw ``count`` clips with smooth driving scalars and their condition bundles."""
    audio = smooth_walk(rng, count, layout.frames)
    motion = smooth_walk(rng, count, layout.frames)
    e_id = rng.standard_normal((count, d_id))
    texture = identity_texture(e_id, layout)
    x0 = compose_latent(texture, audio, motion, masks)
    cond = ConditionBundle(featurize(audio, d_emb), featurize(motion, d_emb), e_id,
                           texture, masks)
    return SyntheticSet(x0, audio, motion, cond)


def default_masks(layout: TokenLayout) -> MaskSet:
    """Face box inset by one cell; mouth box across its lower third."""
    h, w = layout.height, layout.width
    face = Rect(1 if h > 3 else 0, 1 if w > 3 else 0, h - 1 if h > 3 else h, w - 1 if w > 3 else w)
    fh = face.bottom - face.top
    top = face.top + max(fh - max(fh // 3, 1), 1)
    mouth = Rect(top, face.left + (face.right - face.left) // 4, face.bottom,
                 face.right - (face.right - face.left) // 4)
    return MaskSet.from_rects(mouth, face, layout)


# --- denoiser ------------------------------------------------------------------

def sinusoidal(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


@dataclass
class Block:
    mlp: MLP
    pcm: PcmParams | None = None
    attn: AttnParams | None = None
    attn_ctl: Linear | None = None
    attn_id: Linear | None = None


@dataclass
class Denoiser:
    """eps_theta: input projection, timestep embedding, K x {token MLP -> PCM}, output projection."""

    in_proj: Linear
    time_proj: Linear
    null_audio: Tensor
    null_motion: Tensor
    blocks: list[Block]
    out_proj: Linear
    layout: TokenLayout = static()
    d_emb: int = static(8)
    d_id: int = static(8)
    d_frame: int = static(4)
    variant: str = static("full")

    @classmethod
    def init(cls, rng: np.random.Generator, layout: TokenLayout, c: int = 16, d_state: int = 8,
             blocks: int = 2, d_emb: int = 8, d_id: int = 8, d_frame: int = 4,
             variant: str = "full", chunk: int | None = None) -> "Denoiser":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        d_ctl = d_emb + d_frame
        c_lat = layout.channels
        made = []
        for _ in range(blocks):
            mlp = MLP.init(rng, c)
            if variant == "cross_attention":
                made.append(Block(mlp, attn=AttnParams.init(rng, c), attn_ctl=Linear.init(rng, d_ctl, c),
                                  attn_id=Linear.init(rng, d_id, c)))
            else:
                made.append(Block(mlp, pcm=PcmParams.init(
                    rng, c, d_id, d_ctl, d_state, chunk=chunk,
                    mask_drop=variant != "no_mask_drop", use_identity=variant != "no_identity")))
        return cls(
            in_proj=Linear.init(rng, 2 * c_lat, c),
            time_proj=Linear.init(rng, c, c),
            null_audio=param(rng.normal(0.0, 0.02, d_emb)),
            null_motion=param(rng.normal(0.0, 0.02, d_emb)),
            blocks=made,
            out_proj=Linear.init(rng, c, c_lat, std=0.02),
            layout=layout, d_emb=d_emb, d_id=d_id, d_frame=d_frame, variant=variant,
        )

    @property
    def channels(self) -> int:
        return self.in_proj.weight.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self)

    def _controls(self, e: np.ndarray, null: Tensor, drop: np.ndarray) -> Tensor:
        b, f, _ = e.shape
        pos = np.broadcast_to(sinusoidal(np.arange(f), self.d_frame), (b, f, self.d_frame))
        keep = (~drop).astype(np.float64)[:, None, None]
        sig = ad.add(Tensor(e * keep),
                     ad.mul(Tensor(np.broadcast_to(1.0 - keep, (b, 1, 1)).copy()),
                            ad.reshape(null, (1, 1, self.d_emb))))
        return ad.concat([sig, Tensor(pos.copy())], axis=-1)

    def __call__(self, x_t, t, cond: ConditionBundle, drop=None) -> Tensor:
        """Predicted noise, shape (b, f, h, w, c_lat).

        ``drop`` flags samples whose control signals are replaced by the null
        embedding (True for all = unconditional branch of CFG).
        """
        lay = self.layout
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        drop = np.zeros(b, dtype=bool) if drop is None else np.broadcast_to(np.asarray(drop, bool), (b,))
        gates = GateConfig(*cond.gates).validate()
        m_audio, m_motion = resolve_masks(gates, cond.masks.face, cond.masks.audio,
                                          cond.masks.motion)

        inp = np.concatenate([flatten(x_t), flatten(cond.reference)], axis=-1)
        z = self.in_proj(Tensor(inp))
        temb = self.time_proj(Tensor(sinusoidal(t, self.channels)))
        frame_pe = np.repeat(sinusoidal(np.arange(lay.frames), self.channels),
                             lay.height * lay.width, axis=0)
        z = ad.add(ad.add(z, ad.reshape(temb, (b, 1, self.channels))), Tensor(frame_pe))

        e_audio = self._controls(cond.e_audio, self.null_audio, drop)
        e_motion = self._controls(cond.e_motion, self.null_motion, drop)
        e_id = Tensor(cond.e_id)
        for blk in self.blocks:
            z = ad.add(z, blk.mlp(z))
            if blk.pcm is not None:
                z = pcm_forward(z, e_id, e_audio, e_motion, m_audio, m_motion, gates, blk.pcm, lay)
            else:
                z = self._attend(z, blk, e_id, e_audio, e_motion, gates)
        return unflatten(self.out_proj(z), lay)

    def _attend(self, z, blk: Block, e_id, e_audio, e_motion, gates: GateConfig) -> Tensor:
        b = z.shape[0]
        kv = [ad.reshape(blk.attn_id(e_id), (b, 1, self.channels))]
        if gates.g_audio:
            kv.append(blk.attn_ctl(e_audio))
        if gates.g_motion:
            kv.append(blk.attn_ctl(e_motion))
        return cross_attention_baseline(z, ad.concat(kv, axis=1), blk.attn)

    def predict(self, x_t, t, cond: ConditionBundle, uncond: bool = False) -> np.ndarray:
        return self(x_t, t, cond, drop=np.full(np.asarray(x_t).shape[0], uncond)).data


# --- objective, optimisers, training ---------------------------------------------

def training_loss(model, batch: SyntheticSet, cond: ConditionBundle, sched: DiffusionSchedule,
                  rng: np.random.Generator, p_uncond: float = 0.1) -> Tensor:
    """mean ||eps - eps_theta(C, x_t, t)||^2 over the batch (per element).

    ``cond.gates`` must already be set (normally by :func:`sample_gate_config`);
    each sample's controls are swapped for the null embedding with prob ``p_uncond``.
    """
    b = len(batch)
    t = rng.integers(1, sched.T + 1, b)
    eps = rng.standard_normal(batch.x0.shape)
    drop = rng.random(b) < p_uncond
    x_t = add_noise(batch.x0, t, eps, sched)
    pred = model(x_t, t, cond, drop=drop)
    diff = ad.sub(pred, Tensor(eps))
    return ad.mean(ad.mul(diff, diff))


class SGDMomentum:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            v = self.velocity[k] = self.momentum * self.velocity[k] + g
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


OPTIMIZERS = {"sgd": SGDMomentum, "adam": Adam}


@dataclass
class TrainLogRow:
    step: int
    loss: float
    gate_config: str
    wall_ms: float


@dataclass
class TrainSettings:
    steps: int = 2000
    batch: int = 4
    lr: float = 3e-3
    p_uncond: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9


def train(model: Denoiser, sched: DiffusionSchedule, masks: MaskSet, settings: TrainSettings,
          on_step=None) -> list[TrainLogRow]:
    """Fit ``model`` on freshly drawn synthetic batches; returns the per-step log."""
    import time

    rng = np.random.default_rng(settings.seed)
    params = model.parameters()
    if settings.optimizer == "sgd":
        opt = SGDMomentum(params, settings.lr, settings.momentum)
    elif settings.optimizer == "adam":
        opt = Adam(params, settings.lr)
    else:
        raise ValueError(f"unknown optimizer {settings.optimizer!r}")
    log = []
    for step in range(settings.steps):
        t0 = time.perf_counter()
        batch = gen_synthetic(settings.batch, model.layout, rng, masks, model.d_id, model.d_emb)
        gates = sample_gate_config(rng)
        cond = batch.cond.with_gates(gates)
        with ad.Tape() as tape:
            loss = training_loss(model, batch, cond, sched, rng, settings.p_uncond)
        grads = ad.backward(loss, tape, wrt=list(params.values()))
        opt.step(grads)
        row = TrainLogRow(step, loss.item(), gates.label, (time.perf_counter() - t0) * 1e3)
        log.append(row)
        if on_step is not None:
            on_step(row)
    return log


# --- sampling ---------------------------------------------------------------------

def ddim_steps(sched: DiffusionSchedule, n: int) -> list[int]:
    """``n`` evenly spaced decreasing timesteps from T down to >= 1."""
    n = max(1, min(n, sched.T))
    return sorted({int(round(v)) for v in np.linspace(sched.T, 1, n)}, reverse=True)


def ddim_sample(model, cond: ConditionBundle, sched: DiffusionSchedule, steps, s: float = 2.0,
                rng: np.random.Generator | None = None, x_init=None, shape=None) -> np.ndarray:
    """Deterministic DDIM with classifier-free guidance; returns the final x0 estimate.

    ``model`` is a Denoiser or any ``f(x_t, t, cond, uncond) -> eps``. The start
    latent is ``x_init`` or a standard normal draw from ``rng``.
    """
    steps = [int(v) for v in steps]
    if not steps or any(v < 1 or v > sched.T for v in steps) \
            or any(a <= b for a, b in zip(steps, steps[1:])):
        raise ValueError(f"steps must be strictly decreasing within [1, {sched.T}]")
    eps_fn = getattr(model, "predict", model)
    if x_init is None:
        if shape is None:
            shape = np.asarray(cond.reference).shape
        rng = rng if rng is not None else np.random.default_rng(0)
        x = rng.standard_normal(shape)
    else:
        x = np.array(x_init, dtype=np.float64)
    x0_hat = x
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        eps_c = eps_fn(x, t, cond, False)
        eps = eps_c if s == 1 else cfg_combine(eps_c, eps_fn(x, t, cond, True), s)
        ab, ab_next = sched.alpha_bar[t], sched.alpha_bar[t_next]
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps
    return x0_hat


# --- evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class RegionMetrics:
    corr_mouth_audio: float
    corr_face_motion: float
    cross_corr: float


def region_means(volume: np.ndarray, mask: ControlMask, channel: int = 0) -> np.ndarray:
    """Per-frame mean of one channel over a mask region: (b, f, h, w, c) -> (b, f)."""
    v = np.asarray(volume)
    if v.ndim == 4:
        v = v[None]
    return v[..., channel][:, :, mask.grid.astype(bool)].mean(axis=-1)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x, y = x.reshape(-1), y.reshape(-1)
    if x.shape != y.shape:
        raise ValueError("series lengths differ")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((xc * xc).sum()), math.sqrt((yc * yc).sum())
    if sx < 1e-12 or sy < 1e-12:
        raise ValueError("correlation undefined for a zero-variance series")
    return float((xc * yc).sum() / (sx * sy))


def region_control_metrics(generated, audio, motion, masks: MaskSet) -> RegionMetrics:
    """Pearson correlations between per-frame region means (channel 0) and driving scalars.

    All (sample, frame) pairs in the batch are pooled into one series.
    """
    mouth = region_means(generated, masks.audio)
    upper = region_means(generated, masks.motion)
    audio = np.asarray(audio).reshape(mouth.shape)
    motion = np.asarray(motion).reshape(mouth.shape)
    return RegionMetrics(_pearson(mouth, audio), _pearson(upper, motion), _pearson(mouth, motion))
