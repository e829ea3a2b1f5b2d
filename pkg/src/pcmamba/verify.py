"""Invariant and gradient checks run by ``pcmamba check`` and the acceptance tests.

Each ``check_*`` function returns a :class:`CheckResult`; none of them raise on
a failed property.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import (ConditionBundle, Denoiser, default_masks, gen_synthetic, make_schedule,
                        training_loss)
from .masks import (ControlMask, Rect, TokenLayout, broadcast_mask, flatten, make_masks,
                    mask_drop, mask_paste, mask_ssm_forward, unflatten)
from .nn import load_parameters, named_parameters
from .pcm import (GATE_CONFIGS, AttnParams, GateConfig, PcmParams, cross_attention_baseline,
                  pcm_forward, sample_gate_config)
from .ssm import SsmParams, scan_chunked, scan_composed, scan_sequential, ssm_bidirectional
from .tnsr import decode, encode, load_manifest, read_tnsr, save_manifest, write_tnsr

GRAD_TOL = 1e-4
FD_STEP = 1e-5
# Central differences on an O(1) loss carry ~1e-11 absolute noise; gradients
# whose norm is below this floor are compared absolutely instead.
GRAD_FLOOR = 1e-6
# Whole-model losses reduce thousands of terms, so roundoff in the difference
# quotient is larger; a wider step keeps it below the truncation error.
MODEL_FD_STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail, extra = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail, extra = False, f"raised {type(exc).__name__}: {exc}", {}
    return CheckResult(name, ok, detail, time.perf_counter() - t0, extra)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


# --- scan equivalence ------------------------------------------------------------

def check_scan_equivalence(cases: int = 100, max_len: int = 4096, seed: int = 0,
                           tol: float = 1e-9) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(cases):
            L = int(rng.integers(1, max_len + 1))
            c, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            p = random_ssm(rng, c, N)
            x = rng.standard_normal((1, L, c))
            ref = scan_sequential(x, p).data
            for chunk in (1, 7, 32, L):
                worst = max(worst, float(np.abs(scan_chunked(x, p, chunk).data - ref).max()))
        return worst < tol, f"max |chunked - sequential| = {worst:.3g} over {cases} cases", {"max_diff": worst}

    return _timed("scan_chunked == scan_sequential", run)


def random_ssm(rng: np.random.Generator, c: int, N: int, scale: float = 0.5) -> SsmParams:
    """Parameters with non-trivial projections (init's 0.02 std is too gentle for tests)."""
    p = SsmParams.init(rng, c, N)
    for t in (p.W_B, p.W_C, p.W_delta):
        t.data = rng.normal(0.0, scale, t.shape)
    p.A_log.data = p.A_log.data + rng.normal(0.0, 0.3, p.A_log.shape)
    p.delta_bias.data = rng.normal(0.0, 0.5, p.delta_bias.shape)
    p.D.data = rng.normal(1.0, 0.3, p.D.shape)
    return p


# --- gradients ---------------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: list[Tensor], h: float = FD_STEP) -> float:
    """Worst relative error between backward() and central differences over ``inputs``."""
    with ad.Tape() as tape:
        loss = fn(*inputs)
    grads = ad.backward(loss, tape, wrt=inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(t, i=i):
            args = list(inputs)
            args[i] = t
            return fn(*args)
        worst = max(worst, relative_error(grads[x], ad.finite_diff_grad(f, x, h)))
    return worst


def param_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = MODEL_FD_STEP) -> tuple[float, str]:
    """Worst relative error over every parameter tensor of a model."""
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = ad.backward(loss, tape, wrt=list(params.values()))
    worst, where = 0.0, ""
    for name, p in params.items():
        original = p.data

        def f(t):
            p.data = t.data
            try:
                return loss_fn()
            finally:
                p.data = original

        err = relative_error(grads[p], ad.finite_diff_grad(f, Tensor(original.copy()), h))
        if err >= worst:
            worst, where = err, name
    return worst, where


def _leaf(rng, shape, lo=None, hi=None):
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.sum_(ad.mul(out, Tensor(w)))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One randomized instance per registered op: (scalar function, leaf inputs)."""
    s = int(rng.integers(1 << 30))
    L = int(rng.integers(2, 7))
    idx = rng.permutation(5)[:3]
    cases = {
        "add": (lambda a, b: _weighted(ad.add(a, b), s), [_leaf(rng, (3, 4)), _leaf(rng, (4,))]),
        "sub": (lambda a, b: _weighted(ad.sub(a, b), s), [_leaf(rng, (2, 3)), _leaf(rng, (2, 1))]),
        "mul": (lambda a, b: _weighted(ad.mul(a, b), s), [_leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))]),
        "scale": (lambda a: _weighted(ad.scale(a, -1.7), s), [_leaf(rng, (5,))]),
        "exp": (lambda a: _weighted(ad.exp(a), s), [_leaf(rng, (2, 3))]),
        "softplus": (lambda a: _weighted(ad.softplus(a), s), [_leaf(rng, (7,), -4, 4)]),
        "gelu": (lambda a: _weighted(ad.gelu(a), s), [_leaf(rng, (7,), -3, 3)]),
        "phi": (lambda a: _weighted(ad.phi(a), s), [_leaf(rng, (6,), -5, -1e-2)]),
        "sum": (lambda a: _weighted(ad.sum_(a, axis=1), s), [_leaf(rng, (2, 3, 2))]),
        "mean": (lambda a: _weighted(ad.mean(a, axis=0, keepdims=True), s), [_leaf(rng, (3, 2))]),
        "matmul": (lambda a, b: _weighted(ad.matmul(a, b), s), [_leaf(rng, (2, 3, 4)), _leaf(rng, (4, 2))]),
        "layer_norm": (lambda x, g, b: _weighted(ad.layer_norm(x, g, b), s),
                       [_leaf(rng, (2, 3, 5)), _leaf(rng, (5,)), _leaf(rng, (5,))]),
        "softmax": (lambda a: _weighted(ad.softmax(a), s), [_leaf(rng, (3, 4))]),
        "reshape": (lambda a: _weighted(ad.reshape(a, (3, 4)), s), [_leaf(rng, (2, 6))]),
        "transpose": (lambda a: _weighted(ad.transpose(a, (2, 0, 1)), s), [_leaf(rng, (2, 3, 4))]),
        "flip": (lambda a: _weighted(ad.flip(a, 1), s), [_leaf(rng, (2, 4, 2))]),
        "concat": (lambda a, b: _weighted(ad.concat([a, b, a], axis=1), s),
                   [_leaf(rng, (2, 2, 3)), _leaf(rng, (2, 1, 3))]),
        "take": (lambda a: _weighted(ad.take(a, [0, 2, 2, 4], axis=1), s), [_leaf(rng, (2, 5, 3))]),
        "paste": (lambda a, v: _weighted(ad.paste(a, idx, v, axis=1), s),
                  [_leaf(rng, (2, 5, 3)), _leaf(rng, (2, 3, 3))]),
        "linear_scan": (lambda a, u: _weighted(ad.linear_scan(a, u), s),
                        [_leaf(rng, (2, L, 3), -2, -0.05), _leaf(rng, (2, L, 3))]),
        "selective_scan": (lambda x, d, A, B, C: _weighted(ad.selective_scan(x, d, A, B, C, chunk=2), s),
                           [_leaf(rng, (2, L, 3)), _leaf(rng, (2, L, 3), 0.1, 1.5),
                            _leaf(rng, (3, 2), -3, -0.2), _leaf(rng, (2, L, 2)), _leaf(rng, (2, L, 2))]),
    }
    missing = set(ad.OPS) - set(cases)
    if missing:
        raise AssertionError(f"ops without a gradient case: {sorted(missing)}")
    return cases


def tiny_denoiser_problem(seed: int):
    """A two-block denoiser with a few hundred parameters and its loss closure."""
    lay = TokenLayout(2, 3, 3, 2)
    masks = default_masks(lay)
    model = Denoiser.init(np.random.default_rng(seed), lay, c=4, d_state=2, blocks=2,
                          d_emb=4, d_id=3, d_frame=2)
    rng = np.random.default_rng(seed + 7)
    for p in model.parameters().values():  # move off the gentle init so every gradient is sizeable
        p.data = p.data + rng.normal(0.0, 0.4, p.shape)
    batch = gen_synthetic(2, lay, rng, masks, d_id=3, d_emb=4)
    cond = batch.cond.with_gates(GateConfig(1, 1))
    sched = make_schedule(10, 1e-3, 0.2)

    def loss_fn():
        return training_loss(model, batch, cond, sched, np.random.default_rng(seed), p_uncond=0.5)

    return model, loss_fn


def composite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    s = int(rng.integers(1 << 30))
    lay = TokenLayout(2, 3, 3, 3)
    c = lay.channels
    _, audio, motion = make_masks(Rect(2, 0, 3, 2), Rect(0, 0, 3, 3), lay)
    p = random_pcm(rng, c, d_id=2, d_ctl=2, d_state=2)
    fwd, bwd = random_ssm(rng, c, 2), random_ssm(rng, c, 2)
    attn = AttnParams.init(rng, c, 2)
    n = lay.n_tokens
    return {
        "scan_sequential": (lambda x: _weighted(scan_sequential(x, fwd), s), [_leaf(rng, (2, 5, c))]),
        "scan_composed": (lambda x: _weighted(scan_composed(x, fwd, chunk=2), s), [_leaf(rng, (1, 6, c))]),
        "ssm_bidirectional": (lambda x: _weighted(ssm_bidirectional(x, fwd, bwd), s), [_leaf(rng, (1, 6, c))]),
        "mask_ssm_forward": (
            lambda z, zp, e: _weighted(mask_ssm_forward(z, zp, audio, e, (fwd, bwd), lay), s),
            [_leaf(rng, (1, n, c)), _leaf(rng, (1, n + 1, c)), _leaf(rng, (1, 2, c))]),
        "pcm_forward": (
            lambda z, ei, ea, em: _weighted(pcm_forward(z, ei, ea, em, audio, motion, GateConfig(1, 1), p, lay), s),
            [_leaf(rng, (1, n, c)), _leaf(rng, (1, 2)), _leaf(rng, (1, 2, 2)), _leaf(rng, (1, 2, 2))]),
        "cross_attention_baseline": (
            lambda z, e: _weighted(cross_attention_baseline(z, e, attn), s),
            [_leaf(rng, (1, 4, c)), _leaf(rng, (1, 3, 2))]),
    }


def random_pcm(rng, c, d_id, d_ctl, d_state, **kw) -> PcmParams:
    p = PcmParams.init(rng, c, d_id, d_ctl, d_state, **kw)
    for br in (p.audio, p.motion):
        br.fwd, br.bwd = random_ssm(rng, c, d_state), random_ssm(rng, c, d_state)
    p.f_theta2.outer.weight.data = rng.normal(0.0, 0.5, p.f_theta2.outer.weight.shape)
    p.norm_gain.data = rng.normal(1.0, 0.3, c)
    p.norm_bias.data = rng.normal(0.0, 0.3, c)
    return p


def check_gradients(seeds: int = 10, tol: float = GRAD_TOL, include_model: bool = True) -> CheckResult:
    def run():
        worst: dict[str, float] = {}
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            for name, (fn, inputs) in {**op_cases(rng), **composite_cases(rng)}.items():
                worst[name] = max(worst.get(name, 0.0), gradcheck(fn, inputs))
            for name, p in _composite_param_cases(rng).items():
                worst[name] = max(worst.get(name, 0.0), p)
            if include_model:
                model, loss_fn = tiny_denoiser_problem(seed)
                err, _ = param_gradcheck(loss_fn, model.parameters())
                worst["denoiser_loss[params]"] = max(worst.get("denoiser_loss[params]", 0.0), err)
        bad = {k: v for k, v in worst.items() if not v < tol}
        top = max(worst, key=worst.get)
        detail = (f"{len(worst)} ops/composites x {seeds} seeds, worst rel err "
                  f"{worst[top]:.2e} ({top})")
        if bad:
            detail += f"; failing: {sorted(bad)}"
        return not bad, detail, {"worst": worst}

    return _timed("gradient suite vs finite differences", run)


def _composite_param_cases(rng) -> dict[str, float]:
    """Gradients w.r.t. SSM and PCM parameters (not only activations)."""
    c = 3
    x = rng.standard_normal((1, 5, c))
    w = rng.standard_normal((1, 5, c))
    p = random_ssm(rng, c, 2)
    err_scan, _ = param_gradcheck(lambda: ad.sum_(ad.mul(scan_chunked(x, p, 2), Tensor(w))),
                                  named_parameters(p))
    lay = TokenLayout(2, 2, 2, c)
    _, audio, motion = make_masks(Rect(1, 0, 2, 1), Rect(0, 0, 2, 2), lay)
    pp = random_pcm(rng, c, d_id=2, d_ctl=2, d_state=2)
    z = rng.standard_normal((1, lay.n_tokens, c))
    ei, ea, em = rng.standard_normal((1, 2)), rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 2, 2))
    wz = rng.standard_normal(z.shape)
    err_pcm, _ = param_gradcheck(
        lambda: ad.sum_(ad.mul(pcm_forward(z, ei, ea, em, audio, motion, GateConfig(1, 1), pp, lay),
                               Tensor(wz))), named_parameters(pp))
    return {"scan_chunked[params]": err_scan, "pcm_forward[params]": err_pcm}


# --- region isolation ----------------------------------------------------------------

def random_pcm_instance(rng: np.random.Generator):
    f, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    c = int(rng.integers(2, 5))
    lay = TokenLayout(f, h, w, c)
    top, left = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
    bottom, right = int(rng.integers(top + 1, h + 1)), int(rng.integers(left + 1, w + 1))
    face = Rect(top, left, bottom, right)
    while True:
        mt, ml = int(rng.integers(top, bottom)), int(rng.integers(left, right))
        mouth = Rect(mt, ml, int(rng.integers(mt + 1, bottom + 1)), int(rng.integers(ml + 1, right + 1)))
        if mouth.area < face.area:
            break
        if face.area == 1:
            face = Rect(0, 0, h, w)
    _, audio, motion = make_masks(mouth, face, lay)
    d_id, d_ctl, N = 2, 3, 2
    p = random_pcm(rng, c, d_id, d_ctl, N, chunk=None if rng.random() < 0.5 else int(rng.integers(1, 5)))
    z = rng.standard_normal((1, lay.n_tokens, c))
    e_id = rng.standard_normal((1, d_id))
    e_a = rng.standard_normal((1, f, d_ctl))
    e_m = rng.standard_normal((1, f, d_ctl))
    return lay, audio, motion, p, z, e_id, e_a, e_m


def check_region_isolation(trials: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        violations = 0
        for _ in range(trials):
            lay, audio, motion, p, z, e_id, e_a, e_m = random_pcm_instance(rng)
            g = GateConfig(1, 1)
            base = pcm_forward(z, e_id, e_a, e_m, audio, motion, g, p, lay).data[0]
            pa = pcm_forward(z, e_id, e_a + rng.standard_normal(e_a.shape), e_m, audio, motion, g, p, lay).data[0]
            pm = pcm_forward(z, e_id, e_a, e_m + rng.standard_normal(e_m.shape), audio, motion, g, p, lay).data[0]
            out_a = ~broadcast_mask(audio, lay)
            out_m = ~broadcast_mask(motion, lay)
            if not np.array_equal(base[out_a], pa[out_a]) or not np.array_equal(base[out_m], pm[out_m]):
                violations += 1
        return violations == 0, f"{violations} violations in {trials} trials", {"violations": violations}

    return _timed("region isolation under control perturbation", run)


# --- gate semantics ---------------------------------------------------------------------

def check_gate_semantics(trials: int = 200, seed: int = 1) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        problems = []
        for _ in range(trials):
            lay, audio, motion, p, z, e_id, e_a, e_m = random_pcm_instance(rng)
            other = ControlMask(np.ones(audio.shape, dtype=np.int8), "motion")
            base = pcm_forward(z, e_id, e_a, e_m, audio, motion, GateConfig(1, 0), p, lay).data
            alt = pcm_forward(z, e_id, e_a, rng.standard_normal(e_m.shape), audio, other,
                              GateConfig(1, 0), p, lay).data
            if not np.array_equal(base, alt):
                problems.append("(1,0) depends on motion inputs")
            base = pcm_forward(z, e_id, e_a, e_m, audio, motion, GateConfig(0, 1), p, lay).data
            alt = pcm_forward(z, e_id, rng.standard_normal(e_a.shape), e_m,
                              ControlMask(np.ones(audio.shape, dtype=np.int8), "audio"), motion,
                              GateConfig(0, 1), p, lay).data
            if not np.array_equal(base, alt):
                problems.append("(0,1) depends on audio inputs")

        for bad in (GateConfig(0, 0), (0, 0)):
            try:
                lay, audio, motion, p, z, e_id, e_a, e_m = random_pcm_instance(rng)
                pcm_forward(z, e_id, e_a, e_m, audio, motion, bad, p, lay)
                problems.append("(0,0) accepted by pcm_forward")
            except ValueError:
                pass
        draws = {sample_gate_config(rng) for _ in range(3000)}
        if draws != set(GATE_CONFIGS):
            problems.append(f"sampler support {sorted(draws)}")

        for gates in GATE_CONFIGS:
            lay, audio, motion, p, z, e_id, e_a, e_m = random_pcm_instance(rng)
            ta = Tensor(e_a, requires_grad=True)
            tm = Tensor(e_m, requires_grad=True)
            with ad.Tape() as tape:
                loss = ad.sum_(ad.mul(pcm_forward(z, e_id, ta, tm, audio, motion, gates, p, lay),
                                      Tensor(rng.standard_normal(z.shape))))
            grads = ad.backward(loss, tape, wrt=[ta, tm])
            for g_open, t, label in ((gates.g_audio, ta, "audio"), (gates.g_motion, tm, "motion")):
                if not g_open and np.any(grads[t] != 0.0):
                    problems.append(f"nonzero d/de_{label} with gate closed {gates}")
                if g_open and not np.any(grads[t] != 0.0):
                    problems.append(f"zero d/de_{label} with gate open {gates}")
        ok = not problems
        return ok, "all gate properties hold" if ok else "; ".join(sorted(set(problems))), {}

    return _timed("gate semantics", run)


# --- round-trips ---------------------------------------------------------------------------

def check_round_trips(seed: int = 2) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        problems = []
        for _ in range(20):
            lay = TokenLayout(*(int(v) for v in rng.integers(1, 6, 4)))
            v = rng.standard_normal((2, lay.frames, lay.height, lay.width, lay.channels))
            if not np.array_equal(unflatten(flatten(v), lay), v):
                problems.append("flatten/unflatten")
            grid = (rng.random((lay.height, lay.width)) < 0.5).astype(np.int8)
            grid[0, 0] = 1
            keep = broadcast_mask(ControlMask(grid, "audio"), lay)
            z = rng.standard_normal((2, lay.n_tokens + 1, lay.channels))
            dropped = mask_drop(z, keep, n_identity=1)
            content = ad.take(dropped, np.arange(1, dropped.shape[1]), axis=1)
            scratch = np.zeros((2, lay.n_tokens, lay.channels))
            back = mask_paste(scratch, keep, content).data
            if not np.array_equal(back[:, keep], z[:, 1:][:, keep]) or np.any(back[:, ~keep] != 0):
                problems.append("mask_drop/mask_paste")
            arr = rng.standard_normal(tuple(int(n) for n in rng.integers(1, 5, rng.integers(1, 5))))
            if not np.array_equal(decode(encode(arr)), arr):
                problems.append("TNSR encode/decode")
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            arr = rng.standard_normal((3, 4, 5)) * 1e300
            write_tnsr(tmp / "a.tnsr", arr)
            if not np.array_equal(read_tnsr(tmp / "a.tnsr"), arr):
                problems.append("TNSR file")
            lay = TokenLayout(2, 4, 4, 2)
            model = Denoiser.init(rng, lay, c=4, d_state=2)
            for p in model.parameters().values():
                p.data = p.data + rng.standard_normal(p.shape)
            save_manifest(tmp / "ckpt", {k: v.data for k, v in model.parameters().items()})
            arrays, _ = load_manifest(tmp / "ckpt")
            clone = Denoiser.init(np.random.default_rng(99), lay, c=4, d_state=2)
            load_parameters(clone, arrays)
            same = all(np.array_equal(a.data, b.data) for a, b in
                       zip(model.parameters().values(), clone.parameters().values()))
            batch = gen_synthetic(2, lay, rng, default_masks(lay))
            pred_a = model.predict(batch.x0, 3, batch.cond)
            pred_b = clone.predict(batch.x0, 3, batch.cond)
            if not same or not np.array_equal(pred_a, pred_b):
                problems.append("checkpoint save/load")
        ok = not problems
        return ok, "all bit-exact" if ok else "; ".join(sorted(set(problems))), {}

    return _timed("round-trips bit-exact", run)


def run_all(quick: bool = False) -> list[CheckResult]:
    """Every structural check in order; ``quick`` trims trial counts for smoke runs."""
    if quick:
        return [check_scan_equivalence(cases=10, max_len=512), check_gradients(seeds=2),
                check_region_isolation(trials=50), check_gate_semantics(trials=20), check_round_trips()]
    return [check_scan_equivalence(), check_gradients(), check_region_isolation(),
            check_gate_semantics(), check_round_trips()]
