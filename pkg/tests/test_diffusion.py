import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcmamba import autodiff as ad
from pcmamba.autodiff import Tape, Tensor
from pcmamba.diffusion import (Adam, Denoiser, DiffusionSchedule, SGDMomentum, TrainSettings, add_noise,
                               cfg_combine, ddim_sample, ddim_steps, default_masks, featurize,
                               gen_synthetic, make_schedule, region_control_metrics, region_means,
                               train, training_loss)
from pcmamba.masks import Rect, TokenLayout
from pcmamba.pcm import GateConfig
from pcmamba.verify import GRAD_TOL, param_gradcheck, tiny_denoiser_problem

LAY = TokenLayout(3, 4, 4, 2)


def small_model(seed=0, variant="full", lay=LAY):
    return Denoiser.init(np.random.default_rng(seed), lay, c=4, d_state=2, d_emb=4, d_id=3,
                         d_frame=2, variant=variant)


def small_data(count=2, seed=0, lay=LAY):
    return gen_synthetic(count, lay, np.random.default_rng(seed), default_masks(lay), d_id=3, d_emb=4)


# --- schedule and noising -------------------------------------------------------------

def test_schedule_single_step():
    s = make_schedule(1, 0.01, 0.5)
    np.testing.assert_array_equal(s.betas, [0.01])
    assert s.alpha_bar[0] == 1.0


def test_schedule_terminal_alpha_bar():
    s = make_schedule(1000, 1e-4, 0.02)
    direct = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        direct *= 1.0 - b
    assert s.alpha_bar[-1] == pytest.approx(direct, rel=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.floats(1e-5, 0.4), st.floats(0.01, 0.5))
def test_schedule_invariants(T, lo, span):
    hi = min(lo + span, 0.99)
    s = make_schedule(T, lo, hi)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    if T > 1:
        assert np.all(np.diff(s.betas) > 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_add_noise_examples():
    s = make_schedule(10, 0.01, 0.2)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    np.testing.assert_array_equal(add_noise(x0, 0, eps, s), x0)
    exact = DiffusionSchedule(np.array([0.64]), np.array([1.0, 0.36]))
    np.testing.assert_allclose(add_noise(np.zeros((2, 3)), 1, eps, exact), 0.8 * eps, rtol=1e-15)
    with pytest.raises(ValueError):
        add_noise(x0, 11, eps, s)
    with pytest.raises(ValueError):
        add_noise(x0, -1, eps, s)


def test_add_noise_tends_to_eps():
    s = make_schedule(1000, 1e-4, 0.2)
    eps = np.random.default_rng(1).standard_normal(5)
    np.testing.assert_allclose(add_noise(np.ones(5), 1000, eps, s), eps, atol=1e-10)


# --- guidance and sampling ---------------------------------------------------------------

def test_cfg_combine_examples():
    c, u = np.random.default_rng(2).standard_normal((2, 4))
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert cfg_combine(np.array([2.0]), np.array([1.0]), 3.0)[0] == 4.0
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(3), 2.0)


class OracleEps:
    """Returns the exact noise for a known (x0, eps) pair: eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab)."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def __call__(self, x_t, t, cond, uncond):
        ab = self.sched.alpha_bar[t]
        return (x_t - math.sqrt(ab) * self.x0) / math.sqrt(1 - ab)


def test_ddim_oracle_recovers_x0():
    s = make_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 3, 4))
    out = ddim_sample(OracleEps(x0, s), None, s, list(range(100, 0, -1)), 2.0, x_init=rng.standard_normal(x0.shape))
    np.testing.assert_allclose(out, x0, atol=1e-6)


@pytest.mark.parametrize("t", [1, 17, 50, 100])
def test_noising_then_oracle_inversion(t):
    s = make_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(t)
    x0, eps = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    xt = add_noise(x0, t, eps, s)
    out = ddim_sample(OracleEps(x0, s), None, s, [t], 1.0, x_init=xt)
    np.testing.assert_allclose(out, x0, atol=1e-6)


def test_single_step_closed_form():
    s = make_schedule(50, 1e-3, 0.2)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    out = ddim_sample(lambda *_: eps, None, s, [50], 1.0, x_init=x)
    ab = s.alpha_bar[50]
    np.testing.assert_allclose(out, (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab), rtol=1e-14)


@pytest.mark.parametrize("steps", [[], [5, 5], [3, 7], [0], [101]])
def test_invalid_step_sequences(steps):
    s = make_schedule(100, 1e-3, 0.2)
    with pytest.raises(ValueError):
        ddim_sample(lambda *_: 0.0, None, s, steps, 1.0, x_init=np.zeros(2))


def test_ddim_steps_spacing():
    s = make_schedule(100, 1e-3, 0.2)
    st_ = ddim_steps(s, 20)
    assert st_[0] == 100 and st_[-1] == 1 and len(st_) == 20
    assert all(a > b for a, b in zip(st_, st_[1:]))


def test_sampling_deterministic_and_gate_respecting():
    model = small_model()
    for p in model.parameters().values():
        p.data = p.data + np.random.default_rng(5).normal(0, 0.3, p.shape)
    data = small_data()
    s = make_schedule(20, 1e-3, 0.3)
    steps = ddim_steps(s, 5)
    cond = data.cond.with_gates((1, 0))
    a = ddim_sample(model, cond, s, steps, 2.0, np.random.default_rng(9))
    b = ddim_sample(model, cond, s, steps, 2.0, np.random.default_rng(9))
    assert np.array_equal(a, b)
    other = cond.__class__(cond.e_audio, np.random.default_rng(1).standard_normal(cond.e_motion.shape),
                           cond.e_id, cond.reference, cond.masks, cond.gates)
    c = ddim_sample(model, other, s, steps, 2.0, np.random.default_rng(9))
    assert np.array_equal(a, c)


def test_guidance_one_uses_only_conditional_prediction():
    calls = []

    def eps_fn(x, t, cond, uncond):
        calls.append(uncond)
        return np.zeros_like(x)

    s = make_schedule(10, 1e-3, 0.3)
    ddim_sample(eps_fn, None, s, [10, 5, 1], 1.0, x_init=np.ones(3))
    assert calls == [False, False, False]


# --- synthetic data ---------------------------------------------------------------------

def test_region_readback_exact():
    data = small_data(3, seed=6)
    masks = default_masks(LAY)
    ch0 = data.x0[..., 0]
    assert np.all(ch0[:, :, masks.audio.grid.astype(bool)] == data.audio[..., None])
    assert np.all(ch0[:, :, masks.motion.grid.astype(bool)] == data.motion[..., None])
    np.testing.assert_allclose(region_means(data.x0, masks.audio), data.audio, rtol=0, atol=1e-15)
    assert np.all(np.abs(data.audio) <= 1) and np.all(np.abs(data.motion) <= 1)


def test_audio_region_independent_of_motion():
    from pcmamba.diffusion import compose_latent, identity_texture
    masks = default_masks(LAY)
    rng = np.random.default_rng(7)
    tex = identity_texture(rng.standard_normal((1, 8)), LAY)
    a = rng.uniform(-1, 1, (1, 3))
    x1 = compose_latent(tex, a, rng.uniform(-1, 1, (1, 3)), masks)
    x2 = compose_latent(tex, a, rng.uniform(-1, 1, (1, 3)), masks)
    am = masks.audio.grid.astype(bool)
    assert np.array_equal(x1[:, :, am], x2[:, :, am])
    outside = ~masks.face.grid.astype(bool)
    assert np.array_equal(x1[:, :, outside], tex[:, :, outside])


def test_generation_reproducible():
    a, b = small_data(4, seed=8), small_data(4, seed=8)
    assert np.array_equal(a.x0, b.x0) and np.array_equal(a.cond.e_audio, b.cond.e_audio)


def test_featurize_is_injective_on_grid():
    v = np.linspace(-1, 1, 201)
    f = featurize(v, 8)
    d = np.linalg.norm(f[:, None] - f[None], axis=-1)
    assert (d + np.eye(201) * 10).min() > 1e-3


def test_default_masks_on_desk_grid():
    m = default_masks(TokenLayout(8, 8, 8, 4))
    assert m.face.grid.sum() == 36 and m.audio.grid.sum() == 8 and m.motion.grid.sum() == 28
    assert not (m.audio.grid & m.motion.grid).any()


# --- metrics -----------------------------------------------------------------------------

def test_metrics_on_ground_truth():
    data = small_data(4, seed=9)
    r = region_control_metrics(data.x0, data.audio, data.motion, default_masks(LAY))
    assert r.corr_mouth_audio == pytest.approx(1.0, abs=1e-12)
    assert r.corr_face_motion == pytest.approx(1.0, abs=1e-12)


def test_metrics_null_distribution():
    # independent noise: r * sqrt(n-2) / sqrt(1-r^2) follows Student t with n-2 dof
    from scipy import stats
    lay = TokenLayout(32, 4, 4, 1)
    masks = default_masks(lay)
    rng = np.random.default_rng(10)
    n, trials = lay.frames, 2000
    rs = np.empty(trials)
    for i in range(trials):
        data = gen_synthetic(1, lay, rng, masks)
        noise = rng.standard_normal(data.x0.shape)
        rs[i] = region_control_metrics(noise, data.audio, data.motion, masks).corr_mouth_audio
    tvals = rs * math.sqrt(n - 2) / np.sqrt(1 - rs ** 2)
    assert stats.kstest(tvals, stats.t(n - 2).cdf).pvalue > 1e-3
    # the |r| bound holding with probability 0.95
    t95 = stats.t(n - 2).ppf(0.975)
    r95 = t95 / math.sqrt(n - 2 + t95 ** 2)
    assert 0.34 < r95 < 0.36
    assert np.mean(np.abs(rs) < r95) >= 0.93
    # |r| < 0.3 holds only about 90% of the time at 32 frames
    p03 = 2 * stats.t(n - 2).cdf(0.3 * math.sqrt(n - 2) / math.sqrt(1 - 0.09)) - 1
    assert abs(np.mean(np.abs(rs) < 0.3) - p03) < 0.03


def test_constant_region_is_an_error():
    data = small_data(2, seed=11)
    flat = np.zeros_like(data.x0)
    with pytest.raises(ValueError):
        region_control_metrics(flat, data.audio, data.motion, default_masks(LAY))


# --- model, loss, training ----------------------------------------------------------------

def test_output_shape_and_zero_init():
    model = small_model()
    data = small_data()
    out = model(data.x0, np.array([3, 4]), data.cond)
    assert out.shape == data.x0.shape


def test_loss_zero_for_exact_model_and_one_for_zero_model():
    data = small_data(64, seed=12)
    s = make_schedule(10, 1e-3, 0.2)

    class Exact:
        def __call__(self, x_t, t, cond, drop=None):
            ab = s.alpha_bar[t].reshape(-1, 1, 1, 1, 1)
            return Tensor((x_t - np.sqrt(ab) * data.x0) / np.sqrt(1 - ab))

    class Zero:
        def __call__(self, x_t, t, cond, drop=None):
            return Tensor(np.zeros_like(x_t))

    assert training_loss(Exact(), data, data.cond, s, np.random.default_rng(0)).item() < 1e-20
    assert training_loss(Zero(), data, data.cond, s, np.random.default_rng(0)).item() == pytest.approx(1.0, abs=0.02)


def test_loss_reproducible_bit_exact():
    m1, m2 = small_model(13), small_model(13)
    data = small_data(2, seed=13)
    s = make_schedule(10, 1e-3, 0.2)
    a = training_loss(m1, data, data.cond, s, np.random.default_rng(1)).item()
    b = training_loss(m2, data, data.cond, s, np.random.default_rng(1)).item()
    assert a == b


@pytest.mark.parametrize("seed", range(10))
def test_denoiser_loss_gradient(seed):
    model, loss_fn = tiny_denoiser_problem(seed)
    assert sum(p.data.size for p in model.parameters().values()) <= 2000
    err, where = param_gradcheck(loss_fn, model.parameters())
    assert err < GRAD_TOL, where


def test_unconditional_branch_ignores_controls():
    model = small_model(14)
    for p in model.parameters().values():
        p.data = p.data + np.random.default_rng(2).normal(0, 0.3, p.shape)
    data = small_data(2, seed=14)
    a = model.predict(data.x0, 5, data.cond, uncond=True)
    other = data.cond.__class__(data.cond.e_audio + 1, data.cond.e_motion - 1, data.cond.e_id,
                                data.cond.reference, data.cond.masks, data.cond.gates)
    assert np.array_equal(a, model.predict(data.x0, 5, other, uncond=True))
    assert not np.array_equal(model.predict(data.x0, 5, data.cond), model.predict(data.x0, 5, other))


@pytest.mark.parametrize("variant", ["no_mask_drop", "no_identity", "cross_attention"])
def test_variants_run(variant):
    model = small_model(variant=variant)
    data = small_data()
    s = make_schedule(10, 1e-3, 0.2)
    with Tape() as tape:
        loss = training_loss(model, data, data.cond.with_gates((1, 1)), s, np.random.default_rng(0))
    g = ad.backward(loss, tape, wrt=list(model.parameters().values()))
    assert np.isfinite(loss.item()) and all(np.isfinite(v).all() for v in g.values())


def test_unknown_variant():
    with pytest.raises(ValueError):
        small_model(variant="bogus")


def test_training_lowers_loss_and_is_deterministic():
    s = make_schedule(20, 1e-3, 0.3)
    masks = default_masks(LAY)
    settings_ = TrainSettings(steps=60, batch=2, lr=3e-3, optimizer="adam", seed=3)
    log1 = train(small_model(1), s, masks, settings_)
    log2 = train(small_model(1), s, masks, settings_)
    assert [r.loss for r in log1] == [r.loss for r in log2]
    assert [r.gate_config for r in log1] == [r.gate_config for r in log2]
    assert {r.gate_config for r in log1} == {"01", "10", "11"}
    assert np.mean([r.loss for r in log1[-15:]]) < np.mean([r.loss for r in log1[:15]])


@pytest.mark.parametrize("opt_cls", [SGDMomentum, Adam])
def test_optimizers_descend_on_quadratic(opt_cls):
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = opt_cls({"x": x}, lr=0.05)
    for _ in range(300):
        with Tape() as tape:
            loss = ad.sum_(ad.mul(x, x))
        opt.step(ad.backward(loss, tape))
    assert np.abs(x.data).max() < 0.05
