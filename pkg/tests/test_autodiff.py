import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcmamba import autodiff as ad
from pcmamba.autodiff import GraphError, NonFiniteError, Tape, Tensor, backward, finite_diff_grad
from pcmamba.verify import GRAD_TOL, gradcheck, op_cases, relative_error

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def grad_of(fn, *xs):
    leaves = [Tensor(np.asarray(x, dtype=float), requires_grad=True) for x in xs]
    with Tape() as tape:
        loss = fn(*leaves)
    g = backward(loss, tape)
    return [g[t] for t in leaves]


def test_sum_gradient_is_ones():
    (g,) = grad_of(ad.sum_, [0.3, -2.0, 5.0])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_square_gradient():
    (g,) = grad_of(lambda x: ad.sum_(ad.mul(x, x)), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_layer_norm_hand_values():
    out = ad.layer_norm(Tensor([0.0, 2.0, 4.0]), Tensor([2.0, 2.0, 2.0]), Tensor([1.0, 1.0, 1.0]), eps=0.0)
    # mean 2, std sqrt(8/3)
    std = np.sqrt(8.0 / 3.0)
    np.testing.assert_allclose(out.data, [1 - 4 / std, 1.0, 1 + 4 / std], atol=1e-12)
    np.testing.assert_allclose(out.data, [-1.449, 1.0, 3.449], atol=1e-3)


def test_layer_norm_degenerate_cases():
    out = ad.layer_norm(Tensor([5.0, 5, 5, 5]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
    out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_array_equal(out.data, [1.0, -1.0])


def test_layer_norm_token_independence():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 4))
    g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    base = ad.layer_norm(Tensor(x), g, b).data
    x2 = x.copy()
    x2[1, 3] += rng.standard_normal(4)
    other = ad.layer_norm(Tensor(x2), g, b).data
    mask = np.ones((2, 5), bool)
    mask[1, 3] = False
    assert np.array_equal(base[mask], other[mask])
    assert not np.array_equal(base[1, 3], other[1, 3])


def test_layer_norm_gradient_matches_fd():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    w = Tensor(rng.standard_normal((3, 6)))
    f = lambda t: ad.sum_(ad.mul(ad.layer_norm(t, g, b), w))
    assert gradcheck(f, [x]) < GRAD_TOL


def test_gradient_accumulates_over_consumers():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(5)
    (both,) = grad_of(lambda x: ad.add(ad.sum_(ad.exp(x)), ad.sum_(ad.mul(x, x))), x0)
    (first,) = grad_of(lambda x: ad.sum_(ad.exp(x)), x0)
    (second,) = grad_of(lambda x: ad.sum_(ad.mul(x, x)), x0)
    np.testing.assert_allclose(both, first + second, rtol=1e-14)


def test_off_path_tensor_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([3.0, 4.0, 5.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x)
    g = backward(loss, tape, wrt=[x, unused])
    np.testing.assert_array_equal(g[unused], np.zeros(3))


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError):
        backward(y, tape)


def test_detached_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(x)  # computed outside the tape
    with Tape() as tape:
        ad.sum_(ad.mul(x, x))
    with pytest.raises(GraphError):
        backward(loss, tape)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_input_is_an_error(bad):
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([0.0, bad]))
    with pytest.raises(NonFiniteError):
        ad.layer_norm(Tensor([0.0, bad]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))


def test_finite_diff_oracle_examples():
    g = finite_diff_grad(ad.sum_, Tensor(np.random.default_rng(3).standard_normal(6)), h=1e-5)
    np.testing.assert_allclose(g, 1.0, atol=1e-9)
    g = finite_diff_grad(lambda t: ad.sum_(ad.mul(t, t)), Tensor([3.0]), h=1e-5)
    np.testing.assert_allclose(g, [6.0], atol=1e-8)


def test_finite_diff_rejects_non_finite_function():
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda t: float("nan"), Tensor([1.0]))


def test_tape_records_in_execution_order():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        a = ad.exp(x)
        b = ad.mul(a, a)
        ad.sum_(b)
    assert [r.name for r in tape.records] == ["exp", "mul", "sum"]


@pytest.mark.parametrize("seed", range(10))
def test_every_registered_op_passes_gradcheck(seed):
    rng = np.random.default_rng(seed)
    for name, (fn, inputs) in op_cases(rng).items():
        err = gradcheck(fn, inputs)
        assert err < GRAD_TOL, (name, err)


def test_op_cases_cover_registry():
    assert set(op_cases(np.random.default_rng(0))) == set(ad.OPS)


def test_phi_series_limit_and_continuity():
    z = np.array([-1e-12, -1e-9, -1.1e-8, -1e-3])
    vals = ad.phi_values(z)
    np.testing.assert_allclose(vals, np.expm1(z) / np.where(z == 0, 1, z), rtol=1e-7)
    assert ad.phi_values(np.array([0.0]))[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_softplus_positive_and_matches_log1p(x):
    out = ad.softplus(Tensor(x)).data
    assert np.all(out > 0) or np.all(x < -700)
    np.testing.assert_allclose(out, np.logaddexp(0.0, x), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relative_error_symmetric_and_zero_on_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    assert relative_error(a, a) == 0.0
    assert relative_error(a, b) == relative_error(b, a)


def test_indexing_a_tensor_is_refused():
    with pytest.raises(TypeError):
        Tensor([1.0, 2.0])[0]
