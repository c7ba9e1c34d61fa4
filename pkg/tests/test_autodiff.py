import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecgunlearn.autodiff import (
    SGD,
    AutodiffError,
    NonFiniteError,
    RunningStats,
    Tensor,
    add,
    apply,
    attention_transfer,
    backward,
    batch_norm1d,
    clamp,
    conv1d,
    fresh_tape,
    global_avg_pool,
    gradcheck_report,
    finite_diff_gradcheck,
    kl_divergence,
    linear,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    sign,
    softmax,
    softmax_cross_entropy,
    tanh,
    tensor_sum,
    upsample,
    current_tape,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# primitive definitions ------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sign_of_zero_is_zero():
    np.testing.assert_array_equal(sign(Tensor([-3.0, 0.0, 5.0])).data, [-1, 0, 1])


def test_clamp_to_band():
    x = np.array([0.0, 1.0])
    out = clamp(Tensor([0.2, 1.7]), x - 0.5, x + 0.5)
    np.testing.assert_array_equal(out.data, [0.2, 1.5])


def test_conv1d_identity_kernel():
    out = conv1d(Tensor(np.array([[[1.0, 2.0, 3.0]]])), Tensor(np.ones((1, 1, 1))), None, 1, 0)
    np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])


def test_conv1d_constant_signal():
    out = conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, [[[2, 2, 2]]])


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 11)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    stride, pad = 2, 1
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    lout = (11 + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, lout))
    for n in range(2):
        for o in range(4):
            for t in range(lout):
                ref[n, o, t] = (xp[n, :, t * stride:t * stride + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv1d_shape_mismatch():
    with pytest.raises(ValueError):
        conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 3, 2))))


def test_batchnorm_constant_input_gives_zero():
    out = batch_norm1d(Tensor(np.full((2, 3, 5), 4.0)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_zero_gamma():
    rng = np.random.default_rng(0)
    out = batch_norm1d(Tensor(rng.standard_normal((2, 3, 5))), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)))
    np.testing.assert_array_equal(out.data, 5.0)


def test_batchnorm_output_statistics():
    rng = np.random.default_rng(1)
    gamma, beta = np.array([0.5, 2.0, 3.0]), np.array([-1.0, 0.0, 4.0])
    # large-variance input so the eps regularizer is negligible at 1e-6
    out = batch_norm1d(Tensor(100 * rng.standard_normal((8, 3, 50))), Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2)), beta, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(0, 2)), gamma, rtol=1e-6)


def test_batchnorm_running_stats_and_eval():
    stats = RunningStats(2, momentum=0.5)
    x = np.random.default_rng(2).standard_normal((4, 2, 6))
    batch_norm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats=stats)
    np.testing.assert_allclose(stats.mean, 0.5 * x.mean(axis=(0, 2)))
    out = batch_norm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mode="eval", stats=stats)
    ref = (x - stats.mean[None, :, None]) / np.sqrt(stats.var[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((3, 5))), np.array([0, 2, 4]))
    assert loss.item() == pytest.approx(np.log(5), abs=1e-12)


def test_cross_entropy_saturated():
    z = np.zeros((1, 3))
    z[0, 1] = 50.0
    assert softmax_cross_entropy(Tensor(z), np.array([1])).item() < 1e-9


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(5)
    z, y = rng.standard_normal((4, 3)), np.array([0, 2, 1, 1])
    with fresh_tape():
        t = Tensor(z, requires_grad=True)
        backward(softmax_cross_entropy(t, y))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(t.grad, (p - np.eye(3)[y]) / 4, rtol=1e-12, atol=1e-15)
    assert finite_diff_gradcheck(lambda v: softmax_cross_entropy(v, y), z) < 1e-6


def test_kl_cases():
    same = Tensor(np.array([[0.3, 0.7]]))
    assert kl_divergence(same, same).item() == 0.0
    kl = kl_divergence(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.5, 0.5]])))
    assert kl.item() == pytest.approx(np.log(2), abs=1e-12)


def test_kl_rejects_unnormalized():
    with pytest.raises(ValueError):
        kl_divergence(Tensor(np.array([[0.5, 0.6]])), Tensor(np.array([[0.5, 0.5]])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_kl_nonnegative(a, b):
    p = softmax(Tensor(a)).data
    q = softmax(Tensor(b)).data
    assert kl_divergence(Tensor(p), Tensor(q)).item() >= 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    np.testing.assert_allclose(softmax(Tensor(z)).data.sum(axis=1), 1.0, atol=1e-12)


def test_attention_transfer_cases():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 5))
    assert attention_transfer([Tensor(a)], [Tensor(a)]).item() == 0.0
    assert attention_transfer([Tensor(a)], [Tensor(2.5 * a)]).item() == pytest.approx(0.0, abs=1e-12)
    # channel-summed squares [3, 4] and [4, 3] -> unit maps [0.6, 0.8], [0.8, 0.6]
    t = np.sqrt(np.array([[[3.0, 4.0]]]))
    s = np.sqrt(np.array([[[4.0, 3.0]]]))
    out = attention_transfer([Tensor(t)], [Tensor(s)]).item()
    assert abs(out - np.hypot(0.2, 0.2)) < 1e-12


def test_upsample_nearest():
    out = upsample(Tensor(np.array([[[1.0, 2.0]]])), 3)
    np.testing.assert_array_equal(out.data, [[[1, 1, 1, 2, 2, 2]]])


def test_apply_unknown_kind():
    with pytest.raises(ValueError, match="unknown primitive"):
        apply("maxpool", Tensor([1.0]))


def test_apply_dispatches():
    np.testing.assert_array_equal(apply("relu", Tensor([-1.0, 1.0])).data, [0.0, 1.0])


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


# tape -------------------------------------------------------------------------------

def test_linear_gradient():
    with fresh_tape():
        x = Tensor([3.0], requires_grad=True)
        backward(tensor_sum(scalar_mul(x, 2.0)))
    assert x.grad[0] == 2.0


def test_independent_parameter_has_zero_grad():
    with fresh_tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([5.0], requires_grad=True)
        relu(p)     # on the tape but not feeding the loss
        backward(tensor_sum(relu(x)))
    np.testing.assert_array_equal(p.grad, 0.0)


def test_no_grad_records_nothing():
    with fresh_tape():
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            relu(x)
        assert len(current_tape()) == 0


def test_tape_replay_is_exact():
    rng = np.random.default_rng(4)
    with fresh_tape():
        x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
        h = relu(conv1d(x, w, None, 1, 1))
        out = linear(global_avg_pool(h), Tensor(rng.standard_normal((2, 4))))
        tape = current_tape()
        recorded = [r.output.data.copy() for r in tape.records]
        replayed = tape.replay()
        assert len(replayed) == len(recorded)
        np.testing.assert_array_equal(replayed[-1], out.data)
        for r, a in zip(recorded, replayed):
            np.testing.assert_array_equal(r, a)


def test_backward_needs_scalar():
    with fresh_tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(AutodiffError):
            backward(relu(x))


# gradient checks --------------------------------------------------------------------

def test_gradcheck_linear_function_is_exact():
    assert finite_diff_gradcheck(lambda v: tensor_sum(scalar_mul(v, 3.0)), np.arange(5.0)) < 1e-10


def test_gradcheck_excludes_relu_kink():
    rep = gradcheck_report(lambda v: tensor_sum(relu(v)), np.array([0.0, 1.0, -1.0]))
    assert (0,) in rep.excluded
    assert rep.max_rel_err < 1e-8


def test_composite_gradcheck():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 2, 10))
    y = np.array([0, 1, 1])
    w2 = rng.standard_normal((2, 4))

    def f(w):
        h = relu(conv1d(Tensor(x), reshape_w(w), None, 1, 1))
        return softmax_cross_entropy(linear(global_avg_pool(h), Tensor(w2)), y)

    def reshape_w(w):
        return reshape(w, (4, 2, 3))

    assert finite_diff_gradcheck(f, rng.standard_normal(24)) < 1e-5


@pytest.mark.parametrize("fn", [
    lambda v: tensor_sum(tanh(v)),
    lambda v: tensor_sum(add(v, scalar_mul(v, -0.3))),
    lambda v: tensor_sum(upsample(v, 2)),
    lambda v: tensor_sum(global_avg_pool(tanh(v))),
])
def test_elementwise_gradchecks(fn):
    x = np.random.default_rng(2).standard_normal((2, 3, 4))
    assert finite_diff_gradcheck(fn, x) < 1e-6


# optimizer --------------------------------------------------------------------------

def _set_grad(p, g):
    p.grad = np.asarray(g, dtype=np.float64).reshape(p.shape)


def test_sgd_zero_lr_is_identity():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = SGD([p], lr=0.0, momentum=0.9)
    _set_grad(p, [3.0, 4.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_single_update():
    p = Tensor([1.0], requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.0)
    _set_grad(p, [0.5])
    opt.step()
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_converges_on_quadratic():
    p = Tensor([0.0], requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.0)
    for _ in range(200):
        opt.zero_grad()
        with fresh_tape():
            d = reshape(add(p, Tensor([-3.0])), (1, 1))
            backward(tensor_sum(linear(d, d)))      # (p - 3)^2
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-3


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite), st.floats(0.01, 5.0))
def test_scalar_mul_gradient_is_constant(x, c):
    with fresh_tape():
        t = Tensor(x, requires_grad=True)
        backward(tensor_sum(scalar_mul(t, c)))
    np.testing.assert_allclose(t.grad, c)
