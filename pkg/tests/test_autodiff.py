import numpy as np
import pytest

from icgnn import autodiff as ad


def _fd(worst):
    assert worst < 1e-7, f"finite-diff mismatch {worst:.3e}"


def test_arithmetic_and_broadcast_grads():
    rng = np.random.default_rng(0)
    a = ad.parameter(rng.standard_normal((4, 5)))
    b = ad.parameter(rng.standard_normal((1, 5)))
    c = ad.parameter(rng.standard_normal(()) + 2.0)

    def loss():
        x = (a * b + a / c - b) * 0.5 + 1.0
        return ad.tsum(ad.mul(x, x))

    _fd(ad.finite_diff_check(loss, [a, b, c], probes=26, seed=1))


def test_matmul_grads_2d_and_batched():
    rng = np.random.default_rng(1)
    a = ad.parameter(rng.standard_normal((3, 4)))
    b = ad.parameter(rng.standard_normal((4, 2)))
    _fd(ad.finite_diff_check(lambda: ad.tsum(ad.matmul(a, b)), [a, b], probes=20, seed=2))

    batched = ad.parameter(rng.standard_normal((5, 3, 4)))
    shared = ad.parameter(rng.standard_normal((4, 2)))

    def loss():
        y = ad.matmul(batched, shared)
        return ad.tsum(ad.mul(y, y))

    _fd(ad.finite_diff_check(loss, [batched, shared], probes=40, seed=3))
    with pytest.raises(ValueError):
        ad.matmul(ad.parameter(np.ones(3)), ad.parameter(np.ones((3, 2))))


def test_shape_ops_grads():
    rng = np.random.default_rng(2)
    a = ad.parameter(rng.standard_normal((2, 3, 4)))
    idx = np.array([2, 0])

    def loss():
        x = ad.transpose(a, (1, 0, 2))
        x = ad.reshape(x, (3, 8))
        x = ad.concat([x, x * 2.0], axis=1)
        x = ad.take(x, idx, axis=0)
        return ad.tsum(ad.mul(x, x))

    _fd(ad.finite_diff_check(loss, [a], probes=24, seed=4))


def test_take_repeated_indices_accumulate():
    a = ad.parameter(np.ones((3, 2)))
    y = ad.tsum(ad.take(a, np.array([1, 1, 0]), axis=0))
    ad.backward(y)
    assert np.array_equal(a.grad, np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]))


def test_add_at_grads_and_values():
    rng = np.random.default_rng(3)
    base = ad.parameter(rng.standard_normal((2, 4, 3)))
    vals = ad.parameter(rng.standard_normal((2, 2, 3)))
    idx = np.array([1, 3])
    out = ad.add_at(base, vals, idx, axis=1)
    expect = base.data.copy()
    expect[:, idx, :] += vals.data
    assert np.array_equal(out.data, expect)

    def loss():
        y = ad.add_at(base, vals, idx, axis=1)
        return ad.tsum(ad.mul(y, y))

    _fd(ad.finite_diff_check(loss, [base, vals], probes=30, seed=5))


def test_reductions_grads():
    rng = np.random.default_rng(4)
    a = ad.parameter(rng.standard_normal((3, 4, 2)))

    def loss():
        s = ad.tsum(a, axis=1)
        m = ad.tmean(a, axis=(0, 2), keepdims=True)
        return ad.tsum(ad.mul(s, s)) + ad.tsum(m) + ad.tmean(a)

    _fd(ad.finite_diff_check(loss, [a], probes=24, seed=6))


def test_elementwise_grads():
    rng = np.random.default_rng(5)
    # keep values away from the relu/clip kinks so central differences are clean
    a = ad.parameter(rng.uniform(0.2, 1.5, (4, 3)) * rng.choice([-1.0, 1.0], (4, 3)))

    def loss():
        x = ad.relu(a) + ad.leaky_relu(a, 0.2) + ad.sigmoid(a)
        x = x + ad.exp(a * 0.1) + ad.log1p(ad.mul(a, a)) + ad.sqrt(ad.mul(a, a) + 0.5)
        x = x + ad.clip(a, -10.0, 10.0)
        return ad.tsum(x)

    _fd(ad.finite_diff_check(loss, [a], probes=12, seed=7))


def test_sigmoid_saturation_is_stable():
    a = ad.parameter(np.array([-800.0, -36.0, 0.0, 36.0, 800.0]).reshape(1, 5))
    y = ad.sigmoid(a)
    assert np.all(np.isfinite(y.data))
    assert y.data[0, 0] == 0.0 and y.data[0, -1] == 1.0
    ad.backward(ad.tsum(y))
    assert np.all(np.isfinite(a.grad))


def test_clip_blocks_gradient_outside_bounds():
    a = ad.parameter(np.array([[-2.0, 0.5, 3.0]]))
    ad.backward(ad.tsum(ad.clip(a, -1.0, 1.0)))
    assert np.array_equal(a.grad, np.array([[0.0, 1.0, 0.0]]))


def test_cmatmul_matches_numpy_complex():
    rng = np.random.default_rng(6)
    za = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
    zb = rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4))
    out = ad.cmatmul(ad.cconstant(za), ad.cconstant(zb))
    np.testing.assert_allclose(out.numpy(), za @ zb, rtol=1e-12, atol=1e-12)


def test_complex_pipeline_grads():
    rng = np.random.default_rng(7)
    za = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    zb = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    ca, cb = ad.cparameter(za), ad.cparameter(zb)

    def loss():
        y = ad.cmatmul(ca, cb)
        y = ad.cleaky_relu(y, 0.2)
        y = ad.cadd(y, ca)
        return ad.tsum(ad.cmodulus(y)) + ad.tsum(ad.cmodulus(ad.crelu(cb)))

    _fd(ad.finite_diff_check(loss, [ca.re, ca.im, cb.re, cb.im], probes=40, seed=8))


def test_cmodulus_zero_is_guarded():
    c = ad.CTensor(ad.parameter(np.zeros((2, 2))), ad.parameter(np.zeros((2, 2))))
    y = ad.tsum(ad.cmodulus(c))
    ad.backward(y)
    assert np.all(np.isfinite(c.re.grad)) and np.all(np.isfinite(c.im.grad))
    assert np.array_equal(c.re.grad, np.zeros((2, 2)))


def test_batch_norm_training_statistics_and_buffers():
    rng = np.random.default_rng(8)
    x = ad.constant(rng.standard_normal((64, 5)) * 3.0 + 1.0)
    scale = ad.parameter(np.ones((1, 5)))
    shift = ad.parameter(np.zeros((1, 5)))
    state = ad.BNState(5, dtype=np.float64)
    y = ad.batch_norm(x, scale, shift, state, training=True)
    np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-12)
    # output variance is var/(var + eps), i.e. 1 up to O(eps)
    np.testing.assert_allclose(y.data.var(axis=0), 1.0, rtol=1e-5)
    np.testing.assert_allclose(state.mean, 0.1 * x.data.mean(axis=0, keepdims=True), rtol=1e-12)
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.data.var(axis=0, keepdims=True), rtol=1e-12)


def test_batch_norm_eval_uses_running_buffers():
    state = ad.BNState(2, dtype=np.float64)
    state.mean[:] = np.array([[1.0, -1.0]])
    state.var[:] = np.array([[4.0, 0.25]])
    x = ad.constant(np.array([[3.0, 0.0]]))
    scale = ad.constant(np.array([[2.0, 2.0]]))
    shift = ad.constant(np.array([[0.5, 0.5]]))
    y = ad.batch_norm(x, scale, shift, state, training=False)
    expect = (x.data - state.mean) / np.sqrt(state.var + 1e-5) * 2.0 + 0.5
    np.testing.assert_allclose(y.data, expect, rtol=1e-12)


def test_batch_norm_grads_and_empty_batch():
    rng = np.random.default_rng(9)
    x = ad.parameter(rng.standard_normal((16, 3)))
    scale = ad.parameter(rng.standard_normal((1, 3)) + 1.5)
    shift = ad.parameter(rng.standard_normal((1, 3)))
    # random mixing weights: a plain sum of squares of the normalized output is
    # almost invariant to x, which starves finite differences of signal
    weights = ad.constant(rng.standard_normal((16, 3)))

    def loss():
        state = ad.BNState(3, dtype=np.float64)
        y = ad.batch_norm(x, scale, shift, state, training=True)
        y = ad.mul(y, weights)
        return ad.tsum(ad.mul(y, y))

    _fd(ad.finite_diff_check(loss, [x, scale, shift], probes=30, seed=10))
    with pytest.raises(ValueError):
        ad.batch_norm(ad.constant(np.zeros((0, 3))), scale, shift, ad.BNState(3), training=True)


def test_masked_softmax_composition_grads():
    # the attention pattern: mask logits, shift by detached max, exp, normalize
    rng = np.random.default_rng(10)
    logits = ad.parameter(rng.standard_normal((4, 6)))
    mask = np.zeros((4, 6))
    mask[:, :3] = 1.0

    def loss():
        masked = logits * mask + (1.0 - mask) * -1e9
        shifted = masked - ad.stop_gradient(ad.constant(masked.data.max(axis=1, keepdims=True)))
        e = ad.exp(shifted) * mask
        attn = e / ad.tsum(e, axis=1, keepdims=True)
        return ad.tsum(ad.mul(attn, attn))

    _fd(ad.finite_diff_check(loss, [logits], probes=18, seed=11))
    masked = logits.data * mask + (1.0 - mask) * -1e9
    e = np.exp(masked - masked.max(axis=1, keepdims=True)) * mask
    attn = e / e.sum(axis=1, keepdims=True)
    assert np.all(attn[:, 3:] == 0.0)
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, rtol=1e-12)


def test_stop_gradient_detaches():
    a = ad.parameter(np.array([[2.0]]))
    y = ad.tsum(a * ad.stop_gradient(a))
    ad.backward(y)
    assert a.grad[0, 0] == 2.0  # only the live factor contributes


def test_backward_rejects_nonscalar():
    a = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(a * 2.0)


def test_grad_accumulates_across_reuse():
    a = ad.parameter(np.array([[3.0]]))
    y = ad.tsum(a * a + a)
    ad.backward(y)
    assert a.grad[0, 0] == pytest.approx(7.0)


def test_checked_mode_flags_nonfinite():
    ad.set_check_finite(True)
    try:
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            ad.div(ad.constant(np.ones((1, 1))), ad.constant(np.zeros((1, 1))))
    finally:
        ad.set_check_finite(False)


def test_adam_single_step_matches_reference():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -0.25])
    g = p.grad.copy()
    opt.step()
    m_hat, v_hat = g, g * g
    expect = np.array([1.0, -2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)
    opt.zero_grad()
    assert p.grad is None


def test_adam_converges_on_quadratic():
    p = ad.parameter(np.array([5.0, -4.0]))
    opt = ad.Adam({"p": p}, lr=0.05)
    for _ in range(3000):
        opt.zero_grad()
        diff = p - np.array([1.0, 2.0])
        ad.backward(ad.tsum(ad.mul(diff, diff)))
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


def test_init_streams_deterministic_and_distinct():
    w1 = ad.init_real((64, 64), 64, ad.rng_for(7, "layer0.w"))
    w2 = ad.init_real((64, 64), 64, ad.rng_for(7, "layer0.w"))
    w3 = ad.init_real((64, 64), 64, ad.rng_for(7, "layer1.w"))
    w4 = ad.init_real((64, 64), 64, ad.rng_for(8, "layer0.w"))
    assert np.array_equal(w1, w2)
    assert not np.array_equal(w1, w3)
    assert not np.array_equal(w1, w4)
    assert w1.dtype == np.float32
    assert abs(w1.var() - 2.0 / 64) < 0.01


def test_init_complex_plane_variance():
    re, im = ad.init_complex((128, 128), 128, ad.rng_for(0, "c.w"))
    assert abs(re.var() - 1.0 / 128) < 0.002
    assert abs(im.var() - 1.0 / 128) < 0.002
    with pytest.raises(ValueError):
        ad.init_real((2, 2), 0, ad.rng_for(0, "bad"))


def test_eval_graph_is_pruned():
    a = ad.constant(np.ones((8, 8)))
    b = ad.constant(np.ones((8, 8)))
    y = ad.matmul(ad.relu(a), b)
    assert not y.requires_grad and y._parents == () and y._backward is None
