import numpy as np
import pytest

from stainscope.ae import tensorops as to


def _conv_brute(x, w, b, stride, padding):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for a in range(k):
                            for bb in range(k):
                                acc += xp[ni, c, i * stride + a, j * stride + bb] * w[o, c, a, bb]
                    out[ni, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def _tconv_brute(x, w, b, stride, padding, output_padding):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for a in range(k):
                            for bb in range(k):
                                oi = i * stride + a - padding
                                oj = j * stride + bb - padding
                                if 0 <= oi < ho and 0 <= oj < wo:
                                    out[ni, o, oi, oj] += x[ni, c, i, j] * w[c, o, a, bb]
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def _num_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f() w.r.t. array x (in place)."""
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------- conv


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_matches_loops(stride, padding):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = to.conv2d(x, w, b, stride=stride, padding=padding)
    want = _conv_brute(x, w, b, stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_shape_and_errors():
    assert to.conv2d_output_shape(256, 3, 2, 1) == 128
    assert to.conv2d_output_shape(256, 3, 1, 1) == 256
    with pytest.raises(ValueError):
        to.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((3, 4, 3, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv2d_backward_numeric(stride, padding):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal(to.conv2d(x, w, b, stride=stride, padding=padding).shape)

    def loss():
        return float((to.conv2d(x, w, b, stride=stride, padding=padding) * r).sum())

    dx, dw, db = to.conv2d_backward(r, x, w, stride=stride, padding=padding)
    np.testing.assert_allclose(dx, _num_grad(loss, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, _num_grad(loss, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, _num_grad(loss, b), rtol=1e-6, atol=1e-8)


def test_conv2d_adjoint_identity():
    # <conv(x), y> == <x, dx(y)> and == <w, dw(y)> since conv is bilinear.
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 4, 10, 10))
    w = rng.standard_normal((5, 4, 3, 3))
    y = rng.standard_normal((3, 5, 5, 5))
    fwd = to.conv2d(x, w, stride=2, padding=1)
    assert fwd.shape == y.shape
    dx, dw, _ = to.conv2d_backward(y, x, w, stride=2, padding=1)
    lhs = float((fwd * y).sum())
    assert lhs == pytest.approx(float((x * dx).sum()), rel=1e-10)
    assert lhs == pytest.approx(float((w * dw).sum()), rel=1e-10)


# ---------------------------------------------------------------- tconv


@pytest.mark.parametrize(
    "stride,padding,output_padding",
    [(1, 0, 0), (1, 1, 0), (2, 1, 0), (2, 1, 1), (3, 0, 2)],
)
def test_transposed_conv2d_matches_loops(stride, padding, output_padding):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(2)
    got = to.transposed_conv2d(
        x, w, b, stride=stride, padding=padding, output_padding=output_padding
    )
    want = _tconv_brute(x, w, b, stride, padding, output_padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_transposed_conv2d_is_conv_adjoint():
    # The defining property: <tconv(y), x> == <y, conv(x)> for all x, y.
    rng = np.random.default_rng(14)
    w = rng.standard_normal((4, 3, 3, 3))  # (c_in, c_out) for the tconv
    wc = w.transpose(1, 0, 2, 3)  # the matching conv weight (c_out, c_in)
    x = rng.standard_normal((2, 3, 11, 11))
    fwd = to.conv2d(x, wc.transpose(1, 0, 2, 3), stride=2, padding=1)
    y = rng.standard_normal(fwd.shape)
    back = to.transposed_conv2d(y, w, stride=2, padding=1)
    assert back.shape == x.shape
    assert float((back * x).sum()) == pytest.approx(float((y * fwd).sum()), rel=1e-10)


def test_transposed_conv2d_output_padding_rules():
    assert to.tconv2d_output_shape(128, 3, 2, 1, 1) == 256
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((2, 2, 3, 3))
    with pytest.raises(ValueError):
        to.transposed_conv2d(x, w, stride=2, output_padding=2)


@pytest.mark.parametrize("stride,padding,output_padding", [(2, 1, 1), (1, 1, 0)])
def test_transposed_conv2d_backward_numeric(stride, padding, output_padding):
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(2)
    kw = dict(stride=stride, padding=padding, output_padding=output_padding)
    r = rng.standard_normal(to.transposed_conv2d(x, w, b, **kw).shape)

    def loss():
        return float((to.transposed_conv2d(x, w, b, **kw) * r).sum())

    dx, dw, db = to.transposed_conv2d_backward(r, x, w, **kw)
    np.testing.assert_allclose(dx, _num_grad(loss, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, _num_grad(loss, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, _num_grad(loss, b), rtol=1e-6, atol=1e-8)


def test_chunked_and_unchunked_paths_agree(monkeypatch):
    rng = np.random.default_rng(16)
    x = rng.standard_normal((7, 3, 12, 12))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    fwd = to.conv2d(x, w, b, stride=2, padding=1)
    r = rng.standard_normal(fwd.shape)
    grads = to.conv2d_backward(r, x, w, stride=2, padding=1)
    tx = rng.standard_normal((7, 4, 6, 6))
    tw = rng.standard_normal((4, 3, 3, 3))
    tfwd = to.transposed_conv2d(tx, tw, stride=2, padding=1, output_padding=1)

    monkeypatch.setattr(to, "_COL_BUDGET_BYTES", 1)  # forces one-sample chunks
    np.testing.assert_allclose(
        to.conv2d(x, w, b, stride=2, padding=1), fwd, rtol=1e-12, atol=1e-14
    )
    small = to.conv2d_backward(r, x, w, stride=2, padding=1)
    for a, bb in zip(small, grads):
        np.testing.assert_allclose(a, bb, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(
        to.transposed_conv2d(tx, tw, stride=2, padding=1, output_padding=1),
        tfwd,
        rtol=1e-12,
        atol=1e-14,
    )


# ---------------------------------------------------------------- batch norm


def test_batch_norm_training_normalizes_and_updates_running():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
    gamma, beta = np.ones(3), np.zeros(3)
    rm, rv = np.zeros(3), np.ones(3)
    out, _ = to.batch_norm(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(
        out.var(axis=(0, 2, 3)), var / (var + 1e-5), rtol=1e-10
    )
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * m / (m - 1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(18)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    rm = rng.standard_normal(3)
    rv = rng.uniform(0.5, 2.0, 3)
    rm0, rv0 = rm.copy(), rv.copy()
    out, _ = to.batch_norm(x, gamma, beta, rm, rv, training=False)
    want = gamma.reshape(1, 3, 1, 1) * (
        (x - rm0.reshape(1, 3, 1, 1)) / np.sqrt(rv0.reshape(1, 3, 1, 1) + 1e-5)
    ) + beta.reshape(1, 3, 1, 1)
    np.testing.assert_allclose(out, want, rtol=1e-12)
    assert np.array_equal(rm, rm0) and np.array_equal(rv, rv0)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_backward_numeric(training):
    rng = np.random.default_rng(19)
    x = rng.standard_normal((3, 2, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)
    rm = rng.standard_normal(2)
    rv = rng.uniform(0.5, 2.0, 2)
    r = rng.standard_normal(x.shape)

    def loss():
        out, _ = to.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)
        return float((out * r).sum())

    _, cache = to.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)
    dx, dgamma, dbeta = to.batch_norm_backward(r, cache)
    np.testing.assert_allclose(dx, _num_grad(loss, x), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(dgamma, _num_grad(loss, gamma), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(dbeta, _num_grad(loss, beta), rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------- pointwise


def test_leaky_relu_values_and_grad():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    np.testing.assert_allclose(to.leaky_relu(x), [-0.02, -0.005, 0.0, 0.5, 2.0])
    dout = np.ones(5)
    np.testing.assert_allclose(
        to.leaky_relu_backward(dout, x), [0.01, 0.01, 1.0, 1.0, 1.0]
    )
    xf = np.array([-1.0, 1.0], dtype=np.float32)
    assert to.leaky_relu(xf).dtype == np.float32


def test_sigmoid_stable_and_grad():
    x = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
    with np.errstate(over="raise", invalid="raise"):  # underflow to 0 is fine
        y = to.sigmoid(x)
    np.testing.assert_allclose(y[2], 0.5)
    assert y[0] == 0.0 and y[4] == 1.0
    np.testing.assert_allclose(y[3], 1.0 / (1.0 + np.exp(-1.0)), rtol=1e-15)
    dout = np.ones(5)
    np.testing.assert_allclose(to.sigmoid_backward(dout, y), y * (1 - y), rtol=1e-15)


def test_mse_loss_value_and_grad():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.array([[1.0, 0.0], [0.0, 4.0]])
    loss, dpred = to.mse_loss(pred, target)
    assert loss == pytest.approx((4.0 + 9.0) / 4.0)
    np.testing.assert_allclose(dpred, 2.0 * (pred - target) / 4.0)
    r = np.random.default_rng(20).standard_normal((3, 3))

    def f():
        return to.mse_loss(pred2, target2)[0]

    pred2 = r.copy()
    target2 = np.zeros((3, 3))
    np.testing.assert_allclose(
        to.mse_loss(pred2, target2)[1], _num_grad(f, pred2), rtol=1e-7, atol=1e-9
    )


def test_adam_update_matches_reference():
    rng = np.random.default_rng(21)
    p = rng.standard_normal(6)
    ref_p = p.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    ref_m, ref_v = m.copy(), v.copy()
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    for t in range(1, 8):
        g = rng.standard_normal(6)
        to.adam_update(p, g, m, v, t, lr=lr, beta1=b1, beta2=b2, eps=eps)
        ref_m = b1 * ref_m + (1 - b1) * g
        ref_v = b2 * ref_v + (1 - b2) * g * g
        mhat = ref_m / (1 - b1**t)
        vhat = ref_v / (1 - b2**t)
        ref_p = ref_p - lr * mhat / (np.sqrt(vhat) + eps)
        np.testing.assert_allclose(p, ref_p, rtol=1e-12)
    with pytest.raises(ValueError):
        to.adam_update(p, np.zeros(6), m, v, 0)


def test_adam_first_step_is_signlike():
    p = np.array([1.0, -1.0])
    m = np.zeros(2)
    v = np.zeros(2)
    g = np.array([3.0, -0.25])
    to.adam_update(p, g, m, v, 1, lr=0.1)
    # bias correction makes the first step ~lr * sign(g)
    np.testing.assert_allclose(p, [1.0 - 0.1 * (1 - 1e-8 / 3), -1.0 + 0.1 * (1 - 4e-8)], rtol=1e-6)
