import math

import numpy as np
import pytest

from refquery import ndnet
from refquery.errors import EmptyBatchError, InvalidShapeError, StaleTapeError
from refquery.ndnet import (
    AdamState,
    FlopCounter,
    ParamSet,
    Tape,
    Tensor,
    backward,
    bce_loss,
    broadcast_to,
    concat,
    conv1d,
    dense,
    l2_normalize,
    maxpool1d,
    mse_loss,
    mul,
    relu,
    sigmoid,
    square,
    sub,
    take_rows,
)


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar f w.r.t. array x (independent oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-3):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() <= rtol, f"max relative gradient error {rel.max():.3e}"


# ---------------------------------------------------------------------------
# conv1d

def test_conv1d_identity_kernel():
    x = Tensor(np.array([[0.0], [1.0], [0.0]]))
    w = Tensor(np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1))
    b = Tensor(np.zeros(1))
    y = conv1d(x, w, b, stride=1)
    np.testing.assert_allclose(y.data[:, 0], [0.0, 1.0, 0.0])


def test_conv1d_box_kernel_zero_padding():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    w = Tensor(np.ones((3, 1, 1)))
    b = Tensor(np.zeros(1))
    y = conv1d(x, w, b, stride=1)
    np.testing.assert_allclose(y.data[:, 0], [3.0, 6.0, 5.0])


def test_conv1d_stride2_length_599():
    x = Tensor(np.zeros((599, 1)))
    w = Tensor(np.zeros((3, 1, 4)))
    b = Tensor(np.zeros(4))
    y = conv1d(x, w, b, stride=2)
    assert y.shape == (300, 4)


def test_conv1d_channel_mismatch():
    x = Tensor(np.zeros((10, 2)))
    w = Tensor(np.zeros((3, 3, 4)))
    b = Tensor(np.zeros(4))
    with pytest.raises(InvalidShapeError):
        conv1d(x, w, b)


def test_conv1d_batched_matches_single():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(5, 21, 3)).astype(np.float32)
    w = Tensor(rng.normal(size=(3, 3, 4)).astype(np.float32))
    b = Tensor(rng.normal(size=4).astype(np.float32))
    y_batch = conv1d(Tensor(xs), w, b, stride=2).data
    for i in range(5):
        y_one = conv1d(Tensor(xs[i]), w, b, stride=2).data
        np.testing.assert_allclose(y_batch[i], y_one, atol=1e-5)


# ---------------------------------------------------------------------------
# maxpool1d

def test_maxpool_basic():
    y = maxpool1d(Tensor(np.array([2.0, 1.0, 5.0, 3.0]).reshape(4, 1)))
    np.testing.assert_allclose(y.data[:, 0], [2.0, 5.0])


def test_maxpool_constant():
    y = maxpool1d(Tensor(np.full((4, 1), 7.25)))
    np.testing.assert_allclose(y.data[:, 0], [7.25, 7.25])


def test_maxpool_ceil_mode_length_19():
    y = maxpool1d(Tensor(np.arange(19.0).reshape(19, 1)))
    assert y.shape == (10, 1)
    assert y.data[-1, 0] == 18.0  # trailing single element pooled as itself


# ---------------------------------------------------------------------------
# dense

def test_dense_zero_weight_gives_bias():
    y = dense(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.zeros((3, 2))),
              Tensor(np.array([4.0, 5.0])))
    np.testing.assert_allclose(y.data, [4.0, 5.0])


def test_dense_identity():
    y = dense(Tensor(np.array([1.0, 2.0])), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, [1.0, 2.0])


def test_dense_hand_example():
    y = dense(Tensor(np.array([1.0, 2.0])),
              Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])),
              Tensor(np.array([1.0, 1.0])))
    np.testing.assert_allclose(y.data, [2.0, 5.0])


def test_dense_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        dense(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# l2_normalize

def test_l2_normalize_3_4():
    y = l2_normalize(Tensor(np.array([3.0, 4.0])))
    np.testing.assert_allclose(y.data, [0.6, 0.8], rtol=1e-6)


def test_l2_normalize_unit_vector_unchanged():
    v = np.array([1.0, 0.0, 0.0])
    y = l2_normalize(Tensor(v))
    np.testing.assert_allclose(y.data, v, atol=1e-7)


def test_l2_normalize_zero_vector_guard():
    y = l2_normalize(Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, np.zeros(4))


# ---------------------------------------------------------------------------
# losses

def test_mse_zero_on_equal():
    assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0


def test_mse_hand_values():
    assert mse_loss(Tensor([0.0]), [2.0]).item() == pytest.approx(4.0)
    assert mse_loss(Tensor([0.0, 2.0]), [2.0, 0.0]).item() == pytest.approx(4.0)


def test_mse_empty_batch():
    with pytest.raises(EmptyBatchError):
        mse_loss(Tensor(np.zeros(0)), np.zeros(0))


def test_bce_half_prob():
    assert bce_loss(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2), rel=1e-5)


def test_bce_perfect_prediction_limit():
    assert bce_loss(Tensor([1.0]), [1.0]).item() == pytest.approx(0.0, abs=1e-5)


def test_bce_symmetric_pair():
    loss = bce_loss(Tensor([0.5, 0.5]), [0.0, 1.0]).item()
    assert loss == pytest.approx(math.log(2), rel=1e-5)


def test_bce_empty_batch():
    with pytest.raises(EmptyBatchError):
        bce_loss(Tensor(np.zeros(0)), np.zeros(0))


# ---------------------------------------------------------------------------
# backward: finite-difference oracle per operator

def _fd_check(build, x0):
    """build(x_tensor) -> scalar loss tensor; checks d loss / d x against FD."""
    x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = build(x)
    backward(tape, loss)

    def f(arr):
        return build(Tensor(arr, dtype=np.float64)).item()

    assert_grads_close(x.grad, numeric_grad(f, x0))


def test_grad_conv1d():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(9, 2))
    w = Tensor(rng.normal(size=(3, 2, 3)), dtype=np.float64)
    b = Tensor(rng.normal(size=3), dtype=np.float64)
    for stride in (1, 2):
        out_len = -(-9 // stride)
        tt = rng.normal(size=(out_len, 3))
        _fd_check(lambda x, s=stride, tt=tt: mse_loss(conv1d(x, w, b, stride=s), tt), x0)


def test_grad_conv1d_weights_and_bias():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 9, 2)), dtype=np.float64)
    w0 = rng.normal(size=(3, 2, 3))
    b0 = rng.normal(size=3)
    t = rng.normal(size=(4, 5, 3))

    w = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    b = Tensor(b0.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = mse_loss(conv1d(x, w, b, stride=2), t)
    backward(tape, loss)

    def f_w(arr):
        return mse_loss(conv1d(x, Tensor(arr, dtype=np.float64),
                               Tensor(b0, dtype=np.float64), stride=2), t).item()

    def f_b(arr):
        return mse_loss(conv1d(x, Tensor(w0, dtype=np.float64),
                               Tensor(arr, dtype=np.float64), stride=2), t).item()

    assert_grads_close(w.grad, numeric_grad(f_w, w0))
    assert_grads_close(b.grad, numeric_grad(f_b, b0))


def test_grad_maxpool():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(7, 2))
    t = rng.normal(size=(4, 2))
    _fd_check(lambda x: mse_loss(maxpool1d(x), t), x0)


def test_grad_dense():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=6)
    w = Tensor(rng.normal(size=(6, 3)), dtype=np.float64)
    b = Tensor(rng.normal(size=3), dtype=np.float64)
    t = rng.normal(size=3)
    _fd_check(lambda x: mse_loss(dense(x, w, b), t), x0)


def test_grad_relu_sigmoid_square_l2():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=8) + 0.05  # keep away from relu kink
    t = rng.normal(size=8)
    _fd_check(lambda x: mse_loss(relu(x), t), x0)
    _fd_check(lambda x: mse_loss(sigmoid(x), t), x0)
    _fd_check(lambda x: mse_loss(square(x), t), x0)
    _fd_check(lambda x: mse_loss(l2_normalize(x), t), x0)


def test_grad_binary_ops_broadcast():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=4)
    other = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
    t = rng.normal(size=(5, 4))
    _fd_check(lambda x: mse_loss(mul(other, broadcast_to(x, (5, 4))), t), x0)
    _fd_check(lambda x: mse_loss(sub(other, broadcast_to(x, (5, 4))), t), x0)


def test_grad_concat_take_rows():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(3, 4))
    idx = np.array([0, 2, 2, 1, 0])
    t = rng.normal(size=(5, 8))

    def build(x):
        rows = take_rows(x, idx)
        return mse_loss(concat([rows, square(rows)], axis=-1), t)

    _fd_check(build, x0)


def test_grad_bce():
    rng = np.random.default_rng(8)
    x0 = rng.uniform(0.1, 0.9, size=6)
    y = (rng.uniform(size=6) > 0.5).astype(np.float64)
    _fd_check(lambda x: bce_loss(x, y), x0)


def test_frozen_parameters_receive_zero_gradients():
    rng = np.random.default_rng(9)
    ps = ParamSet()
    w = ps.add("w", Tensor(rng.normal(size=(4, 2)), dtype=np.float64), trainable=False)
    v = ps.add("v", Tensor(rng.normal(size=(4, 2)), dtype=np.float64), trainable=True)
    x = Tensor(rng.normal(size=4), dtype=np.float64)
    with Tape() as tape:
        loss = mse_loss(dense(x, w, Tensor(np.zeros(2), dtype=np.float64)), [0.0, 0.0])
        loss = ndnet.add(loss, mse_loss(dense(x, v, Tensor(np.zeros(2), dtype=np.float64)),
                                        [0.0, 0.0]))
    grads = backward(tape, loss, ps)
    np.testing.assert_array_equal(grads["w"], np.zeros((4, 2)))
    assert np.abs(grads["v"]).max() > 0


def test_unused_parameter_gets_zero_gradient():
    ps = ParamSet()
    used = ps.add("used", Tensor(np.array([1.0, 2.0]), requires_grad=True))
    ps.add("unused", Tensor(np.array([3.0]), requires_grad=True))
    with Tape() as tape:
        loss = mse_loss(square(used), [0.0, 0.0])
    grads = backward(tape, loss, ps)
    np.testing.assert_array_equal(grads["unused"], np.zeros(1))
    assert np.abs(grads["used"]).max() > 0


def test_stale_tape_error():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with Tape() as tape:
        loss = mse_loss(x, [0.0])
    backward(tape, loss)
    with pytest.raises(StaleTapeError):
        backward(tape, loss)
    with pytest.raises(StaleTapeError):
        with tape:
            pass


def test_backward_requires_scalar_loss():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = square(x)
    with pytest.raises(InvalidShapeError):
        backward(tape, y)


def test_gradient_accumulation_order_independent():
    # batched pass vs two single passes agree within reassociation tolerance
    rng = np.random.default_rng(10)
    w0 = rng.normal(size=(6, 2)).astype(np.float32)
    x = rng.normal(size=(2, 6)).astype(np.float32)
    t = rng.normal(size=(2, 2)).astype(np.float32)

    def run(xs, ts):
        ps = ParamSet()
        w = ps.add("w", Tensor(w0.copy()))
        b = ps.add("b", Tensor(np.zeros(2, dtype=np.float32)))
        with Tape() as tape:
            loss = mse_loss(dense(Tensor(xs), w, b), ts)
        backward(tape, loss)
        return w.grad

    g_batch = run(x, t)
    g_each = (run(x[:1], t[:1]) + run(x[1:], t[1:])) / 2.0
    np.testing.assert_allclose(g_batch, g_each, atol=1e-5)


# ---------------------------------------------------------------------------
# shape algebra and determinism

def test_encoder_length_schedule_599():
    lengths = [599]
    x = Tensor(np.zeros((599, 1), dtype=np.float32))
    w1 = Tensor(np.zeros((3, 1, 2), dtype=np.float32))
    b = Tensor(np.zeros(2, dtype=np.float32))
    y = conv1d(x, w1, b, stride=2)
    lengths.append(y.shape[0])
    w = Tensor(np.zeros((3, 2, 2), dtype=np.float32))
    for _ in range(5):
        y = maxpool1d(y)
        lengths.append(y.shape[0])
        if len(lengths) < 11:
            y = conv1d(y, w, b, stride=1)
            lengths.append(y.shape[0])
    assert lengths == [599, 300, 150, 150, 75, 75, 38, 38, 19, 19, 10]


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(33, 2)).astype(np.float32)
    w = rng.normal(size=(3, 2, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    y1 = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    y2 = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_keeps_params():
    ps = ParamSet()
    p = ps.add("p", Tensor(np.array([1.0, -2.0], dtype=np.float32)))
    st = AdamState(ps, lr=1e-3)
    st.step(ps, {"p": np.zeros(2, dtype=np.float32)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_zero_lr_keeps_params():
    ps = ParamSet()
    p = ps.add("p", Tensor(np.array([1.0], dtype=np.float32)))
    st = AdamState(ps, lr=0.0)
    st.step(ps, {"p": np.array([3.0], dtype=np.float32)})
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_first_step_magnitude():
    # first bias-corrected step is lr * g / (|g| + eps) ~= lr * sign(g)
    ps = ParamSet()
    p = ps.add("p", Tensor(np.array([0.0], dtype=np.float64)))
    st = AdamState(ps, lr=1e-3)
    st.step(ps, {"p": np.array([0.1], dtype=np.float64)})
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-4)
    assert st.step_count == 1


def test_adam_skips_frozen():
    ps = ParamSet()
    frozen = ps.add("f", Tensor(np.array([5.0], dtype=np.float32)), trainable=False)
    ps.add("t", Tensor(np.array([5.0], dtype=np.float32)))
    st = AdamState(ps, lr=0.1)
    st.step(ps, {"f": np.array([1.0], dtype=np.float32),
                 "t": np.array([1.0], dtype=np.float32)})
    assert frozen.data[0] == 5.0
    assert ps["t"].data[0] != 5.0


def test_adam_rejects_trainable_set_change():
    ps = ParamSet()
    ps.add("p", Tensor(np.array([1.0], dtype=np.float32)))
    st = AdamState(ps, lr=0.1)
    ps.set_all_trainable(False)
    with pytest.raises(ValueError):
        st.step(ps, {})


# ---------------------------------------------------------------------------
# ParamSet

def test_paramset_duplicate_name_rejected():
    ps = ParamSet()
    ps.add("a", Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        ps.add("a", Tensor(np.zeros(1)))


def test_paramset_checksum_tracks_values():
    ps = ParamSet()
    p = ps.add("a", Tensor(np.array([1.0, 2.0], dtype=np.float32)))
    c0 = ps.checksum()
    assert ps.checksum() == c0
    p.data[0] = 3.0
    assert ps.checksum() != c0


def test_paramset_merged_shares_tensors():
    a, b = ParamSet(), ParamSet()
    pa = a.add("x", Tensor(np.zeros(2, dtype=np.float32)))
    b.add("y", Tensor(np.zeros(2, dtype=np.float32)), trainable=False)
    m = ParamSet.merged(a, b)
    assert m["x"] is pa
    assert m.trainable_names() == ["x"]
    assert m.num_values() == 4


def test_flop_counter_dense():
    x = Tensor(np.zeros((2, 3), dtype=np.float32))
    w = Tensor(np.zeros((3, 4), dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    with FlopCounter() as fc:
        dense(x, w, b)
    assert fc.total == 2 * (2 * 3 * 4 + 4)
