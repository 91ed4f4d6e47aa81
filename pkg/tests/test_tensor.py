import math

import numpy as np
import pytest

from compvid import tensor as T
from compvid.tensor import Tape, Tensor, backward, gradcheck


def leaf(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_weight_gives_bias(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    b = np.array([0.5, -1.0, 2.0])
    out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(b), padding=1)
    for k in range(3):
        assert np.all(out.data[0, k] == b[k])


def test_conv2d_output_size():
    out = T.conv2d(Tensor(np.zeros((1, 1, 9, 7))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, 5, 4)


def test_conv2d_rejections():
    x = Tensor(np.zeros((1, 2, 6, 6)))
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError, match="height"):
        T.conv2d(Tensor(np.zeros((1, 2, 6, 7))), Tensor(np.zeros((1, 2, 3, 3))), stride=2, padding=0)


def test_conv2d_gradcheck(f64, rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    err = gradcheck(lambda x, w, b: T.conv2d(x, w, b, padding=1), [x, w, b])
    assert err <= 1e-5


# ---------------------------------------------------------------- temporal conv

def test_temporal_conv_center_tap_has_no_temporal_mixing(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    mix = rng.standard_normal((5, 3))
    w = np.zeros((5, 3, 3))
    w[:, :, 1] = mix
    out = T.temporal_conv1d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out, np.einsum("kc,fchw->fkhw", mix, x), rtol=1e-12, atol=1e-12)


def test_temporal_conv_single_frame_equals_1x1_conv(rng):
    x = rng.standard_normal((1, 3, 4, 4))
    w = rng.standard_normal((2, 3, 3))
    b = rng.standard_normal(2)
    a = T.temporal_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    c = T.conv2d(Tensor(x), Tensor(w[:, :, 1:2, None]), Tensor(b)).data
    np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


def test_temporal_conv_mixes_only_neighbours(rng):
    x = np.zeros((6, 1, 1, 1))
    x[3] = 1.0
    out = T.temporal_conv1d(Tensor(x), Tensor(np.ones((1, 1, 3)))).data.ravel()
    np.testing.assert_array_equal(out, [0, 0, 1, 1, 1, 0])


def test_temporal_conv_rejects_zero_frames():
    with pytest.raises(ValueError, match="zero frames"):
        T.temporal_conv1d(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.zeros((2, 2, 3))))


def test_temporal_conv_gradcheck(f64, rng):
    x = rng.standard_normal((4, 2, 3, 3))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    assert gradcheck(T.temporal_conv1d, [x, w, b]) <= 1e-5


# ---------------------------------------------------------------- attention

def test_attention_single_key_returns_value(rng):
    q = rng.standard_normal((5, 4))
    out = T.attention(Tensor(q), Tensor(rng.standard_normal((1, 4))), Tensor(np.array([[2.0, -3.0]])))
    np.testing.assert_allclose(out.data, np.tile([[2.0, -3.0]], (5, 1)))


def test_attention_identical_keys_average_values(rng):
    k = np.tile(rng.standard_normal((1, 4)), (6, 1))
    v = rng.standard_normal((6, 3))
    out = T.attention(Tensor(rng.standard_normal((2, 4))), Tensor(k), Tensor(v))
    np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), rtol=1e-12)


def test_attention_rows_sum_to_one(rng):
    # with v = identity the output rows are the attention weights
    out = T.attention(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(np.eye(5)))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=1e-12)


def test_attention_rejects_empty_keys():
    with pytest.raises(ValueError, match="M = 0"):
        T.attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 2))))


def test_attention_gradcheck(f64, rng):
    args = [rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))]
    assert gradcheck(T.attention, args) <= 1e-5


# ---------------------------------------------------------------- group norm

def test_group_norm_constant_input_is_zero():
    out = T.group_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_group_norm_zero_gamma_gives_beta(rng):
    beta = np.array([1.0, 2.0, 3.0, 4.0])
    out = T.group_norm(Tensor(rng.standard_normal((2, 4, 3, 3))), 2, Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_group_norm_statistics(rng):
    x = rng.standard_normal((3, 6, 4, 4)) * 5 + 2
    out = T.group_norm(Tensor(x), 3, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-8).data
    g = out.reshape(3, 3, -1)
    np.testing.assert_allclose(g.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(g.var(axis=-1), 1.0, atol=1e-6)


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ValueError, match="divisible"):
        T.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


def test_group_norm_gradcheck(f64, rng):
    args = [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)]
    assert gradcheck(lambda x, g, b: T.group_norm(x, 2, g, b), args) <= 1e-5


# ---------------------------------------------------------------- sinusoidal

def test_sinusoidal_zero():
    e = T.sinusoidal_embed(0, 64).data
    np.testing.assert_array_equal(e[:32], 0.0)
    np.testing.assert_array_equal(e[32:], 1.0)


def test_sinusoidal_distinct_and_bounded():
    e = T.sinusoidal_embed(np.arange(1001), 64, dtype=np.float64).data
    assert np.all(np.abs(e) <= 1.0)
    d = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0


def test_sinusoidal_rejects_odd_dim():
    with pytest.raises(ValueError, match="even"):
        T.sinusoidal_embed(3, 63)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones(rng):
    x = leaf(rng.standard_normal((3, 4)))
    with Tape() as tape:
        backward(T.sum(x), tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_gives_2x(rng):
    a = rng.standard_normal(5)
    x = leaf(a)
    with Tape() as tape:
        backward(T.sum(T.mul(x, x)), tape)
    np.testing.assert_allclose(x.grad, 2 * a)


def test_backward_accumulates_fan_out(rng):
    x = leaf(rng.standard_normal(4))
    with Tape() as tape:
        y = T.add(T.mul(x, 3.0), T.mul(x, 2.0))
        backward(T.sum(y), tape)
    np.testing.assert_allclose(x.grad, 5.0)


def test_backward_rejects_untaped_loss():
    x = leaf(np.ones(3))
    loss = T.sum(x)  # no tape open
    with Tape() as tape:
        with pytest.raises(RuntimeError, match="tape"):
            backward(loss, tape)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = T.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)


def test_tape_is_cleared_after_backward():
    x = leaf(np.ones(3))
    with Tape() as tape:
        backward(T.sum(T.square(x)), tape)
        assert len(tape) == 0


def test_no_recording_without_requires_grad():
    with Tape() as tape:
        T.mul(Tensor(np.ones(3)), 2.0)
        assert len(tape) == 0


def test_debug_mode_catches_nan():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.mul(Tensor(np.array([np.inf])), 0.0)
    finally:
        T.set_debug(False)


def test_linearity_of_conv_and_linear(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    a = 2.5
    np.testing.assert_allclose(T.conv2d(Tensor(a * x), Tensor(w), padding=1).data,
                               a * T.conv2d(Tensor(x), Tensor(w), padding=1).data, rtol=1e-12)
    W = rng.standard_normal((5, 4))
    v = rng.standard_normal((3, 5))
    np.testing.assert_allclose(T.linear(Tensor(a * v), Tensor(W)).data, a * T.linear(Tensor(v), Tensor(W)).data,
                               rtol=1e-12)
    tw = rng.standard_normal((2, 2, 3))
    xt = rng.standard_normal((4, 2, 3, 3))
    np.testing.assert_allclose(T.temporal_conv1d(Tensor(a * xt), Tensor(tw)).data,
                               a * T.temporal_conv1d(Tensor(xt), Tensor(tw)).data, rtol=1e-12)


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- small ops

def test_embedding_negative_id_is_zero_row(rng):
    table = rng.standard_normal((4, 3))
    out = T.embedding(Tensor(table), np.array([2, -1, 0])).data
    np.testing.assert_array_equal(out[0], table[2])
    np.testing.assert_array_equal(out[1], 0.0)


def test_pool_and_upsample_shapes(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 6)))
    assert T.avg_pool2x(x).shape == (1, 2, 2, 3)
    assert T.upsample2x(x).shape == (1, 2, 8, 12)
    np.testing.assert_allclose(T.avg_pool2x(T.upsample2x(x)).data, x.data)
    with pytest.raises(ValueError):
        T.avg_pool2x(Tensor(np.zeros((1, 1, 3, 4))))


def test_silu_values():
    out = T.silu(Tensor(np.array([0.0, 1.0]))).data
    np.testing.assert_allclose(out, [0.0, 1.0 / (1.0 + math.exp(-1.0))])
