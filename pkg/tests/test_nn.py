import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pktseg.errors import DegenerateBatch, OddDimension, ShapeMismatch
from pktseg.nn import (
    DiffTensor,
    LayerParams,
    OptimizerConfig,
    batchnorm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dice_ce_loss,
    downsample,
    finite_difference_check,
    no_grad,
    one_hot,
    reduce_sum,
    relu,
    sgd_momentum_step,
    softmax_channels,
)


def t(x, grad=False):
    return DiffTensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------------ conv3d

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 4, 5, 6))
    w = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        w[c, c] = 1
    out = conv3d(x, w, np.zeros(3), 1, 0)
    assert np.array_equal(out.values, x)


def test_conv_all_ones_sums_27():
    out = conv3d(np.ones((1, 1, 5, 5, 5)), np.ones((1, 1, 3, 3, 3)), None, 1, 0)
    assert out.shape == (1, 1, 3, 3, 3)
    assert np.all(out.values == 27)


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 2, 1, 1] = 1  # one voxel after the centre along x
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 2, 1, 1] = 5
    out = conv3d(x, w, None, 1, 0)
    assert out.values.item() == 5


def test_conv_float32_example_gradient():
    # random 1x2x4x4x4 input and 3^3 kernel, gradients taken in 32-bit
    r = np.random.default_rng(0)
    x = r.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    w = r.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    err = finite_difference_check(lambda x, w: reduce_sum(conv3d(x, w, None, 1, 1)), [x, w],
                                  reference_dtype=np.float64)
    assert err < 1e-3


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 1, 4, 4, 4))
    w = r.standard_normal((2, 1, 3, 3, 3))
    lhs = conv3d(a * x + b * y, w, None, 1, 1).values
    rhs = a * conv3d(x, w, None, 1, 1).values + b * conv3d(y, w, None, 1, 1).values
    assert np.max(np.abs(lhs - rhs)) < 1e-5 * max(1, np.abs(lhs).max())


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv3d(np.ones((1, 2, 3, 3, 3)), np.ones((1, 3, 3, 3, 3)))


# -------------------------------------------------------- conv_transpose3d

def test_transpose_single_voxel_block():
    out = conv_transpose3d(np.full((1, 1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2, 2)), None, 2)
    assert out.shape == (1, 1, 2, 2, 2)
    assert np.all(out.values == 2.5)


def test_transpose_zero_in_zero_out(rng):
    out = conv_transpose3d(np.zeros((1, 2, 3, 3, 3)), rng.standard_normal((2, 4, 2, 2, 2)), None, 2)
    assert not out.values.any()


def test_transpose_adjoint_of_strided_conv(rng):
    # <conv(x; stride 2), y> == <x, convT(y)> with the kernel viewed as (out, in) vs (in, out)
    x = rng.standard_normal((1, 3, 6, 6, 6))
    y = rng.standard_normal((1, 2, 3, 3, 3))
    w = rng.standard_normal((2, 3, 2, 2, 2))  # conv: 3 -> 2
    lhs = np.sum(conv3d(x, w, None, 2, 0).values * y)
    rhs = np.sum(x * conv_transpose3d(y, w, None, 2).values)
    assert abs(lhs - rhs) < 1e-4 * max(1, abs(lhs))


def test_transpose_input_gradient_is_conv(rng):
    y = t(rng.standard_normal((1, 2, 3, 3, 3)), grad=True)
    w = rng.standard_normal((2, 3, 2, 2, 2))
    g = rng.standard_normal((1, 3, 6, 6, 6))
    reduce_sum(conv_transpose3d(y, w, None, 2), g).backward()
    expect = conv3d(g, np.transpose(w, (0, 1, 2, 3, 4)), None, 2, 0).values
    assert np.max(np.abs(y.grad - expect)) < 1e-4


# --------------------------------------------------------------- batchnorm

def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((3, 4, 5, 5, 5)) * 3 + 2
    out = batchnorm3d(x, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), train=True).values
    assert np.max(np.abs(out.mean(axis=(0, 2, 3, 4)))) < 1e-4
    assert np.max(np.abs(out.var(axis=(0, 2, 3, 4)) - 1)) < 1e-4


def test_batchnorm_eval_identity(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    out = batchnorm3d(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=False, eps=1e-5)
    assert np.allclose(out.values, x / math.sqrt(1 + 1e-5))


def test_batchnorm_running_update(rng):
    x = rng.standard_normal((2, 1, 2, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    batchnorm3d(x, np.ones(1), np.zeros(1), rm, rv, train=True, momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        batchnorm3d(np.ones((1, 1, 1, 1, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)


# ------------------------------------------------------- relu / softmax / pool

def test_relu_values():
    assert relu(np.array([-1.0, 2.0])).values.tolist() == [0.0, 2.0]


def test_relu_all_negative_zero_grad():
    x = t(-np.ones((1, 1, 2, 2, 2)), grad=True)
    out = relu(x)
    assert not out.values.any()
    reduce_sum(out).backward()
    assert not x.grad.any()


def test_relu_gradcheck_off_kink(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    x[np.abs(x) < 0.05] = 0.5
    assert finite_difference_check(lambda x: reduce_sum(relu(x), np.arange(54.0).reshape(x.shape)), [x]) < 1e-4


def test_softmax_uniform_logits():
    out = softmax_channels(np.zeros((1, 2, 1, 1, 1))).values
    assert np.allclose(out.ravel(), [0.5, 0.5])


def test_softmax_one_three():
    out = softmax_channels(np.array([1.0, 3.0]).reshape(1, 2, 1, 1, 1)).values.ravel()
    e2 = math.exp(2)
    assert out[0] == pytest.approx(1 / (1 + e2), abs=1e-12)
    assert out[1] == pytest.approx(e2 / (1 + e2), abs=1e-12)
    assert out == pytest.approx([0.1192, 0.8808], abs=1e-4)


@given(c=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_softmax_shift_invariant(c, seed):
    x = np.random.default_rng(seed).standard_normal((1, 3, 2, 2, 2))
    assert np.allclose(softmax_channels(x).values, softmax_channels(x + c).values, atol=1e-12)


@given(seed=st.integers(0, 1000), scale=st.sampled_from([1.0, 1e2, 1e4]))
def test_softmax_valid_distribution_large_logits(seed, scale):
    x = np.random.default_rng(seed).standard_normal((2, 3, 2, 2, 2)) * scale
    p = softmax_channels(x.astype(np.float32)).values
    assert np.all(np.isfinite(p)) and p.min() >= 0
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_downsample_constant():
    out = downsample(np.full((1, 2, 4, 4, 6), 3.0)).values
    assert out.shape == (1, 2, 2, 2, 3) and np.all(out == 3)


def test_downsample_block_max():
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    assert downsample(x).values.item() == 8


def test_downsample_odd_dim():
    with pytest.raises(OddDimension):
        downsample(np.ones((1, 1, 3, 2, 2)))


def test_downsample_gradcheck_unique_maxima(rng):
    x = rng.permutation(128).astype(np.float64).reshape(1, 2, 4, 4, 4) * 0.01
    w = rng.standard_normal((1, 2, 2, 2, 2))
    assert finite_difference_check(lambda x: reduce_sum(downsample(x), w), [x]) < 1e-4


def test_concat_shapes_and_slices(rng):
    a, b = rng.standard_normal((2, 2, 4, 3, 3, 3))
    out = concat_channels(a, b).values
    assert out.shape == (2, 8, 3, 3, 3)
    assert np.array_equal(out[:, :4], a) and np.array_equal(out[:, 4:], b)


def test_concat_gradient_ones(rng):
    a, b = t(rng.standard_normal((1, 2, 2, 2, 2)), True), t(rng.standard_normal((1, 3, 2, 2, 2)), True)
    reduce_sum(concat_channels(a, b)).backward()
    assert np.all(a.grad == 1) and np.all(b.grad == 1)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeMismatch):
        concat_channels(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 4)))


# ------------------------------------------------------------------- loss

def test_loss_perfect_prediction_near_zero(rng):
    labels = rng.integers(0, 2, (2, 4, 4, 4))
    target = one_hot(labels, 2, np.float64)
    assert dice_ce_loss(target, target).item() < 1e-5


def test_loss_empty_foreground_dice_term_zero():
    target = one_hot(np.zeros((1, 2, 2, 2), int), 2, np.float64)
    probs = target.copy()  # zero foreground probability everywhere
    loss = dice_ce_loss(probs, target).item()
    # soft Dice = eps / eps = 1; the CE part of a perfect background is 0
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_loss_gradcheck(rng):
    logits = rng.standard_normal((2, 2, 3, 3, 3))
    target = one_hot(rng.integers(0, 2, (2, 3, 3, 3)), 2, np.float64)
    assert finite_difference_check(lambda z: dice_ce_loss(softmax_channels(z), target), [logits]) < 1e-3


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_ce_loss(np.full((1, 2, 2, 2, 2), 0.5), np.zeros((1, 2, 2, 2, 1)))


# ---------------------------------------------------------------- optimizer

def _param(value):
    lp = LayerParams()
    lp.add_param("w", np.array([value], dtype=np.float64))
    return lp


def test_sgd_two_momentum_steps():
    lp = _param(0.0)
    cfg = OptimizerConfig(learning_rate=0.1, momentum=0.9)
    lp.params["w"].grad = np.ones(1)
    sgd_momentum_step(lp, cfg)
    assert lp.params["w"].values[0] == pytest.approx(-0.1, abs=1e-15)
    lp.params["w"].grad = np.ones(1)
    sgd_momentum_step(lp, cfg)
    assert lp.velocity["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert lp.params["w"].values[0] == pytest.approx(-0.29, abs=1e-15)


@given(theta=st.floats(-10, 10), g=st.floats(-10, 10), lr=st.floats(1e-4, 1.0))
def test_sgd_plain_closed_form(theta, g, lr):
    lp = _param(theta)
    lp.params["w"].grad = np.array([g])
    sgd_momentum_step(lp, OptimizerConfig(learning_rate=lr, momentum=0.0))
    assert lp.params["w"].values[0] == theta - lr * g


def test_sgd_zero_gradient_decays_momentum():
    lp = _param(1.0)
    lp.velocity["w"][:] = 2.0
    sgd_momentum_step(lp, OptimizerConfig(learning_rate=0.1, momentum=0.9))
    assert lp.velocity["w"][0] == pytest.approx(1.8)
    assert lp.params["w"].values[0] == pytest.approx(1.0 - 0.1 * 1.8)


def test_optimizer_defaults():
    cfg = OptimizerConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (0.02, 16, 200)


# ------------------------------------------------------------- the checker

def test_checker_exact_for_linear(rng):
    c = rng.standard_normal((1, 1, 3, 3, 3))
    x = rng.standard_normal((1, 1, 3, 3, 3))
    assert finite_difference_check(lambda x: reduce_sum(x, c), [x]) < 1e-8


def test_checker_quadratic(rng):
    x = rng.standard_normal((1, 1, 2, 2, 2))

    def square_sum(x):
        from pktseg.nn.tensor import make_result

        def backward(g):
            x.accumulate(g * 2 * x.values)
        return make_result(np.asarray((x.values ** 2).sum()), [x], backward)

    assert finite_difference_check(square_sum, [x], eps=1e-3) < 1e-5


def test_checker_conv_relu_sum(rng):
    x = rng.standard_normal((1, 1, 4, 4, 4))
    w = rng.standard_normal((2, 1, 3, 3, 3))
    err = finite_difference_check(lambda x, w: reduce_sum(relu(conv3d(x, w, None, 1, 1))), [x, w])
    assert err < 1e-3


def test_no_grad_records_nothing(rng):
    w = t(rng.standard_normal((1, 1, 1, 1, 1)), grad=True)
    with no_grad():
        out = conv3d(np.ones((1, 1, 2, 2, 2)), w)
    assert not out.requires_grad
