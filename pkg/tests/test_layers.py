import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from cvaegan import tensor as T
from cvaegan.errors import ConfigurationError, DegenerateBatchError, DimensionError
from cvaegan.layers import (
    BN_EPS,
    INIT_STD,
    LayerGeometry,
    LayerParams,
    Module,
    activation,
    batch_norm,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    conv_transpose_output_size,
    dense,
    init_params,
)
from cvaegan.tensor import Tensor


def params_from(weight, bias=None):
    return LayerParams(
        weight=Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True),
        bias=None if bias is None else Tensor(np.asarray(bias, dtype=np.float64), True),
    )


def direct_conv(x, w, b, stride, pad):
    """Nested-loop reference convolution (cross-correlation)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    bsz, _, h, wd = xp.shape
    o, _, k, _ = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((bsz, o, oh, ow))
    for n in range(bsz):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, f, i, j] = (patch * w[f]).sum() + (0 if b is None else b[f])
    return out


def direct_conv_t(x, w, stride, pad, out_pad):
    """Scatter-add reference transposed convolution; w is (Cin, Cout, k, k)."""
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = (h - 1) * stride + k + out_pad
    out = np.zeros((bsz, cout, full, (wd - 1) * stride + k + out_pad))
    for n in range(bsz):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    out[n, :, i * stride : i * stride + k, j * stride : j * stride + k] += (
                        x[n, c, i, j] * w[c]
                    )
    size = (h - 1) * stride - 2 * pad + k + out_pad
    return out[:, :, pad : pad + size, pad : pad + size]


# -- conv2d -------------------------------------------------------------------


def test_conv_identity_kernel():
    out = conv2d(Tensor([[[[0.7]]]]), params_from([[[[1.0]]]]))
    assert out.data.item() == pytest.approx(0.7)


def test_conv_hand_example():
    x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    out = conv2d(x, params_from(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])


def test_conv_full_geometry_shape():
    p = init_params(LayerGeometry("conv", 3, 2, 5), 0)
    out = conv2d(Tensor(np.zeros((1, 3, 64, 64), np.float32)), p, 2, 2)
    assert out.shape == (1, 2, 32, 32)
    assert conv_output_size(64, 5, 2, 2) == 32


@pytest.mark.parametrize("stride,pad,size", [(1, 0, 5), (2, 2, 7), (2, 2, 8), (1, 1, 6), (3, 1, 9)])
def test_conv_matches_nested_loop_oracle(rng, stride, pad, size):
    x = rng.standard_normal((2, 3, size, size))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), params_from(w, b), stride, pad)
    np.testing.assert_allclose(out.data, direct_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_channel_mismatch_names_axis():
    p = params_from(np.zeros((1, 2, 3, 3)))
    with pytest.raises(DimensionError, match="channel"):
        conv2d(Tensor(np.zeros((1, 3, 5, 5))), p)


def test_conv_kernel_larger_than_input():
    p = params_from(np.zeros((1, 1, 5, 5)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), p)


# -- conv_transpose2d ---------------------------------------------------------


def test_conv_t_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    out = conv_transpose2d(Tensor(x), params_from([[[[1.0]]]]), 1, 0, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_t_hand_example():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = conv_transpose2d(x, params_from(np.ones((1, 1, 2, 2))), 2, 0, 0)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv_t_full_geometry_shape():
    p = init_params(LayerGeometry("conv_t", 2, 3, 5), 0)
    out = conv_transpose2d(Tensor(np.zeros((1, 2, 32, 32), np.float32)), p, 2, 2, 1)
    assert out.shape == (1, 3, 64, 64)
    assert conv_transpose_output_size(32, 5, 2, 2, 1) == 64


@pytest.mark.parametrize("stride,pad,out_pad", [(2, 2, 1), (1, 1, 0), (2, 0, 0), (3, 1, 2)])
def test_conv_t_matches_scatter_oracle(rng, stride, pad, out_pad):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 5, 5))
    out = conv_transpose2d(Tensor(x), params_from(w), stride, pad, out_pad)
    np.testing.assert_allclose(out.data, direct_conv_t(x, w, stride, pad, out_pad), atol=1e-12)


def test_conv_t_rejects_output_padding_at_stride():
    p = params_from(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ConfigurationError):
        conv_transpose2d(Tensor(np.zeros((1, 1, 4, 4))), p, 2, 1, 2)


@given(
    seed=st.integers(0, 2**16),
    stride=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]),
    pad=st.integers(0, 2),
    size=st.integers(5, 9),
)
def test_conv_transpose_is_adjoint_of_conv(seed, stride, k, pad, size):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 3, k, k))
    x = rng.standard_normal((2, 3, size, size))
    y_shape = conv2d(Tensor(x), params_from(w), stride, pad).shape
    y = rng.standard_normal(y_shape)
    # output_padding recovers the rows a strided conv skips
    out_pad = size - conv_transpose_output_size(y_shape[2], k, stride, pad)
    assume(0 <= out_pad < stride)
    lhs = (conv2d(Tensor(x), params_from(w), stride, pad).data * y).sum()
    # a conv weight (O, C, k, k) read as a conv_t weight maps O channels back to C
    back = conv_transpose2d(Tensor(y), params_from(w), stride, pad, out_pad).data
    rhs = (x * back).sum()
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@given(size=st.sampled_from([4, 8, 16, 32]))
def test_stride2_conv_then_conv_t_restores_shape(size):
    x = Tensor(np.zeros((1, 2, size, size)))
    down = conv2d(x, params_from(np.zeros((3, 2, 5, 5))), 2, 2)
    up = conv_transpose2d(down, params_from(np.zeros((3, 2, 5, 5))), 2, 2, 1)
    assert up.shape == x.shape


# -- batch norm -----------------------------------------------------------------


def bn_params(c):
    return init_params(LayerGeometry("dense", c, c, batch_norm=True), 0, np.float64)


def test_bn_constant_input_gives_zero():
    out = batch_norm(Tensor(np.full((4, 2), 3.0)), bn_params(2), "train")
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_bn_two_values():
    out = batch_norm(Tensor([[1.0], [3.0]]), bn_params(1), "train", eps=0.0)
    np.testing.assert_allclose(out.data[:, 0], [-1.0, 1.0])


def test_bn_eval_identity_statistics(rng):
    x = rng.standard_normal((3, 2, 2, 2))
    out = batch_norm(Tensor(x), bn_params(2), "eval")
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + BN_EPS))


def test_bn_batch_of_one_in_train_mode():
    with pytest.raises(DegenerateBatchError):
        batch_norm(Tensor(np.zeros((1, 2))), bn_params(2), "train")


def test_bn_running_stats_update():
    p = bn_params(1)
    batch_norm(Tensor([[1.0], [3.0]]), p, "train")
    # running = 0.9 * old + 0.1 * batch; variance unbiased (2.0 for [1, 3])
    assert p.running_mean[0] == pytest.approx(0.2)
    assert p.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)
    batch_norm(Tensor([[1.0], [3.0]]), p, "train", update_stats=False)
    assert p.running_mean[0] == pytest.approx(0.2)


def test_bn_channel_mismatch():
    with pytest.raises(DimensionError, match="channel"):
        batch_norm(Tensor(np.zeros((2, 3))), bn_params(2), "train")


@given(seed=st.integers(0, 2**16), shift=st.floats(-5, 5), scale=st.floats(0.1, 10))
def test_bn_train_output_standardized(seed, shift, scale):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 3, 4, 4)) * scale + shift
    out = batch_norm(Tensor(x), bn_params(3), "train", eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


# -- dense / activation -----------------------------------------------------------


def test_dense_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dense(Tensor(x), params_from(np.eye(4), np.zeros(4))).data, x)


def test_dense_hand_example():
    out = dense(Tensor([[2.0, 3.0]]), params_from([[1.0], [1.0]], [0.5]))
    assert out.data.item() == 5.5


def test_dense_2048_to_512():
    p = init_params(LayerGeometry("dense", 2048, 512), 0)
    assert p.weight.shape == (2048, 512)
    assert dense(Tensor(np.zeros((2, 2048), np.float32)), p).shape == (2, 512)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        dense(Tensor(np.zeros((2, 3))), params_from(np.zeros((4, 1))))


def test_activation_dispatch():
    x = Tensor([-1.0, 0.0, 1.0])
    assert activation(x, "leaky_relu", alpha=0.2).data.tolist() == [-0.2, 0.0, 1.0]
    assert activation(x, "relu").data.tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ConfigurationError):
        activation(x, "swish")


# -- init -------------------------------------------------------------------------


def test_init_deterministic_and_defaults():
    g = LayerGeometry("conv", 3, 4, 5, batch_norm=True)
    a, b = init_params(g, 7), init_params(g, 7)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    np.testing.assert_array_equal(a.gamma.data, 1.0)
    np.testing.assert_array_equal(a.beta.data, 0.0)
    np.testing.assert_array_equal(a.bias.data, 0.0)
    assert np.all(a.running_var > 0)


def test_init_weight_statistics():
    w = init_params(LayerGeometry("dense", 1000, 100), 3, np.float64).weight.data
    assert abs(w.mean()) <= 3 * INIT_STD / np.sqrt(w.size)
    assert w.std() == pytest.approx(INIT_STD, rel=0.02)


def test_module_state_dict_round_trip():
    class Two(Module):
        def __init__(self, seed):
            super().__init__()
            self.layers["a"] = init_params(LayerGeometry("dense", 3, 2, batch_norm=True), seed)

    src, dst = Two(1), Two(2)
    dst.load_state_dict(src.state_dict())
    for k, v in src.state_dict().items():
        np.testing.assert_array_equal(dst.state_dict()[k], v)
    with pytest.raises(ConfigurationError):
        dst.load_state_dict({"a.weight": np.zeros((3, 2))})
