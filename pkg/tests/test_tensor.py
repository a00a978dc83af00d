import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from saigformer import gradcheck
from saigformer import tensor as T
from saigformer.tensor import ShapeError, Tensor

from oracles import naive_conv2d


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_default_precision_is_float32_and_switchable():
    assert Tensor(np.ones(3)).dtype == np.float32
    with T.precision("float64"):
        assert Tensor(np.ones(3)).dtype == np.float64
    assert T.get_precision() == np.float32


# -- conv2d -------------------------------------------------------------------


def test_conv_identity_kernel():
    x = t64(np.arange(9.0).reshape(1, 1, 3, 3))
    y = T.conv2d(x, t64(np.ones((1, 1, 1, 1))))
    assert np.array_equal(y.data, x.data)


def test_conv_average_stride2():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = T.conv2d(x, t64(np.full((1, 1, 2, 2), 0.25)), stride=2)
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 2.5


@pytest.mark.parametrize(
    "shape,wshape,stride,padding,groups",
    [
        ((1, 4, 8, 8), (4, 1, 3, 3), 1, 1, 4),  # depthwise
        ((2, 3, 7, 6), (5, 3, 3, 3), 1, 1, 1),  # dense 3x3
        ((2, 4, 6, 6), (6, 2, 3, 3), 2, 1, 2),  # grouped, strided
        ((1, 3, 8, 8), (3, 1, 4, 4), 2, 1, 3),  # the illumination downsampler shape
        ((2, 5, 4, 3), (7, 5, 1, 1), 1, 0, 1),  # pointwise
    ],
)
def test_conv_matches_loop_oracle(shape, wshape, stride, padding, groups):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal(shape), rng.standard_normal(wshape), rng.standard_normal(wshape[0])
    got = T.conv2d(t64(x), t64(w), t64(b), stride, padding, groups).data
    ref = naive_conv2d(x, w, b, stride, padding, groups)
    assert got.shape == ref.shape
    assert np.max(np.abs(got - ref)) <= 1e-6 * max(1.0, np.max(np.abs(ref)))


def test_conv_float32_depthwise_close_to_oracle():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((4, 1, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=4).data
    ref = naive_conv2d(x, w, None, 1, 1, 4)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-6


def test_conv_shape_errors_name_dimension():
    x = t64(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ShapeError) as e:
        T.conv2d(x, t64(np.zeros((2, 3, 3, 3))))
    assert e.value.dim == "in_channels"
    with pytest.raises(ShapeError) as e:
        T.conv2d(x, t64(np.zeros((3, 2, 3, 3))), groups=2)
    assert e.value.dim == "groups"
    with pytest.raises(ShapeError) as e:
        T.conv2d(x, t64(np.zeros((2, 4, 7, 7))))
    assert e.value.dim == "spatial"


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_channels_is_zero():
    x = t64(np.full((1, 4, 2, 2), 3.0))
    y = T.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)))
    assert np.all(y.data == 0.0)


def test_layer_norm_two_channels():
    x = t64(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    y = T.layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)
    assert np.allclose(y.data.ravel(), [-1.0, 1.0], atol=0, rtol=1e-15)


def test_layer_norm_statistics():
    x = t64(np.random.default_rng(2).standard_normal((2, 8, 4, 4)) * 3 + 1)
    y = T.layer_norm(x, t64(np.ones(8)), t64(np.zeros(8))).data
    assert np.max(np.abs(y.mean(axis=1))) < 1e-5
    assert np.max(np.abs(y.var(axis=1) - 1.0)) < 1e-4


def test_layer_norm_zero_channels_rejected():
    with pytest.raises(ShapeError):
        T.layer_norm(t64(np.zeros((1, 0, 2, 2))), t64(np.zeros(0)), t64(np.zeros(0)))


# -- softmax and activations --------------------------------------------------


def test_softmax_examples():
    assert np.allclose(T.softmax(t64(np.zeros((1, 5))), axis=1).data, 0.2, rtol=0, atol=1e-15)
    y = T.softmax(t64([[0.0, math.log(2.0)]]), axis=1).data
    assert np.allclose(y, [[1 / 3, 2 / 3]], rtol=0, atol=1e-15)


def test_softmax_stable_and_normalized():
    x = Tensor(np.random.default_rng(3).standard_normal((3, 6, 7, 2)) * 50 + 1000)
    y = T.softmax(x, axis=1).data
    assert np.all(np.isfinite(y)) and np.all(y >= 0) and np.all(y <= 1)
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-6


def test_softmax_axis_out_of_range():
    with pytest.raises(ShapeError):
        T.softmax(t64(np.zeros((2, 2))), axis=2)


def test_activation_fixed_points():
    z = t64(np.zeros(1))
    assert T.activation(z, "gelu").data[0] == 0.0
    assert T.activation(z, "sigmoid").data[0] == 0.5
    with pytest.raises(ValueError):
        T.activation(z, "relu")


def test_sigmoid_symmetry():
    x = np.random.default_rng(4).standard_normal(1000) * 5
    s = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
    assert np.max(np.abs(s - 1.0)) < 1e-6


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-15), (np.float32, 1e-6)])
def test_gelu_uses_exact_erf(dtype, tol):
    x = np.linspace(-6, 6, 2001)
    ref = x * 0.5 * (1 + special.erf(x / math.sqrt(2)))
    got = T.gelu(Tensor(x, dtype=dtype)).data.astype(np.float64)
    assert np.max(np.abs(got - ref)) < tol * 6


def test_gelu_gradient_matches_finite_differences():
    with T.precision("float64"):
        x = t64(np.random.default_rng(5).standard_normal((2, 3, 4, 4)) * 2, grad=True)
        rep = gradcheck.check("gelu", lambda: T.sum(T.gelu(x)), [x], max_entries=None)
    assert rep.ok, rep.line()


# -- pixel shuffle ------------------------------------------------------------


def test_unshuffle_channel_order():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = T.pixel_resample(x, 2, "unshuffle")
    assert y.shape == (1, 4, 1, 1)
    assert y.data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4), r=st.integers(1, 3),
    seed=st.integers(0, 2**31),
)
def test_shuffle_inverts_unshuffle(n, c, h, w, r, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((n, c, h * r, w * r)))
    back = T.pixel_resample(T.pixel_resample(x, r, "unshuffle"), r, "shuffle")
    assert np.array_equal(back.data, x.data)


def test_unshuffle_mean_is_average_pooling():
    x = np.random.default_rng(6).standard_normal((2, 3, 6, 8))
    u = T.pixel_unshuffle(t64(x), 2).data.reshape(2, 3, 4, 3, 4).mean(axis=2)
    pool = x.reshape(2, 3, 3, 2, 4, 2).mean(axis=(3, 5))
    assert np.allclose(u, pool, rtol=0, atol=1e-15)


def test_resample_divisibility_errors():
    with pytest.raises(ShapeError):
        T.pixel_unshuffle(t64(np.zeros((1, 1, 3, 4))), 2)
    with pytest.raises(ShapeError):
        T.pixel_shuffle(t64(np.zeros((1, 3, 2, 2))), 2)


# -- autograd -----------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = t64(np.random.default_rng(7).standard_normal((2, 3, 4, 5)), grad=True)
    T.sum(x).backward()
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_backward_of_square_sum_is_2x():
    x = t64(np.random.default_rng(8).standard_normal((2, 3, 4, 5)), grad=True)
    T.sum(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_needs_scalar():
    x = t64(np.ones((2, 2)), grad=True)
    with pytest.raises(ShapeError):
        T.mul(x, 2.0).backward()


def test_grads_accumulate_across_calls_and_through_broadcast():
    x = t64(np.ones((2, 3)), grad=True)
    b = t64(np.ones((3,)), grad=True)
    T.sum(T.add(x, b)).backward()
    T.sum(T.add(x, b)).backward()
    assert np.array_equal(x.grad, np.full((2, 3), 2.0))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_graph_inputs_become_immutable():
    x = t64(np.ones(4), grad=True)
    T.mul(x, 2.0)
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_forward_is_deterministic_in_64bit():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((4, 1, 3, 3))

    def run():
        with T.precision("float64"):
            y = T.conv2d(t64(x), t64(w), padding=1, groups=4)
            return T.softmax(T.gelu(y), axis=1).data

    assert np.array_equal(run(), run())


def test_tensor_gradcheck_suite_passes():
    reports = gradcheck.suite_tensor(0)
    assert len(reports) >= 3 * 10
    bad = [r.line() for r in reports if not r.ok]
    assert not bad, bad


def test_injected_fault_is_detected():
    with T.inject_fault("softmax", 1.01):
        reports = gradcheck.suite_tensor(0)
    failed = {r.name.split("[")[0] for r in reports if not r.ok}
    assert failed == {"tensor.softmax"}
