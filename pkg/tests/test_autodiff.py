import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncrf.autodiff import (
    ModelParams,
    Tape,
    Tensor,
    add,
    affine,
    conv1d,
    dropout,
    exp,
    gather_pairs,
    grad_check,
    log,
    logsumexp,
    matmul,
    maxpool1d,
    mul,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    take_cols,
    transpose,
)
from ncrf.errors import DimensionError, NumericError, ParameterError


def test_tensor_is_float64_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv1d_reference(x, k, b, stride, pad_l, pad_r):
    """Hand-unrolled convolution used as the independent oracle."""
    c_in, t_in = x.shape
    c_out, _, width = k.shape
    xp = np.pad(x, ((0, 0), (pad_l, pad_r)))
    t_out = (xp.shape[1] - width) // stride + 1
    y = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            acc = b[o]
            for c in range(c_in):
                for i in range(width):
                    acc += k[o, c, i] * xp[c, t * stride + i]
            y[o, t] = acc
    return y


def test_conv_identity_kernel():
    x = Tensor([[1.0, 2, 3, 4, 5]])
    out = conv1d(x, Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)), 1, "valid")
    np.testing.assert_array_equal(out.data, [[1, 2, 3, 4, 5]])


def test_conv_hand_unrolled_example():
    # oracle: positions 0 and 2 of [1,0,2,0] under a two-tap sum kernel
    x = np.array([[1.0, 0, 2, 0]])
    k = np.array([[[1.0, 1.0]]])
    expected = conv1d_reference(x, k, np.zeros(1), 2, 0, 0)
    np.testing.assert_array_equal(expected, [[1.0, 2.0]])
    out = conv1d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), 2, "valid")
    np.testing.assert_array_equal(out.data, expected)


def test_conv_same_padding_output_length_paper_scale():
    # ceil(864000 / 2) feature values per map
    from ncrf.autodiff import _conv_geometry

    t_out, _, _ = _conv_geometry(864000, 10, 2, "same")
    assert t_out == 432000


@pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (3, "same")])
def test_conv_matches_reference_on_random_inputs(stride, padding):
    rng = np.random.default_rng(42)
    from ncrf.autodiff import _conv_geometry

    for _ in range(5):
        c_in, c_out, width, t_in = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5), 13
        x = rng.normal(size=(c_in, t_in))
        k = rng.normal(size=(c_out, c_in, width))
        b = rng.normal(size=c_out)
        _, pad_l, pad_r = _conv_geometry(t_in, int(width), stride, padding)
        expected = conv1d_reference(x, k, b, stride, pad_l, pad_r)
        got = conv1d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
        np.testing.assert_allclose(got.data, expected, atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        conv1d(Tensor(np.zeros((2, 8))), Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros(1)))


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = ModelParams({
        "x": Tensor(rng.normal(size=(2, 11))),
        "k": Tensor(rng.normal(size=(3, 2, 4))),
        "b": Tensor(rng.normal(size=3)),
    })

    def loss(p, tape):
        y = conv1d(p["x"], p["k"], p["b"], 2, "same", tape)
        return logsumexp(reshape(y, (-1,), tape), tape=tape)

    assert grad_check(loss, params, samples=40, rng=rng) < 1e-4


# ---------------------------------------------------------------------------
# relu / maxpool / dropout
# ---------------------------------------------------------------------------


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0])
    tape = Tape()
    out = relu(x, tape)
    np.testing.assert_array_equal(out.data, [0, 0, 2])
    tape.backward(reduce_sum(out, tape=tape))
    np.testing.assert_array_equal(tape.grad(x), [0, 0, 1])


def test_relu_all_negative():
    assert not relu(Tensor([-3.0, -0.5])).data.any()


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool1d(Tensor([[1.0, 3, 2, 8]]), 2).data, [[3, 8]])
    x = Tensor([[4.0, 1, 7]])
    np.testing.assert_array_equal(maxpool1d(x, 1).data, x.data)


def test_maxpool_tie_routes_gradient_to_first_index():
    x = Tensor([[5.0, 5.0]])
    tape = Tape()
    out = maxpool1d(x, 2, tape)
    np.testing.assert_array_equal(out.data, [[5.0]])
    tape.backward(reduce_sum(out, tape=tape))
    np.testing.assert_array_equal(tape.grad(x), [[1.0, 0.0]])


def test_maxpool_window_longer_than_input_raises():
    with pytest.raises(DimensionError):
        maxpool1d(Tensor([[1.0, 2]]), 3)


def test_dropout_rate_zero_is_identity_both_modes():
    x = Tensor([1.0, -2.0])
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.0, False) is x


def test_dropout_inference_identity_at_half_rate():
    x = Tensor([1.0, -2.0, 3.0])
    assert dropout(x, 0.5, False) is x


def test_dropout_mask_reproducible_for_fixed_seed():
    x = Tensor(np.ones(1000))
    a = dropout(x, 0.4, True, np.random.default_rng(7)).data
    b = dropout(x, 0.4, True, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)
    # survivors are scaled by 1/(1-rate)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.6}


def test_dropout_rate_one_rejected():
    with pytest.raises(ParameterError):
        dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# affine / sigmoid / logsumexp
# ---------------------------------------------------------------------------


def test_affine_identity():
    x = Tensor([3.0, -1.0])
    out = affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x.data)


def test_affine_hand_example():
    out = affine(Tensor([1.0, 2.0]), Tensor([[1.0, 1], [0, 1]]), Tensor([0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [3.0, 3.0])


def test_affine_weight_gradient_is_outer_product():
    x = Tensor([1.0, 2.0, 3.0])
    w = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros(2))
    tape = Tape()
    tape.backward(reduce_sum(affine(x, w, b, tape), tape=tape))
    np.testing.assert_array_equal(tape.grad(w), np.outer(np.ones(2), x.data))


def test_affine_dimension_mismatch():
    with pytest.raises(DimensionError):
        affine(Tensor([1.0]), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_sigmoid_at_zero_and_saturation():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert sigmoid(Tensor(-800.0)).item() == 0.0
    assert sigmoid(Tensor(800.0)).item() == 1.0


def test_logsumexp_ln2():
    assert logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(np.log(2), abs=1e-15)


def test_logsumexp_no_overflow():
    assert logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + np.log(2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_logsumexp_bounds(values):
    out = logsumexp(Tensor(values)).item()
    assert out >= max(values)
    assert out <= max(values) + np.log(len(values)) + 1e-12


def test_logsumexp_axis_gradient():
    rng = np.random.default_rng(3)
    params = ModelParams({"x": Tensor(rng.normal(size=(4, 5)))})

    def loss(p, tape):
        return reduce_sum(logsumexp(p["x"], axis=1, tape=tape), tape=tape)

    assert grad_check(loss, params, samples=20, rng=rng) < 1e-6


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------


def test_backward_requires_scalar():
    tape = Tape()
    x = Tensor([1.0, 2.0])
    y = add(x, x, tape)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_backward_rejects_nonfinite_loss():
    tape = Tape()
    x = Tensor(np.inf)
    y = add(x, x, tape)
    with pytest.raises(NumericError):
        tape.backward(y)


def test_repeated_use_accumulates_adjoints():
    x = Tensor(3.0)
    tape = Tape()
    y = add(mul(x, x, tape), x, tape)  # x^2 + x -> dy/dx = 2x + 1
    tape.backward(y)
    assert tape.grad(x) == pytest.approx(7.0)


def test_off_path_tensor_has_zero_grad():
    tape = Tape()
    x, z = Tensor([1.0]), Tensor([2.0])
    tape.backward(reduce_sum(scale(x, 2.0, tape), tape=tape))
    np.testing.assert_array_equal(tape.grad(z), [0.0])


def test_broadcast_add_gradients_reduce_correctly():
    a = Tensor(np.ones((3, 4)))
    b = Tensor(np.ones((3, 1)))
    c = Tensor(np.ones(()))
    tape = Tape()
    tape.backward(reduce_sum(add(add(a, b, tape), c, tape), tape=tape))
    assert tape.grad(a).shape == (3, 4)
    np.testing.assert_array_equal(tape.grad(b), np.full((3, 1), 4.0))
    assert tape.grad(c) == pytest.approx(12.0)


def test_gather_pairs_out_of_range():
    with pytest.raises(ParameterError):
        gather_pairs(Tensor(np.zeros((2, 2))), [0], [5])


def test_take_cols_roundtrip_gradient():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    tape = Tape()
    y = take_cols(x, [0, 2], tape)
    np.testing.assert_array_equal(y.data, x.data[:, [0, 2]])
    tape.backward(reduce_sum(y, tape=tape))
    expected = np.zeros((3, 4))
    expected[:, [0, 2]] = 1.0
    np.testing.assert_array_equal(tape.grad(x), expected)


def test_forward_is_deterministic():
    rng1 = np.random.default_rng(11)
    rng2 = np.random.default_rng(11)
    x = Tensor(np.linspace(-1, 1, 24).reshape(2, 12))
    k = Tensor(np.linspace(-0.5, 0.5, 12).reshape(2, 2, 3))
    b = Tensor(np.zeros(2))

    def pipeline(rng):
        y = conv1d(x, k, b, 2, "same")
        y = relu(y)
        y = dropout(y, 0.3, True, rng)
        return maxpool1d(y, 2).data

    np.testing.assert_array_equal(pipeline(rng1), pipeline(rng2))


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_quadratic_is_nearly_exact():
    rng = np.random.default_rng(5)
    params = ModelParams({"theta": Tensor(rng.normal(size=9))})

    def loss(p, tape):
        return scale(reduce_sum(mul(p["theta"], p["theta"], tape), tape=tape), 0.5, tape)

    assert grad_check(loss, params, eps=1e-5, samples=9, rng=rng) < 1e-8


def test_grad_check_flags_nonfinite_loss():
    params = ModelParams({"theta": Tensor([1.0])})

    def loss(p, tape):
        return log(scale(p["theta"], -1.0, tape), tape)  # log of a negative

    with pytest.raises(NumericError):
        grad_check(loss, params, samples=1)


def test_primitive_composition_grad_check():
    rng = np.random.default_rng(17)
    params = ModelParams({
        "x": Tensor(rng.normal(size=(3, 10))),
        "k": Tensor(rng.normal(size=(2, 3, 3))),
        "b": Tensor(rng.normal(size=2)),
        "w": Tensor(rng.normal(size=(4, 2))),
        "c": Tensor(rng.normal(size=4)),
    })

    def loss(p, tape):
        y = conv1d(p["x"], p["k"], p["b"], 2, "same", tape)
        y = maxpool1d(relu(y, tape), 1, tape)
        z = affine(y, p["w"], p["c"], tape)
        z = sigmoid(z, tape)
        s = logsumexp(mul(z, z, tape), axis=0, tape=tape)
        return reduce_sum(exp(scale(s, 0.1, tape), tape), tape=tape)

    assert grad_check(loss, params, samples=40, rng=rng) < 1e-4


def test_matmul_transpose_shapes_and_grads():
    rng = np.random.default_rng(23)
    params = ModelParams({
        "a": Tensor(rng.normal(size=(3, 4))),
        "b": Tensor(rng.normal(size=(4, 2))),
        "v": Tensor(rng.normal(size=4)),
    })

    def loss(p, tape):
        m = matmul(p["a"], p["b"], tape)
        v = matmul(transpose(m, tape), matmul(p["a"], p["v"], tape), tape)
        return reduce_sum(v, tape=tape)

    assert grad_check(loss, params, samples=26, rng=rng) < 1e-6
