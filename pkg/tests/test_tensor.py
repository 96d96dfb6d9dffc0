import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asformer import tensor as tn
from asformer.model import EncoderBlock
from asformer.tensor import Tensor

from helpers import central_difference, max_rel_error


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- affine


def test_affine_identity():
    y = tn.affine_projection(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_affine_matches_naive_loop():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = np.array([[3.0], [5.0]])
    b = np.array([[1.0]])
    naive = np.array([[sum(x[i, k] * w[k, j] for k in range(2)) + b[0, j] for j in range(1)] for i in range(2)])
    y = tn.affine_projection(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_array_equal(y.data, naive)
    np.testing.assert_array_equal(y.data, [[4.0], [6.0]])


def test_affine_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 2)))
    w = param(rng.standard_normal((2, 4)))
    b = param(rng.standard_normal((1, 4)))
    tn.backward(tn.total(tn.affine_projection(x, w, b)))
    numeric = central_difference(lambda: tn.affine_projection(x, w, b).data.sum(), w.data)
    assert max_rel_error(w.grad, numeric) < 1e-5


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(3, 2\).*\(3, 4\)"):
        tn.affine_projection(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 4))))


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((7, 3)))
    kernel = np.zeros((9, 3))
    kernel[3:6] = np.eye(3)
    y = tn.dilated_conv1d(x, Tensor(kernel), dilation=1)
    np.testing.assert_array_equal(y.data, x.data)


def direct_conv(x, taps, dilation):
    n = len(x)
    return [
        sum(taps[k] * x[t + (k - 1) * dilation] for k in range(3) if 0 <= t + (k - 1) * dilation < n)
        for t in range(n)
    ]


def test_conv_dilated_ones():
    x = np.ones((5, 1))
    y = tn.dilated_conv1d(Tensor(x), Tensor(np.ones((3, 1))), dilation=2)
    assert y.data[:, 0].tolist() == direct_conv([1] * 5, [1, 1, 1], 2) == [2, 2, 3, 2, 2]


def test_conv_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((8, 2)))
    k = param(rng.standard_normal((6, 3)))
    tn.backward(tn.total(tn.square(tn.dilated_conv1d(x, k, 2))))
    numeric = central_difference(lambda: (tn.dilated_conv1d(x, k, 2).data ** 2).sum(), k.data)
    assert max_rel_error(k.grad, numeric) < 1e-5


def test_conv_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = param(rng.standard_normal((8, 2)))
    k = Tensor(rng.standard_normal((6, 2)))
    tn.backward(tn.total(tn.square(tn.dilated_conv1d(x, k, 3))))
    numeric = central_difference(lambda: (tn.dilated_conv1d(x, k, 3).data ** 2).sum(), x.data)
    assert max_rel_error(x.grad, numeric) < 1e-5


def test_conv_even_kernel_rejected():
    with pytest.raises(tn.ConfigError):
        tn.dilated_conv1d(Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 1))), 1, kernel_size=4)


@given(st.integers(1, 40), st.integers(1, 64), st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_conv_preserves_length(length, dilation, channels):
    x = Tensor(np.ones((length, channels)))
    y = tn.dilated_conv1d(x, Tensor(np.ones((3 * channels, 2))), dilation)
    assert y.shape == (length, 2)


# ---------------------------------------------------------------- softmax


def test_masked_softmax_uniform():
    p = tn.masked_softmax(Tensor(np.zeros((4, 5))), np.array([[1, 1, 1, 0, 0]] * 4, dtype=bool))
    np.testing.assert_allclose(p.data[:, :3], 1 / 3)
    assert (p.data[:, 3:] == 0).all()


def test_masked_softmax_analytic_row():
    p = tn.masked_softmax(Tensor([[math.log(2), 0.0, 7.0]]), np.array([[True, True, False]]))
    np.testing.assert_allclose(p.data, [[2 / 3, 1 / 3, 0.0]], rtol=0, atol=1e-15)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_masked_softmax_rows_normalized(rows, cols, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((rows, cols)) < 0.6
    mask[np.arange(rows), rng.integers(cols, size=rows)] = True
    p = tn.masked_softmax(Tensor(10 * rng.standard_normal((rows, cols))), mask)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p.data[~mask] == 0.0)


def test_masked_softmax_fully_masked_row_is_internal_error():
    with pytest.raises(RuntimeError):
        tn.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


# ---------------------------------------------------------------- instance norm


def test_instance_norm_constant_channel():
    y = tn.instance_norm(Tensor(np.full((6, 2), 3.5)), eps=1e-5)
    assert np.all(np.abs(y.data) <= math.sqrt(1e-5))


def test_instance_norm_already_standard():
    y = tn.instance_norm(Tensor(np.array([[1.0], [-1.0], [1.0], [-1.0]])))
    np.testing.assert_allclose(y.data[:, 0], [1, -1, 1, -1], atol=1e-4)


def test_instance_norm_moments():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(200, 6))
    y = tn.instance_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)


def test_instance_norm_gradient():
    rng = np.random.default_rng(5)
    x = param(rng.standard_normal((9, 3)))
    r = Tensor(rng.standard_normal((3, 1)))
    f = lambda: tn.total(tn.square(tn.affine_projection(tn.instance_norm(x), r)))  # noqa: E731
    tn.backward(f())
    numeric = central_difference(lambda: f().item(), x.data)
    assert max_rel_error(x.grad, numeric) < 1e-4


# ---------------------------------------------------------------- dropout


def test_dropout_eval_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
    y = tn.channel_dropout(x, 0.3, training=False, rng=np.random.default_rng(0))
    assert np.array_equal(y.data, x.data)


def test_dropout_zero_rate_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
    y = tn.channel_dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
    assert np.array_equal(y.data, x.data)


def test_dropout_drops_whole_channels_at_rate():
    x = Tensor(np.ones((3, 10000)))
    y = tn.channel_dropout(x, 0.3, training=True, rng=np.random.default_rng(123)).data
    dropped = (y == 0).all(axis=0)
    assert abs(dropped.mean() - 0.3) <= 0.02
    # each column is either fully dropped or fully kept and rescaled
    np.testing.assert_allclose(y[:, ~dropped], 1 / 0.7)
    assert np.all((y == 0).any(axis=0) == dropped)


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_bad_rate(rate):
    with pytest.raises(tn.ConfigError):
        tn.channel_dropout(Tensor(np.ones((2, 2))), rate, True, np.random.default_rng(0))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = param(np.random.default_rng(0).standard_normal((4, 3)))
    tn.backward(tn.total(x))
    np.testing.assert_array_equal(x.grad, np.ones((4, 3)))


def test_backward_relu_subgradient():
    x = param([[-1.0, 0.0, 2.0, -3.0, 0.5]])
    tn.backward(tn.total(tn.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0, 0, 1, 0, 1]])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        tn.backward(tn.relu(param(np.ones((2, 2)))))


def test_tape_is_topological_and_cleared():
    tape = tn.current_tape()
    tape.clear()
    x = param(np.ones((3, 2)))
    w = param(np.ones((2, 2)))
    y = tn.total(tn.relu(tn.affine_projection(x, w)))
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp in (x, w) or id(inp) in produced
        produced.add(id(node.output))
    assert len(tape) == 3
    tn.backward(y)
    assert len(tape) == 0
    assert x.grad is not None and w.grad is not None


def test_backward_visits_nodes_in_reverse_order():
    tape = tn.Tape()
    visited = []
    a = param([[1.0]])
    outs = [a]
    for i in range(4):
        b = Tensor(outs[-1].data + 1, requires_grad=True)
        tape.record([outs[-1]], b, lambda g, i=i: (visited.append(i) or g,))
        outs.append(b)
    tn.backward(outs[-1], tape)
    assert visited == [3, 2, 1, 0]
    np.testing.assert_array_equal(a.grad, [[1.0]])


def test_no_grad_records_nothing():
    tape = tn.current_tape()
    tape.clear()
    with tn.no_grad():
        tn.relu(param(np.ones((2, 2))))
    assert len(tape) == 0


def test_band_ops_gradients():
    rng = np.random.default_rng(6)
    q, k, v = (param(rng.standard_normal((7, 3))) for _ in range(3))
    mask = tn.band_mask(7, 2)

    def f():
        p = tn.masked_softmax(tn.band_scores(q, k, 2, 0.5), mask)
        return tn.total(tn.square(tn.band_combine(p, v, 2)))

    tn.backward(f())
    for t in (q, k, v):
        numeric = central_difference(lambda: f().item(), t.data)
        assert max_rel_error(t.grad, numeric) < 1e-4


def test_encoder_block_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    block = EncoderBlock(2, 8, rng)
    x = param(rng.standard_normal((16, 8)))
    readout = Tensor(rng.standard_normal((8, 1)))

    def f():
        return tn.total(tn.square(tn.affine_projection(block(x), readout)))

    tn.backward(f())
    tensors = [x] + [p for _, p in block.named_parameters()]
    for t in tensors:
        numeric = central_difference(lambda: f().item(), t.data, h=1e-5)
        assert max_rel_error(t.grad, numeric) < 1e-4


def test_deterministic_replay():
    def run():
        rng = np.random.default_rng(11)
        block = EncoderBlock(3, 8, rng)
        x = Tensor(rng.standard_normal((20, 8)))
        return tn.channel_dropout(block(x), 0.3, True, rng).data

    assert np.array_equal(run(), run())
