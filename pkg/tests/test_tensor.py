"""Unit tests for the tape-based autodiff core."""

import numpy as np
import pytest

from dkdlnet import tensor as dt
from dkdlnet.tensor import Tape, Tensor

import gradcheck

UNIT_TRIALS = 5  # the acceptance suite reruns every case with 100 trials


@pytest.mark.parametrize("name,factory", gradcheck.op_cases())
def test_gradients_match_finite_differences(name, factory):
    gradcheck.run_case(name, factory, trials=UNIT_TRIALS)


# --- forward semantics, hand-computed and brute-force oracles ---------------


def conv1d_loops(x, w, b, stride, padding):
    """Nested-loop cross-correlation, the slow reference for conv1d."""
    c_out, c_in, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    l_out = (x.shape[1] + 2 * padding - k) // stride + 1
    y = np.zeros((c_out, l_out))
    for o in range(c_out):
        for l in range(l_out):
            acc = b[o]
            for c in range(c_in):
                for kk in range(k):
                    acc += xp[c, l * stride + kk] * w[o, c, kk]
            y[o, l] = acc
    return y


def test_conv1d_hand_example():
    x = Tensor([[1.0, 2.0, 3.0, 4.0, 5.0]])
    w = Tensor([[[1.0, 0.0, -1.0]]])
    b = Tensor([0.0])
    y = dt.conv1d(x, w, b, stride=1, padding=0)
    np.testing.assert_array_equal(y.data, [[-2.0, -2.0, -2.0]])


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for stride, padding in [(1, 0), (2, 1), (8, 28), (3, 4)]:
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 5))
        k = int(rng.integers(1, 8))
        l_in = int(rng.integers(max(k - 2 * padding, 1), 40) + k)
        x = rng.standard_normal((c_in, l_in))
        w = rng.standard_normal((c_out, c_in, k))
        b = rng.standard_normal(c_out)
        got = dt.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        want = conv1d_loops(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv1d_zero_input_yields_bias():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 2, 5)))
    b = Tensor(np.array([0.5, -1.0, 2.0]))
    y = dt.conv1d(Tensor(np.zeros((2, 20))), w, b, stride=1, padding=0)
    for j, bj in enumerate([0.5, -1.0, 2.0]):
        np.testing.assert_array_equal(y.data[j], np.full(16, bj))


def test_conv1d_student_first_layer_shape():
    x = Tensor(np.zeros((1, 1024)))
    w = Tensor(np.zeros((4, 1, 64)))
    b = Tensor(np.zeros(4))
    assert dt.conv1d(x, w, b, stride=8, padding=28).shape == (4, 128)


def test_conv1d_channel_mismatch_reports_both_shapes():
    with pytest.raises(ValueError) as exc:
        dt.conv1d(Tensor(np.zeros((3, 10))), Tensor(np.zeros((2, 1, 3))), Tensor(np.zeros(2)))
    assert "(3, 10)" in str(exc.value) and "(2, 1, 3)" in str(exc.value)


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 9))
    y = dt.conv1d(Tensor(x), Tensor(np.eye(2)[:, :, None]), Tensor(np.zeros(2)), 1, 0)
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_empty_output_rejected():
    with pytest.raises(ValueError):
        dt.conv1d(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 1, 8))), Tensor(np.zeros(1)))


def test_maxpool_examples():
    y = dt.maxpool1d(Tensor([3.0, 1.0, 4.0, 1.0, 5.0, 9.0]), 2, 2)
    np.testing.assert_array_equal(y.data, [3.0, 4.0, 9.0])
    const = dt.maxpool1d(Tensor(np.full((2, 8), 7.0)), 2, 2)
    np.testing.assert_array_equal(const.data, np.full((2, 4), 7.0))
    assert dt.maxpool1d(Tensor(np.zeros((4, 128))), 2, 2).shape == (4, 64)


def test_maxpool_window_exceeding_length_rejected():
    with pytest.raises(ValueError):
        dt.maxpool1d(Tensor(np.zeros((1, 3))), 4, 1)


def test_maxpool_identity_when_window_and_stride_one():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 7))
    once = dt.maxpool1d(Tensor(x), 1, 1)
    twice = dt.maxpool1d(once, 1, 1)
    np.testing.assert_array_equal(once.data, x)
    np.testing.assert_array_equal(twice.data, x)


def test_maxpool_tie_routes_gradient_to_lowest_index():
    x = Tensor(np.array([[2.0, 2.0, 1.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = dt.tensor_sum(dt.maxpool1d(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0, 1.0]])


def test_linear_examples():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([1.0, 1.0])
    y = dt.linear(Tensor([1.0, 1.0]), w, b)
    np.testing.assert_array_equal(y.data, [4.0, 8.0])
    rng = np.random.default_rng(3)
    x = rng.standard_normal(5)
    ident = dt.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(ident.data, x)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        dt.linear(Tensor(np.zeros(4)), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))


def test_relu_forward_and_grad_at_zero():
    y = dt.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = dt.tensor_sum(dt.relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_softmax_uniform_logits():
    p = dt.softmax(Tensor(np.zeros(10)), 1.0)
    np.testing.assert_allclose(p.data, np.full(10, 0.1), rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.standard_normal(8) * 5
        c = float(rng.uniform(-100, 100))
        t = float(rng.choice([1.0, 2.0, 4.0]))
        a = dt.softmax(Tensor(x), t).data
        b = dt.softmax(Tensor(x + c), t).data
        assert np.abs(a - b).max() < 1e-12


def test_softmax_sums_to_one_and_positive():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 10)) * 30
    p = dt.softmax(Tensor(x), 2.0).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(6), rtol=0, atol=1e-12)


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 7)) * 4
    ls = dt.log_softmax(Tensor(x), 3.0).data
    p = dt.softmax(Tensor(x), 3.0).data
    np.testing.assert_allclose(np.exp(ls), p, rtol=1e-12, atol=1e-14)


def test_nonpositive_temperature_rejected():
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            dt.softmax(Tensor(np.zeros(3)), bad)
        with pytest.raises(ValueError):
            dt.log_softmax(Tensor(np.zeros(3)), bad)


def test_logsumexp_shift_property():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 6))
    base = dt.logsumexp(Tensor(x)).data
    shifted = dt.logsumexp(Tensor(x + 3.5)).data
    np.testing.assert_allclose(shifted, base + 3.5, rtol=1e-12, atol=1e-12)


def test_gather_and_drop_index_partition_rows():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 8))
    idx = rng.integers(0, 8, size=5)
    picked = dt.gather(Tensor(x), idx).data
    rest = dt.drop_index(Tensor(x), idx).data
    for r in range(5):
        assert picked[r] == x[r, idx[r]]
        np.testing.assert_array_equal(rest[r], np.delete(x[r], idx[r]))


def test_gather_index_out_of_range():
    with pytest.raises(ValueError):
        dt.gather(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 3, 16)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    y = dt.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2)), np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=(0, 2)), np.ones(3), atol=1e-3)
    n = 4 * 16
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2)) * n / (n - 1), rtol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 8))
    rm = np.array([1.0, -1.0])
    rv = np.array([4.0, 0.25])
    y = dt.batchnorm1d(Tensor(x), Tensor(np.array([2.0, 3.0])), Tensor(np.array([0.5, 0.0])),
                       rm, rv, train=False)
    want = np.stack([2.0 * (x[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5) + 0.5,
                     3.0 * (x[:, 1] + 1.0) / np.sqrt(0.25 + 1e-5)], axis=1)
    np.testing.assert_allclose(y.data, want, rtol=1e-12)
    np.testing.assert_array_equal(rm, [1.0, -1.0])  # eval never touches stats


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        dt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# --- tape mechanics ---------------------------------------------------------


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = dt.tensor_sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_gradient_accumulates_across_reuse():
    rng = np.random.default_rng(12)
    data = rng.standard_normal(5)

    def run(double):
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            y = dt.sigmoid(x)
            loss = dt.tensor_sum(dt.add(y, y) if double else y)
        tape.backward(loss)
        return x.grad

    np.testing.assert_allclose(run(True), 2.0 * run(False), rtol=1e-15)


def test_backward_twice_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = dt.tensor_sum(dt.relu(x))
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = dt.relu(x)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_backward_on_empty_tape_is_an_error():
    with pytest.raises(RuntimeError):
        Tape().backward(Tensor([1.0]))


def test_no_recording_outside_tape():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = dt.relu(x)
    assert y.requires_grad is False
    tape = Tape()
    with tape:
        pass
    assert tape.nodes == []


def test_constant_inputs_get_no_grad():
    x = Tensor([1.0, 2.0])  # requires_grad False
    w = Tensor([[1.0, 0.0]], requires_grad=True)
    with Tape() as tape:
        loss = dt.tensor_sum(dt.linear(x, w, Tensor([0.0])))
    tape.backward(loss)
    assert x.grad is None
    assert w.grad is not None


def test_nested_tapes_record_independently():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as outer:
        dt.scale(x, 3.0)
        with Tape() as inner:
            loss = dt.tensor_sum(dt.scale(x, 5.0))
        inner.backward(loss)
    assert len(outer.nodes) == 1
    np.testing.assert_array_equal(x.grad, [5.0])


def test_tensor_dtype_rules():
    assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32
    assert Tensor([1, 2, 3]).dtype == np.float64
    assert Tensor(np.zeros(3, dtype=np.int64)).dtype == np.float64


def test_finite_inputs_stay_finite_through_softmax_chain():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((4, 10)) * 500)
    for t in (1.0, 2.0, 4.0):
        assert np.isfinite(dt.softmax(x, t).data).all()
        assert np.isfinite(dt.log_softmax(x, t).data).all()
    assert np.isfinite(dt.logsumexp(x).data).all()
