import numpy as np
import pytest

from hoseq.errors import ConfigError, DataError, DimensionError
from hoseq.tensor_core import (
    conv3d,
    conv3d_batch,
    flatten,
    outer3,
    outer3_batch,
    sum_over_first_axis,
)
from oracles import naive_conv3d, naive_outer3


# ---------------------------------------------------------------------------
# outer3


def test_outer3_basis_vectors():
    e1 = np.array([1.0, 0.0])
    t = outer3(e1, e1, e1)
    assert t.shape == (2, 2, 2)
    assert t[0, 0, 0] == 1.0
    assert np.count_nonzero(t) == 1


def test_outer3_zero_vector_gives_zero_tensor():
    t = outer3(np.zeros(3), [1.0, -2.0], [4.0, 5.0, 6.0, 7.0])
    assert t.shape == (3, 2, 4)
    assert not t.any()


def test_outer3_small_case_matches_triple_loop():
    t = outer3([1.0, 2.0], [3.0], [4.0])
    assert t[0, 0, 0] == 12.0
    assert t[1, 0, 0] == 24.0
    rng = np.random.default_rng(5)
    u, v, w = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(2)
    assert np.allclose(outer3(u, v, w), naive_outer3(u, v, w), atol=1e-15)


def test_outer3_rejects_empty_and_nonfinite():
    with pytest.raises(DimensionError):
        outer3([], [1.0], [1.0])
    with pytest.raises(DimensionError):
        outer3(np.ones((2, 2)), [1.0], [1.0])
    with pytest.raises(DataError):
        outer3([np.nan], [1.0], [1.0])


def test_outer3_multilinearity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        u = rng.standard_normal(4)
        v = rng.standard_normal(3)
        w = rng.standard_normal(5)
        alpha = rng.standard_normal()
        assert np.allclose(outer3(alpha * u, v, w), alpha * outer3(u, v, w), atol=1e-12)


def test_outer3_batch_matches_per_row():
    rng = np.random.default_rng(7)
    U, V, W = rng.standard_normal((6, 3)), rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    batched = outer3_batch(U, V, W)
    for b in range(6):
        assert np.allclose(batched[b], outer3(U[b], V[b], W[b]), atol=1e-15)


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_zero_input_gives_bias_only():
    out = conv3d(np.zeros((2, 2, 2)), [np.random.default_rng(0).standard_normal((2, 2, 2))], 1, [0.0])
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 0.0


def test_conv3d_all_ones_counts_window_cells():
    out = conv3d(np.ones((2, 2, 2)), [np.ones((2, 2, 2))], 1, [0.0])
    assert out[0, 0, 0, 0] == 8.0


def test_conv3d_matches_naive_loop_oracle():
    rng = np.random.default_rng(42)
    inp = rng.standard_normal((4, 4, 4))
    kernels = rng.standard_normal((2, 2, 2, 2))
    bias = rng.standard_normal(2)
    got = conv3d(inp, kernels, 2, bias)
    want = naive_conv3d(inp, kernels, 2, bias)
    assert got.shape == (2, 2, 2, 2)
    assert np.allclose(got, want, atol=1e-12)


def test_conv3d_accepts_kernel_list():
    rng = np.random.default_rng(3)
    inp = rng.standard_normal((3, 3, 3))
    k1, k2 = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 2))
    got = conv3d(inp, [k1, k2], 1, [0.5, -0.5])
    want = naive_conv3d(inp, np.stack([k1, k2]), 1, np.array([0.5, -0.5]))
    assert np.allclose(got, want, atol=1e-12)


def test_conv3d_kernel_larger_than_input_rejected():
    with pytest.raises(DimensionError):
        conv3d(np.ones((2, 2, 2)), [np.ones((3, 3, 3))], 1, [0.0])


def test_conv3d_bad_stride_rejected():
    with pytest.raises(ConfigError):
        conv3d(np.ones((3, 3, 3)), [np.ones((2, 2, 2))], 0, [0.0])


def test_conv3d_linear_in_input_with_zero_bias():
    rng = np.random.default_rng(9)
    kernels = rng.standard_normal((2, 2, 2, 2))
    a = rng.standard_normal((4, 4, 4))
    b = rng.standard_normal((4, 4, 4))
    lhs = conv3d(a + b, kernels, 1, np.zeros(2))
    rhs = conv3d(a, kernels, 1, np.zeros(2)) + conv3d(b, kernels, 1, np.zeros(2))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_conv3d_batch_matches_per_sample():
    rng = np.random.default_rng(21)
    inputs = rng.standard_normal((5, 4, 4, 4))
    kernels = rng.standard_normal((3, 2, 2, 2))
    bias = rng.standard_normal(3)
    batched = conv3d_batch(inputs, kernels, 2, bias)
    for i in range(5):
        assert np.allclose(batched[i], conv3d(inputs[i], kernels, 2, bias), atol=1e-15)


# ---------------------------------------------------------------------------
# flatten / sum_over_first_axis


@pytest.mark.parametrize(
    "shape,data",
    [((2, 2), [1.0, 2.0, 3.0, 4.0]), ((1, 1, 1), [5.0]), ((2, 1, 2), [1.0, 2.0, 3.0, 4.0])],
)
def test_flatten_is_row_major_identity(shape, data):
    t = np.array(data).reshape(shape)
    assert np.array_equal(flatten(t), np.array(data))


def test_flatten_reshape_roundtrip():
    rng = np.random.default_rng(2)
    for _ in range(20):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 5)))
        t = rng.standard_normal(shape)
        assert np.array_equal(flatten(t).reshape(shape), t)


def test_sum_over_first_axis_examples():
    assert np.array_equal(sum_over_first_axis([[1.0, 2.0], [3.0, 4.0]]), [4.0, 6.0])
    assert np.array_equal(sum_over_first_axis([[7.0]]), [7.0])
    assert not sum_over_first_axis(np.zeros((3, 5))).any()


def test_sum_over_first_axis_rank1_rejected():
    with pytest.raises(DimensionError):
        sum_over_first_axis([1.0, 2.0])


def test_sum_over_first_axis_permutation_invariant():
    rng = np.random.default_rng(8)
    t = rng.standard_normal((6, 3, 2))
    perm = rng.permutation(6)
    assert np.allclose(sum_over_first_axis(t), sum_over_first_axis(t[perm]), atol=1e-12)


def test_operations_preserve_finiteness():
    rng = np.random.default_rng(17)
    for _ in range(25):
        u, v, w = (rng.standard_normal(rng.integers(1, 6)) for _ in range(3))
        assert np.isfinite(outer3(u, v, w)).all()
        inp = rng.standard_normal((4, 4, 4))
        out = conv3d(inp, rng.standard_normal((2, 2, 2, 2)), 1, rng.standard_normal(2))
        assert np.isfinite(out).all()
