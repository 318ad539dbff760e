import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import conceptmap.autograd as ag
from conceptmap.autograd import Tape, Tensor, backward
from conceptmap.errors import ConfigError, ContractError, DimensionError, NumericError


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_op_gradient(op, shapes, seed, rel_tol=1e-6):
    """Analytic vs finite-difference gradient for a primitive on random inputs."""
    rng = np.random.default_rng(seed)
    inputs = [t64(rng.standard_normal(s), requires_grad=True) for s in shapes]
    mix = rng.standard_normal(op(*inputs).shape)  # fixed projection to a scalar

    def scalar():
        return float((op(*[Tensor(x.data) for x in inputs]).data * mix).sum())

    out = op(*inputs)
    backward(ag.sum_all(ag.mul(out, t64(mix))))
    for x in inputs:
        fd = fd_gradient(scalar, x.data)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(x.grad)), 1e-4)
        rel = np.abs(fd - x.grad) / denom
        assert rel.max() <= rel_tol, f"rel err {rel.max()} for shape {x.shape}"


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    out = ag.matmul(t64(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_scalar_case():
    assert ag.matmul(t64([[2.0]]), t64([[3.0]])).data[0, 0] == 6.0


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = ag.matmul(t64(a), t64(b)).data
    assert np.abs(got - expected).max() <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        ag.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_batch_broadcast_gradients():
    check_op_gradient(ag.matmul, [(2, 3, 4), (4, 5)], seed=1)
    check_op_gradient(ag.matmul, [(3, 4), (2, 4, 5)], seed=2)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_constant():
    out = ag.softmax_lastdim(t64([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)


def test_softmax_analytic_two_point():
    out = ag.softmax_lastdim(t64([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        ag.softmax_lastdim(t64([0.0, np.nan]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(0, 2 ** 31))
def test_softmax_shift_invariance_and_simplex(values, _seed):
    x = np.asarray(values, dtype=np.float64)
    y = ag.softmax_lastdim(t64(x)).data
    y_shift = ag.softmax_lastdim(t64(x + 100.0)).data
    np.testing.assert_allclose(y, y_shift, atol=1e-12)
    assert abs(y.sum() - 1.0) <= 1e-6
    assert (y >= 0).all() and (y <= 1).all()


def test_softmax_gradient():
    check_op_gradient(ag.softmax_lastdim, [(3, 5)], seed=3)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_two_point_analytic():
    out = ag.layer_norm(t64([1.0, 3.0]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_constant_slice_maps_to_bias():
    out = ag.layer_norm(t64([5.0, 5.0, 5.0]), t64(np.ones(3)), t64(np.zeros(3)), eps=1e-5)
    np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-12)


def test_layer_norm_eps_must_be_positive():
    with pytest.raises(ConfigError):
        ag.layer_norm(t64([1.0, 2.0]), t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient_matches_finite_differences():
    check_op_gradient(lambda x, g, b: ag.layer_norm(x, g, b, 1e-5),
                      [(2, 4, 6), (6,), (6,)], seed=4)


# ---------------------------------------------------------------------------
# gelu


def _erf_oracle_gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def test_gelu_zero():
    assert ag.gelu(t64(0.0)).data == 0.0


@pytest.mark.parametrize("x", [10.0, -10.0, 0.5, -1.3])
def test_gelu_matches_independent_erf(x):
    got = float(ag.gelu(t64(x)).data)
    assert abs(got - _erf_oracle_gelu(x)) <= 1e-6
    if x == 10.0:
        assert abs(got - 10.0) <= 1e-6
    if x == -10.0:
        assert abs(got) <= 1e-6


def test_gelu_gradient():
    check_op_gradient(ag.gelu, [(3, 4)], seed=5)


# ---------------------------------------------------------------------------
# gather / scatter


def test_gather_full_range_is_identity():
    x = t64(np.arange(12.0).reshape(4, 3))
    out = ag.gather_rows(x, np.arange(4))
    np.testing.assert_array_equal(out.data, x.data)


def test_gather_reorders_rows():
    x = t64([[1.0], [2.0], [3.0]])
    out = ag.gather_rows(x, [2, 0])
    np.testing.assert_array_equal(out.data, [[3.0], [1.0]])


def test_gather_duplicate_index_doubles_gradient():
    x = t64(np.zeros((3, 2)), requires_grad=True)
    out = ag.gather_rows(x, [1, 1])
    backward(ag.sum_all(out))
    np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [0, 0]])


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ag.gather_rows(t64(np.zeros((3, 2))), [3])


def test_gather_gradient():
    check_op_gradient(lambda x: ag.gather_rows(x, np.array([2, 0, 2])), [(2, 4, 3)], seed=6)


def test_scatter_gradient():
    check_op_gradient(lambda x: ag.scatter_rows(x, np.array([1, 4]), 6), [(2, 2, 3)], seed=7)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_gather_scatter_permutation_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    x = t64(rng.standard_normal((n, 3)), requires_grad=True)
    out = ag.scatter_rows(ag.gather_rows(x, perm), perm, n)
    np.testing.assert_allclose(out.data, x.data, atol=0)
    backward(ag.sum_all(ag.mul(out, t64(np.ones((n, 3)) * 2.0))))
    np.testing.assert_allclose(x.grad, np.full((n, 3), 2.0), atol=0)


# ---------------------------------------------------------------------------
# other primitives


def test_elementwise_gradients():
    check_op_gradient(ag.add, [(2, 3), (3,)], seed=8)
    check_op_gradient(ag.mul, [(2, 3), (2, 3)], seed=9)
    check_op_gradient(lambda a: ag.expand_leading(a, 4), [(3, 2)], seed=10)
    check_op_gradient(lambda a: ag.permute(a, (1, 0, 2)), [(2, 3, 4)], seed=11)
    check_op_gradient(lambda a: ag.reshape(a, (6,)), [(2, 3)], seed=12)
    check_op_gradient(ag.mean_lastdim, [(4, 5)], seed=13)
    check_op_gradient(ag.concat_rows, [(2, 3, 4), (2, 2, 4)], seed=14)


def test_suffix_broadcast_rejects_inner_stretching():
    with pytest.raises(DimensionError):
        ag.add(t64(np.zeros((2, 3))), t64(np.zeros((2, 1))))
    with pytest.raises(DimensionError):
        ag.mul(t64(np.zeros((3, 1))), t64(np.zeros((1, 3))))


def test_mixed_dtype_rejected():
    with pytest.raises(ContractError):
        ag.add(Tensor(np.zeros(2, dtype=np.float32)), t64(np.zeros(2)))


# ---------------------------------------------------------------------------
# backward / tape


def test_backward_sum_of_squares():
    x = t64([1.0, 2.0], requires_grad=True)
    backward(ag.sum_all(ag.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=0)


def test_backward_linear_map_gradient_is_column_sum():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    x = t64([[1.0], [1.0]], requires_grad=True)
    backward(ag.sum_all(ag.matmul(t64(a), x)))
    np.testing.assert_allclose(x.grad[:, 0], a.sum(axis=0), atol=0)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(ag.mul(x, x))


def test_nondifferentiable_leaf_never_accumulates():
    const = t64([1.0, 2.0])
    x = t64([3.0, 4.0], requires_grad=True)
    backward(ag.sum_all(ag.mul(const, x)))
    assert const.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_unreachable_leaf_has_no_gradient():
    x = t64([1.0], requires_grad=True)
    y = t64([2.0], requires_grad=True)
    backward(ag.sum_all(ag.mul(x, x)))
    assert y.grad is None


def _small_graph(seed=0):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((3, 4)), requires_grad=True)
    w = t64(rng.standard_normal((4, 4)), requires_grad=True)
    h = ag.gelu(ag.matmul(x, w))
    out = ag.sum_all(ag.mul(ag.softmax_lastdim(h), h))  # h fans out twice
    return x, w, out


def test_tape_visits_each_node_once_in_topological_order():
    _, _, out = _small_graph()
    tape = Tape.trace(out)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    position = {i: k for k, i in enumerate(ids)}
    for node in tape.nodes:
        for parent in node._parents:
            if id(parent) in position:
                assert position[id(parent)] < position[id(node)]


def test_backward_replay_is_bitwise_deterministic():
    x, w, out = _small_graph()
    backward(out)
    gx, gw = x.grad.copy(), w.grad.copy()
    x.zero_grad()
    w.zero_grad()
    x2, w2, out2 = _small_graph()
    backward(out2)
    assert np.array_equal(gx, x2.grad) and np.array_equal(gw, w2.grad)


def test_fanout_accumulates_additively():
    x = t64([2.0], requires_grad=True)
    y = ag.add(ag.mul(x, 3.0), ag.mul(x, 5.0))
    backward(ag.sum_all(y))
    np.testing.assert_array_equal(x.grad, [8.0])
