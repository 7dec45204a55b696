import math
import zlib

import numpy as np
import pytest

from satd import tensor as T
from satd.errors import DegenerateVectorError, DimensionError, EvaluationError, ParameterError
from satd.tensor import Tensor, grad_check

from grad_cases import OPS


def rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, shape))


def test_matmul_identity_and_dot():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    assert grad_check(lambda a, b: T.tsum((a @ b) * w), [a, b]) < 1e-6


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = rand(rng, 3, 5), rand(rng, 5, 4), rand(rng, 4, 2)
        left = ((a @ b) @ c).data
        right = (a @ (b @ c)).data
        assert np.max(np.abs(left - right) / np.maximum(1.0, np.abs(right))) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_temp(Tensor([[2.0, 2.0, 2.0]]), 0.3).data, [[1 / 3] * 3], atol=1e-15)
    e = math.e / (math.e + 1)
    np.testing.assert_allclose(T.softmax_temp(Tensor([1.0, 0.0]), 1.0).data, [e, 1 - e], atol=1e-12)
    np.testing.assert_allclose(T.softmax_temp(Tensor([0.1, 0.0]), 0.1).data, [e, 1 - e], atol=1e-12)
    assert round(e, 4) == 0.7311


def test_softmax_rows_sum_to_one_and_stay_open():
    rng = np.random.default_rng(2)
    for _ in range(50):
        z = Tensor(rng.uniform(-2, 2, (4, 6)))
        tau = rng.uniform(0.05, 2.0)
        p = T.softmax_temp(z, tau).data
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
        assert np.all((p > 0) & (p < 1))


def test_softmax_is_stable_for_large_logits():
    p = T.softmax_temp(Tensor([[1000.0, 0.0], [-1000.0, -1000.0]]), 0.06).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[1], [0.5, 0.5])


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(ParameterError):
        T.softmax_temp(Tensor([1.0, 2.0]), tau)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.l2_normalize(Tensor(u)).data, u)
    rng = np.random.default_rng(3)
    rows = T.l2_normalize(Tensor(rng.normal(size=(20, 8)))).data
    assert np.all(np.abs(np.linalg.norm(rows, axis=1) - 1) < 1e-12)


def test_l2_normalize_degenerate_row():
    with pytest.raises(DegenerateVectorError):
        T.l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_cosine_sim_examples():
    assert T.cosine_sim_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 3.0]])).data[0, 0] == 0.0
    v = Tensor([[0.3, -1.2, 2.0]])
    assert abs(T.cosine_sim_matrix(v, v).data[0, 0] - 1) < 1e-15
    assert abs(T.cosine_sim_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]])).data[0, 0] - 1 / math.sqrt(2)) < 1e-12
    rng = np.random.default_rng(4)
    s = T.cosine_sim_matrix(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(7, 3)))).data
    assert np.all(np.abs(s) <= 1 + 1e-9)
    with pytest.raises(DegenerateVectorError):
        T.cosine_sim_matrix(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(5).uniform(-2, 2, 6))
    assert grad_check(lambda x: T.tsum(x * x), [x]) < 1e-8
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(6)
    z = rand(rng, 4, 5)
    y = np.eye(5)[rng.integers(0, 5, 4)]
    assert grad_check(lambda z: -T.tsum(T.log(T.softmax_temp(z, 0.7)) * y), [z], h=1e-5) < 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_flags_non_finite():
    with pytest.raises(EvaluationError):
        grad_check(lambda x: T.tsum(T.exp(x)), [Tensor([1000.0, 2.0])])


def test_stop_gradient_blocks_everything():
    rng = np.random.default_rng(7)
    x = rand(rng, 3, 4)
    x.requires_grad = True
    out = T.tsum(T.exp(T.stop_gradient(x)) * 3.0) + T.tsum(T.stop_gradient(x @ Tensor(np.eye(4))))
    assert not out.requires_grad
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = T.tsum(T.stop_gradient(x) * y)
    loss.backward()
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, x.data)
    x.grad = None
    T.tsum(T.stop_gradient(x) * x).backward()
    np.testing.assert_array_equal(x.grad, x.data)


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * x)
    assert not y.requires_grad
    assert T.is_grad_enabled()




@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    f, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(3):
        inputs = [rand(rng, *s) for s in shapes]
        assert grad_check(f, inputs) <= 1e-4


def test_broadcast_limited_to_rows():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))
    out = T.add(Tensor(np.zeros((3, 4))), Tensor(np.arange(4.0)))
    np.testing.assert_array_equal(out.data[2], np.arange(4.0))


def test_gradient_accumulates_over_shared_use():
    x = Tensor([1.5, -0.5], requires_grad=True)
    y = x * x + x * 2.0
    T.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 2)
