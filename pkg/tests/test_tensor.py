import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geohand import tensor as T
from geohand.nn import Linear
from geohand.tensor import PRIMITIVES, GraphError, Tensor, backward, grad_check, no_grad


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_primitive_values_at_origin():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    assert T.gelu(Tensor(0.0)).data == 0.0


def test_concat_extents():
    a, b = Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.ones((2, 5, 4, 4)))
    assert T.concat([a, b], axis=1).shape == (2, 8, 4, 4)


def test_shape_mismatch_names_primitive():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(T.ShapeError, match="concat"):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_unknown_op():
    with pytest.raises(KeyError, match="nope"):
        T.forward("nope", [Tensor(1.0)])


def test_sum_grad_is_ones():
    x = leaf(np.random.default_rng(0).standard_normal((3, 2, 4)))
    backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 2, 4)))


def test_sigmoid_grad_at_zero():
    x = leaf(0.0)
    backward(T.sigmoid(x))
    assert x.grad == 0.25


def test_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(1)
    c = Tensor(rng.standard_normal((3, 3)))
    err = grad_check(lambda a, b: T.tsum(T.matmul(T.matmul(a, b), c)), [(3, 3), (3, 3)], eps=1e-5)
    assert err < 1e-6


def test_linear_layer_check():
    lin = Linear(4, 3, np.random.default_rng(2))
    x = leaf(np.random.default_rng(3).standard_normal((2, 4)))
    err = grad_check(lambda x, w, b: T.tsum(T.square(lin(x))), [x, lin.weight, lin.bias], eps=1e-5)
    assert err < 1e-6


def test_constant_function_zero_error():
    assert grad_check(lambda x: Tensor(3.0), [(2, 2)]) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: T.tsum(x), [(2,)], eps=1e-2)


def test_grad_check_reports_non_finite_coordinate():
    x = leaf([1.0, 1e-7, 2.0])
    with pytest.raises(T.NonFiniteError, match=r"coordinate \(1,\)"), np.errstate(invalid="ignore"):
        grad_check(lambda a: T.tsum(T.log(a)), [x], eps=1e-6)


def test_non_scalar_loss_rejected():
    with pytest.raises(GraphError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_detached_leaf_rejected():
    x, y = leaf([1.0]), leaf([2.0])
    with pytest.raises(GraphError):
        backward(T.tsum(x * 3.0), leaves=[x, y])


def test_gradients_accumulate_across_uses():
    x = leaf([2.0])
    backward(T.tsum(x * x + x))
    assert x.grad[0] == 5.0


def test_backward_is_deterministic():
    rng = np.random.default_rng(4)
    data = rng.standard_normal((4, 5))
    grads = []
    for _ in range(2):
        x = leaf(data)
        backward(T.tsum(T.softmax(T.matmul(x, Tensor(data.T)), axis=-1) * Tensor(data[:, :4])))
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert y.op is None and not y.requires_grad


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_concat_backward_splits_exactly(a, b, n):
    rng = np.random.default_rng(a * 100 + b * 10 + n)
    x, y = leaf(rng.standard_normal((n, a))), leaf(rng.standard_normal((n, b)))
    g = rng.standard_normal((n, a + b))
    backward(T.tsum(T.concat([x, y], axis=1) * Tensor(g)))
    assert np.array_equal(np.concatenate([x.grad, y.grad], axis=1), g)


def test_every_primitive_registered_with_backward():
    for name, prim in PRIMITIVES.items():
        assert callable(prim.forward) and callable(prim.backward), name


def test_group_norm_fallback():
    assert T.default_groups(16) == 8
    assert T.default_groups(4) == 1


def test_adaptive_pool_of_constant_is_constant():
    x = Tensor(np.full((1, 2, 7, 5), 3.5))
    out = T.adaptive_avg_pool2d(x, (3, 2)).data
    assert np.allclose(out, 3.5)


def test_attention_matches_explicit_softmax():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal(s) for s in [(2, 3, 4), (2, 5, 4), (2, 5, 6)])
    logits = q @ k.transpose(0, 2, 1) / 2.0
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    out = T.attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.allclose(out, p @ v, atol=1e-12)
