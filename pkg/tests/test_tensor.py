import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mdse import tensor as T
from mdse.tensor import Tensor

from conftest import max_rel_error, numeric_gradient


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def grad_of(f, *xs):
    for x in xs:
        x.grad = None
    T.backward(f())
    return [x.grad for x in xs]


class TestMatmul:
    def test_identity(self, rng):
        b = Tensor(rng.normal(size=(3, 4)))
        assert np.array_equal(T.matmul(Tensor(np.eye(3)), b).data, b.data)

    def test_zeros(self, rng):
        a = Tensor(rng.normal(size=(4, 5)))
        assert np.all(T.matmul(a, Tensor(np.zeros((5, 3)))).data == 0)

    def test_grad_vs_finite_differences(self, rng):
        a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
        w = rng.normal(size=(4, 3))
        f = lambda: T.sum(T.mul(T.matmul(a, b), Tensor(w)))
        ga, gb = grad_of(f, a, b)
        assert max_rel_error(ga, numeric_gradient(f, a)) < 1e-6
        assert max_rel_error(gb, numeric_gradient(f, b)) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batched(self, rng):
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 5)))
        f = lambda: T.sum(T.sigmoid(T.matmul(a, b)))
        ga, gb = grad_of(f, a, b)
        assert max_rel_error(ga, numeric_gradient(f, a)) < 1e-6
        assert max_rel_error(gb, numeric_gradient(f, b)) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)

    def test_stable_for_huge_logits(self):
        out = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-12)

    def test_jacobian(self, rng):
        x = leaf(rng.normal(size=8))
        w = rng.normal(size=8)
        f = lambda: T.sum(T.mul(T.softmax(x), Tensor(w)))
        (g,) = grad_of(f, x)
        assert max_rel_error(g, numeric_gradient(f, x)) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(Tensor(x)).data
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestSigmoid:
    def test_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_symmetry(self, rng):
        x = rng.normal(size=20) * 5
        assert np.allclose(T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data, 1.0, atol=1e-15)

    def test_grad(self, rng):
        x = leaf(rng.normal(size=10))
        f = lambda: T.sum(T.sigmoid(x))
        (g,) = grad_of(f, x)
        s = 1 / (1 + np.exp(-x.data))
        assert max_rel_error(g, s * (1 - s)) < 1e-12
        assert max_rel_error(g, numeric_gradient(f, x)) < 1e-6

    def test_extreme_inputs_are_finite(self):
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(out)) and out[0] >= 0 and out[1] <= 1


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        T.backward(T.sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_accumulates_over_uses(self, rng):
        x = leaf(rng.normal(size=5))
        T.backward(T.sum(T.add(x, x)))
        assert np.array_equal(x.grad, 2 * np.ones(5))

    def test_non_scalar_rejected(self, rng):
        x = leaf(rng.normal(size=5))
        with pytest.raises(T.BackwardError):
            T.backward(T.scale(x, 2.0))

    def test_leaf_grads_accumulate_across_calls(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum(x))
        T.backward(T.sum(x))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_tape_is_topological_and_unique(self, rng):
        x = leaf(rng.normal(size=4))
        y = T.sigmoid(x)
        loss = T.sum(T.mul(y, T.add(y, x)))
        order = T.topo_order(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        assert len(pos) == len(order)
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_branch_order_independent(self, rng):
        xv = rng.normal(size=6)
        x1, x2 = leaf(xv), leaf(xv)
        a = lambda x: T.sum(T.sigmoid(x))
        b = lambda x: T.sum(T.tanh(T.scale(x, 3.0)))
        T.backward(T.add(a(x1), b(x1)))
        T.backward(T.add(b(x2), a(x2)))
        assert np.max(np.abs(x1.grad - x2.grad)) <= 1e-12

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng.normal(size=3))
        with T.no_grad():
            y = T.sigmoid(x)
        assert not y.requires_grad and y._parents == ()


def _ops(rng):
    """(name, f(x)->scalar) pairs for the 10-element gradient property."""
    w = Tensor(rng.normal(size=10))
    W = Tensor(rng.normal(size=(10, 10)))
    gamma, beta = Tensor(rng.normal(size=10)), Tensor(rng.normal(size=10))
    ids = rng.integers(0, 10, size=4)
    return [
        ("add", lambda x: T.sum(T.mul(T.add(x, w), w))),
        ("bias_add", lambda x: T.sum(T.mul(T.add(T.reshape(x, (2, 5)), Tensor([1.0, 2, 3, 4, 5])), T.reshape(w, (2, 5))))),
        ("scalar_mul", lambda x: T.sum(T.mul(T.scale(x, 3.5), w))),
        ("mul", lambda x: T.sum(T.mul(x, x))),
        ("exp", lambda x: T.sum(T.exp(T.scale(x, 0.3)))),
        ("log", lambda x: T.sum(T.log(T.add(T.mul(x, x), 1.0)))),
        ("tanh", lambda x: T.sum(T.mul(T.tanh(x), w))),
        ("gelu", lambda x: T.sum(T.mul(T.gelu(x), w))),
        ("linear", lambda x: T.sum(T.mul(T.linear(T.reshape(x, (1, 10)), W), T.reshape(w, (1, 10))))),
        ("transpose", lambda x: T.sum(T.mul(T.transpose(T.reshape(x, (2, 5))), T.reshape(w, (5, 2))))),
        ("concat", lambda x: T.sum(T.mul(T.concat([x, T.scale(x, 2.0)], axis=0), T.concat([w, w], axis=0)))),
        ("layer_norm", lambda x: T.sum(T.mul(T.layer_norm(x, gamma, beta), w))),
        ("embedding", lambda x: T.sum(T.mul(T.embedding(T.reshape(x, (5, 2)), ids[:2] % 5), Tensor(np.ones((2, 2)))))),
        ("cross_entropy", lambda x: T.cross_entropy(T.reshape(x, (2, 5)), [1, 3])),
        ("cosine", lambda x: T.sum(T.cosine_similarity(T.reshape(x, (2, 5)), T.reshape(w, (2, 5))))),
        ("mean_pool", lambda x: T.sum(T.mul(T.mean(T.reshape(x, (2, 5)), axis=0), w[:5]))),
        ("max_pool", lambda x: T.sum(T.max(T.reshape(x, (2, 5)), axis=0))),
        ("log_softmax", lambda x: T.sum(T.mul(T.log_softmax(x), w))),
        ("expand", lambda x: T.sum(T.mul(T.expand(x, (3, 10)), T.expand(w, (3, 10))))),
        ("index", lambda x: T.sum(T.mul(x[2:7], w[:5]))),
    ]


@pytest.mark.parametrize("i", range(20))
def test_op_gradients_match_finite_differences(i):
    rng = np.random.Generator(np.random.PCG64(7 + i))
    name, f = _ops(rng)[i]
    x = leaf(rng.normal(size=10))
    if name == "max_pool":
        x.data[5:] += 3.0  # keep the arg-max away from ties
    (g,) = grad_of(lambda: f(x), x)
    assert max_rel_error(g, numeric_gradient(lambda: f(x), x), floor=1e-8) < 1e-5, name


def test_broadcasting_is_limited():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    assert T.add(Tensor(np.ones((2, 3))), Tensor(2.0)).shape == (2, 3)
    assert T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3))).shape == (2, 3)


def test_l2_normalize_rejects_zero_vector():
    with pytest.raises(ValueError):
        T.l2_normalize(Tensor(np.zeros((2, 3))))
