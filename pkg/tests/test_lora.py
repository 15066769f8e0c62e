import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdse import tensor as T
from mdse.lora import (
    LoraAdapter,
    LoraTarget,
    ParamLayout,
    adapt,
    count_trainable,
    full_scale_count,
)
from mdse.nn import Linear, make_rng
from mdse.tensor import Tensor


def test_identity_at_init_bit_exact(rng):
    lin = Linear(rng, 12, 10, trainable=False)
    x = Tensor(rng.normal(size=(1000, 12)))
    base = lin(x).data
    lin.attach_lora(rng, 4, 8.0, dropout=0.05)
    assert np.array_equal(lin(x).data, base)
    lin.train()
    assert np.array_equal(lin(x).data, base)  # dropout only touches the zero branch


def test_rank_limited_identity():
    r = 3
    ad = LoraAdapter.create(make_rng(0), 8, 8, r, alpha=float(r))
    ad.A.data[...] = np.eye(8)[:, :r]
    ad.B.data[...] = np.eye(8)[:r]
    x = np.random.default_rng(0).normal(size=(4, 8))
    out = adapt(Tensor(np.zeros((8, 8))), ad, Tensor(x)).data
    assert np.allclose(out[:, :r], x[:, :r], atol=1e-15)
    assert np.all(out[:, r:] == 0)


def test_only_factors_get_gradients(rng):
    w = Tensor(rng.normal(size=(6, 10)), requires_grad=True)
    ad = LoraAdapter.create(rng, 10, 6, 2, 4.0)
    ad.B.data[...] = rng.normal(size=ad.B.shape)
    T.backward(T.sum(adapt(w, ad, Tensor(rng.normal(size=(3, 10))))))
    assert w.grad is None
    assert np.any(ad.A.grad) and np.any(ad.B.grad)


def test_frozen_linear_has_no_weight_gradient(rng):
    lin = Linear(rng, 10, 6, trainable=False)
    lin.attach_lora(rng, 2, 4.0)
    lin.lora.B.data[...] = 1.0
    T.backward(T.sum(lin(Tensor(rng.normal(size=(3, 10))))))
    assert lin.weight.grad is None and lin.lora.A.grad is not None


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(5, 9)))
    ad = LoraAdapter.create(make_rng(seed), 9, 5, 2, 4.0)
    ad.B.data[...] = rng.normal(size=ad.B.shape)
    x, y = rng.normal(size=(2, 9)), rng.normal(size=(2, 9))
    lhs = adapt(w, ad, Tensor(a * x + b * y)).data
    rhs = a * adapt(w, ad, Tensor(x)).data + b * adapt(w, ad, Tensor(y)).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.abs(lhs).max())


@pytest.mark.parametrize("r", [1, 2, 4])
def test_update_rank_bound(r, rng):
    ad = LoraAdapter.create(rng, 12, 10, r, 2.0 * r)
    ad.B.data[...] = rng.normal(size=ad.B.shape)
    assert np.linalg.matrix_rank(ad.update_matrix()) <= r


def test_scaling_applied(rng):
    ad = LoraAdapter.create(rng, 8, 8, 2, 16.0)
    ad.B.data[...] = rng.normal(size=ad.B.shape)
    x = rng.normal(size=(3, 8))
    assert np.allclose(ad.delta(Tensor(x)).data, 8.0 * x @ (ad.A.data @ ad.B.data).T, atol=1e-12)


def test_rank_and_dropout_validation(rng):
    with pytest.raises(ValueError):
        LoraAdapter.create(rng, 8, 8, 5, 1.0)
    with pytest.raises(ValueError):
        LoraAdapter.create(rng, 8, 8, 2, 1.0, dropout=1.0)


def test_shape_mismatch(rng):
    ad = LoraAdapter.create(rng, 8, 6, 2, 1.0)
    with pytest.raises(T.ShapeError):
        adapt(Tensor(np.zeros((6, 9))), ad, Tensor(np.zeros((1, 9))))


class TestCounting:
    def test_single_768_adapter(self):
        layout = ParamLayout({"q": [(768, 768)]}, {})
        assert count_trainable(layout, [LoraTarget("q", 8, 16.0)]) == 12_288

    def test_empty_plan(self):
        layout = ParamLayout({"q": [(768, 768)]}, {"queries": 100})
        assert count_trainable(layout, []) == 0

    def test_full_scale_in_range(self):
        counts = full_scale_count()
        assert 1_800_000 <= counts["total"] <= 2_200_000
        # 12 blocks x 8 attention maps x 8*(768+768), plus the 768<->3072 pair
        assert counts["qformer.attn"] == 12 * 8 * 8 * 1536
        assert counts["qformer.mlp"] == 12 * 2 * 8 * (768 + 3072)
        assert counts["llm_proj"] == 4 * (768 + 2560)
