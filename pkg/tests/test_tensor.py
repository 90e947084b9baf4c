import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_matches, fd_grad, rel_err
from layoutedit import tensor as T
from layoutedit.rng import Rng
from layoutedit.tensor import (NumericsError, Param, ShapeError, Tensor,
                               adamw_step, concat, layer_norm, masked_softmax,
                               matmul, mha, softmax)


class TestMatmul:
    def test_identity(self):
        a = np.arange(9, dtype=float).reshape(3, 3)
        out = matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_vs_finite_differences(self, np_rng):
        a = Tensor(np_rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(np_rng.normal(size=(4, 2)), requires_grad=True)
        for leaf in (a, b):
            assert_grad_matches(lambda: matmul(a, b).sum(), leaf)

    def test_batched_grad(self, np_rng):
        a = Tensor(np_rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(np_rng.normal(size=(4, 5)), requires_grad=True)
        assert_grad_matches(lambda: matmul(a, b).sum(), b)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        np.testing.assert_allclose(out, [1.0, 0.0])

    def test_rows_sum_to_one(self, np_rng):
        out = softmax(Tensor(np_rng.normal(size=(5, 7)) * 50), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)

    def test_grad(self, np_rng):
        x = Tensor(np_rng.normal(size=(3, 4)), requires_grad=True)
        r = np_rng.normal(size=(3, 4))
        assert_grad_matches(lambda: (softmax(x, axis=-1) * Tensor(r)).sum(), x)

    def test_masked_zero_weight(self, np_rng):
        x = Tensor(np_rng.normal(size=(2, 4)))
        mask = np.array([True, False, True, False])
        out = masked_softmax(x, mask[None, :], axis=-1).data
        assert (out[:, ~mask] == 0.0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_input_zero_output(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_standardization(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_grads(self, np_rng):
        x = Tensor(np_rng.normal(size=(3, 5)), requires_grad=True)
        gain = Tensor(np_rng.normal(size=5), requires_grad=True)
        bias = Tensor(np_rng.normal(size=5), requires_grad=True)
        r = np_rng.normal(size=(3, 5))
        for leaf in (x, gain, bias):
            assert_grad_matches(
                lambda: (layer_norm(x, gain, bias) * Tensor(r)).sum(), leaf)


class TestConcat:
    def test_sequence_axis_shape(self):
        out = concat([Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4)))], axis=0)
        assert out.shape == (5, 4)

    def test_channel_axis_shape(self):
        out = concat([Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3)))], axis=1)
        assert out.shape == (2, 7)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 3)))], axis=0)

    @given(n1=st.integers(1, 5), n2=st.integers(1, 5), d=st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_bit_exact(self, n1, n2, d):
        rng = Rng(n1 * 100 + n2 * 10 + d)
        a, b = rng.normal((n1, d)), rng.normal((n2, d))
        out = concat([Tensor(a), Tensor(b)], axis=0).data
        assert (out[:n1] == a).all() and (out[n1:] == b).all()


class TestMha:
    def test_single_key_returns_value_row(self, np_rng):
        q = Tensor(np_rng.normal(size=(5, 8)))
        k = Tensor(np_rng.normal(size=(1, 8)))
        v = Tensor(np_rng.normal(size=(1, 8)))
        out = mha(q, k, v, heads=2)
        np.testing.assert_allclose(out.data, np.repeat(v.data, 5, axis=0),
                                   atol=1e-12)

    def test_key_permutation_invariance(self, np_rng):
        q = Tensor(np_rng.normal(size=(3, 8)))
        k = np_rng.normal(size=(6, 8))
        v = np_rng.normal(size=(6, 8))
        perm = np.array([4, 0, 5, 2, 1, 3])
        a = mha(q, Tensor(k), Tensor(v), heads=4).data
        b = mha(q, Tensor(k[perm]), Tensor(v[perm]), heads=4).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            mha(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))),
                Tensor(np.zeros((2, 6))), heads=4)

    def test_masked_keys_zero_weight(self, np_rng):
        q = Tensor(np_rng.normal(size=(2, 4)))
        k = Tensor(np_rng.normal(size=(5, 4)))
        v = Tensor(np_rng.normal(size=(5, 4)))
        mask = np.array([True, True, False, True, False])
        cap = {}
        mha(q, k, v, heads=2, mask=mask, weights_out=cap)
        assert (cap["weights"][:, :, ~mask] == 0.0).all()

    def test_grads_all_inputs(self, np_rng):
        q = Tensor(np_rng.normal(size=(3, 4)), requires_grad=True)
        k = Tensor(np_rng.normal(size=(5, 4)), requires_grad=True)
        v = Tensor(np_rng.normal(size=(5, 4)), requires_grad=True)
        r = np_rng.normal(size=(3, 4))
        for leaf in (q, k, v):
            assert_grad_matches(
                lambda: (mha(q, k, v, heads=2) * Tensor(r)).sum(), leaf)


class TestAdamW:
    def test_zero_grad_no_change(self):
        p = Param("p", np.ones(3))
        p.tensor.grad = np.zeros(3)
        adamw_step([p], lr=0.1, weight_decay=0.0)
        # zero grad means zero moments and zero update
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_descent_on_quadratic(self):
        p = Param("theta", np.array([1.0]))
        x = Tensor(p.data, requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        p.tensor.grad = x.grad
        adamw_step([p], lr=0.1)
        assert p.data[0] < 1.0

    def test_converges_to_minimizer(self):
        # f(x, y) = (x - 3)^2 + 2 (y + 1)^2, minimizer (3, -1)
        p = Param("xy", np.array([0.0, 0.0]))
        for _ in range(500):
            x, y = p.data
            p.tensor.grad = np.array([2 * (x - 3.0), 4 * (y + 1.0)])
            adamw_step([p], lr=0.05)
        np.testing.assert_allclose(p.data, [3.0, -1.0], atol=1e-3)


class TestNumerics:
    def test_non_finite_is_an_error(self):
        with pytest.raises(NumericsError):
            T.log(Tensor([0.0]))

    def test_division_by_zero_raises(self):
        with pytest.raises(NumericsError):
            Tensor([1.0]) / Tensor([0.0])


class TestRng:
    def test_determinism(self):
        a = Rng(42).normal((100,))
        b = Rng(42).normal((100,))
        np.testing.assert_array_equal(a, b)

    def test_streams_differ_by_seed(self):
        assert not np.array_equal(Rng(1).uniform((50,)), Rng(2).uniform((50,)))

    def test_spawn_independent_of_order(self):
        r = Rng(7)
        a = r.spawn("alpha").normal((10,))
        r2 = Rng(7)
        r2.spawn("beta")
        b = r2.spawn("alpha").normal((10,))
        np.testing.assert_array_equal(a, b)

    def test_uniform_range_and_moments(self):
        u = Rng(3).uniform((20000,))
        assert (u > 0).all() and (u <= 1).all()
        assert abs(u.mean() - 0.5) < 0.01

    def test_normal_moments(self):
        z = Rng(5).normal((40000,))
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_randint_range_and_guard(self):
        r = Rng(6)
        draws = [r.randint(5) for _ in range(200)]
        assert set(draws) == {0, 1, 2, 3, 4}
        with pytest.raises(ValueError):
            r.randint(0)
