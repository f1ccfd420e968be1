"""Gradient and semantics checks for the tensor engine.

Every differentiable op is validated against the central finite-difference
oracle in conftest (h = 1e-5, float64, max-norm relative error < 1e-4).
"""

import numpy as np
import pytest

from cmssl import tensor as T
from cmssl.tensor import Tensor

from conftest import assert_grad_matches, finite_difference_grad, max_rel_error

SEEDS = list(range(10))


def rng_for(seed):
    return np.random.default_rng(seed)


class TestElementwise:
    def test_add_mul_broadcast_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            a = r.normal(size=(3, 4))
            b = r.normal(size=(4,))
            assert_grad_matches(lambda x, y: T.tsum(T.mul(T.add(x, y), x)), [a, b])

    def test_scale_sub_div_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            a = r.normal(size=(2, 3))
            b = r.normal(size=(2, 3)) + 3.0  # keep the divisor away from zero
            assert_grad_matches(lambda x, y: T.tsum(T.div(T.scale(T.sub(x, y), 2.5), y)), [a, b])

    def test_exp_log_roundtrip(self):
        r = rng_for(0)
        x = r.normal(size=(5, 3))
        out = T.tlog(T.texp(Tensor(x)))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_exp_log_sqrt_relu_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            a = np.abs(r.normal(size=(4, 2))) + 0.5
            assert_grad_matches(lambda x: T.tsum(T.tlog(x)), [a])
            assert_grad_matches(lambda x: T.tsum(T.texp(x)), [a])
            assert_grad_matches(lambda x: T.tsum(T.tsqrt(x)), [a])
            b = r.normal(size=(4, 2)) + 0.1  # keep samples off the relu kink
            assert_grad_matches(lambda x: T.tsum(T.mul(T.relu(x), x)), [b])


class TestShapeOps:
    def test_reshape_flatten_transpose_concat_grads(self):
        for seed in SEEDS[:5]:
            r = rng_for(seed)
            a = r.normal(size=(2, 3, 4))
            b = r.normal(size=(2, 3, 4))

            def build(x, y):
                cat = T.concat([x, y], axis=1)
                tr = T.transpose(cat, (1, 0, 2))
                return T.tsum(T.mul(T.flatten(tr), T.flatten(tr)))

            assert_grad_matches(build, [a, b])

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        out = T.tsum(T.scale(T.concat([a, b], axis=0), 3.0))
        out.backward()
        np.testing.assert_allclose(a.grad, 3.0)
        np.testing.assert_allclose(b.grad, 3.0)


class TestReductions:
    def test_sum_mean_axes_grads(self):
        for seed in SEEDS[:5]:
            r = rng_for(seed)
            a = r.normal(size=(3, 4, 2))
            assert_grad_matches(lambda x: T.tsum(T.mul(T.tsum(x, axis=1), T.tsum(x, axis=1))), [a])
            assert_grad_matches(lambda x: T.tsum(T.mul(T.tmean(x, axis=(0, 2)), T.tmean(x, axis=(0, 2)))), [a])


class TestMatmul:
    def test_2d_and_nd_grads(self):
        for seed in SEEDS[:5]:
            r = rng_for(seed)
            a = r.normal(size=(3, 4))
            w = r.normal(size=(4, 2))
            assert_grad_matches(lambda x, y: T.tsum(T.mul(T.matmul(x, y), T.matmul(x, y))), [a, w])
            b = r.normal(size=(2, 3, 4))
            assert_grad_matches(lambda x, y: T.tsum(T.matmul(x, y)), [b, w])

    def test_batched_3d_grads(self):
        for seed in SEEDS[:5]:
            r = rng_for(seed)
            a = r.normal(size=(2, 3, 4))
            b = r.normal(size=(2, 4, 5))
            assert_grad_matches(lambda x, y: T.tsum(T.mul(T.matmul(x, y), T.matmul(x, y))), [a, b])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="inner dims"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_uniform_on_constant(self):
        for n in (2, 5, 9):
            out = T.softmax(Tensor(np.full(n, 3.7)), axis=0)
            np.testing.assert_allclose(out.data, 1.0 / n, atol=1e-12)

    def test_rows_sum_to_one(self):
        r = rng_for(1)
        x = r.normal(size=(6, 7)) * 10
        out = T.softmax(Tensor(x), axis=1)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_logsumexp_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            a = r.normal(size=(3, 4))
            w = r.normal(size=(3, 4))
            assert_grad_matches(lambda x: T.tsum(T.mul(T.softmax(x, axis=1), Tensor(w))), [a])
            assert_grad_matches(lambda x: T.tsum(T.logsumexp(x, axis=1)), [a])


class TestLayerNorm:
    def test_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            x = r.normal(size=(2, 5))
            gamma = r.normal(size=(5,))
            beta = r.normal(size=(5,))
            assert_grad_matches(
                lambda a, g, b: T.tsum(T.mul(T.layer_norm(a, g, b, axis=1), T.layer_norm(a, g, b, axis=1))),
                [x, gamma, beta],
            )

    def test_channel_axis_on_conv_map(self):
        r = rng_for(3)
        x = r.normal(size=(2, 4, 3, 3))
        out = T.layer_norm(Tensor(x), Tensor(np.ones((1, 4, 1, 1))), Tensor(np.zeros((1, 4, 1, 1))), axis=1)
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-9)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.5, training=False)
        assert out is x

    def test_mask_is_stored_for_backward(self):
        r = rng_for(0)
        x = Tensor(np.ones((100,)), requires_grad=True)
        out = T.dropout(x, 0.4, rng=r, training=True)
        T.tsum(out).backward()
        # grad equals the applied mask: zeros where dropped, 1/(1-p) elsewhere
        np.testing.assert_allclose(x.grad, out.data)

    def test_fixed_mask_grad_matches_fd(self):
        for seed in SEEDS[:3]:
            a = rng_for(seed).normal(size=(4, 4))

            def build(x, _seed=seed):
                return T.tsum(T.mul(T.dropout(x, 0.3, rng=rng_for(1000 + _seed)), x))

            assert_grad_matches(build, [a])


class TestGlobalAvgPool:
    def test_constant_tensor(self):
        out = T.global_avg_pool(Tensor(np.full((3, 2, 2, 2), 5.0)))
        np.testing.assert_allclose(out.data, [5.0, 5.0, 5.0])

    def test_singleton_spatial_is_identity(self):
        x = np.arange(4.0).reshape(4, 1, 1, 1)
        out = T.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.reshape(4))

    def test_matches_flat_summation_oracle(self):
        r = rng_for(7)
        x = r.normal(size=(3, 2, 2, 2))
        out = T.global_avg_pool(Tensor(x))
        expected = np.array([x[c].reshape(-1).sum() / x[c].size for c in range(3)])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_rank1_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            T.global_avg_pool(Tensor(np.ones(3)))

    def test_grads(self):
        for seed in SEEDS[:5]:
            a = rng_for(seed).normal(size=(2, 3, 2))
            assert_grad_matches(lambda x: T.tsum(T.mul(T.global_avg_pool(x), T.global_avg_pool(x))), [a])


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        for seed in SEEDS:
            v = rng_for(seed).normal(size=8) + 0.1
            assert T.cosine_similarity(Tensor(v), Tensor(v)).item() == pytest.approx(1.0, abs=1e-7)

    def test_antiparallel_is_minus_one(self):
        v = np.array([1.0, -2.0, 0.5])
        assert T.cosine_similarity(Tensor(v), Tensor(-v)).item() == pytest.approx(-1.0, abs=1e-7)

    def test_analytic_value(self):
        c = T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0]))
        assert c.item() == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-7)

    def test_zero_norm_does_not_crash(self):
        c = T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))
        assert np.isfinite(c.item())

    def test_grads(self):
        for seed in SEEDS:
            r = rng_for(seed)
            a = r.normal(size=6) + 0.2
            b = r.normal(size=6) + 0.2
            assert_grad_matches(lambda x, y: T.cosine_similarity(x, y), [a, b])

    def test_value_in_range(self):
        for seed in SEEDS:
            r = rng_for(seed)
            c = T.cosine_similarity(Tensor(r.normal(size=5)), Tensor(r.normal(size=5)))
            assert -1.0 - 1e-9 <= c.item() <= 1.0 + 1e-9


class TestConv:
    def test_conv2d_identity_kernel(self):
        r = rng_for(0)
        x = r.normal(size=(1, 5, 5))
        k = np.ones((1, 1, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(k), stride=(1, 1), padding=(0, 0))
        np.testing.assert_allclose(out.data, x)

    def test_conv3d_identity_kernel(self):
        r = rng_for(0)
        x = r.normal(size=(1, 3, 4, 4))
        k = np.ones((1, 1, 1, 1, 1))
        out = T.conv3d(Tensor(x), Tensor(k))
        np.testing.assert_allclose(out.data, x)

    def test_zero_input_zero_output(self):
        k = rng_for(1).normal(size=(2, 3, 3, 3, 3))
        out = T.conv3d(Tensor(np.zeros((3, 4, 6, 6))), Tensor(k), stride=(1, 1, 1), padding=(1, 1, 1))
        np.testing.assert_allclose(out.data, 0.0)

    def test_conv2d_matches_naive_loops(self):
        r = rng_for(2)
        x = r.normal(size=(2, 6, 7))
        k = r.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=(2, 1), padding=(1, 0)).data
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
        naive = np.zeros_like(out)
        for co in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    patch = xp[:, i * 2 : i * 2 + 3, j : j + 3]
                    naive[co, i, j] = (patch * k[co]).sum()
        np.testing.assert_allclose(out, naive, atol=1e-12)

    def test_conv3d_gradients_vs_fd(self):
        for seed in SEEDS[:3]:
            r = rng_for(seed)
            x = r.normal(size=(2, 4, 6, 6))
            k = r.normal(size=(2, 2, 3, 3, 3))
            assert_grad_matches(
                lambda a, w: T.tsum(T.mul(T.conv3d(a, w, stride=(1, 2, 2), padding=(1, 1, 1)),
                                          T.conv3d(a, w, stride=(1, 2, 2), padding=(1, 1, 1)))),
                [x, k],
            )

    def test_conv2d_gradients_vs_fd(self):
        for seed in SEEDS[:3]:
            r = rng_for(seed)
            x = r.normal(size=(2, 6, 5))
            k = r.normal(size=(3, 2, 3, 3))
            assert_grad_matches(
                lambda a, w: T.tsum(T.mul(T.conv2d(a, w, stride=(2, 1), padding=(1, 1)),
                                          T.conv2d(a, w, stride=(2, 1), padding=(1, 1)))),
                [x, k],
            )

    def test_batched_matches_per_sample(self):
        r = rng_for(4)
        x = r.normal(size=(3, 2, 4, 5, 5))
        k = r.normal(size=(4, 2, 3, 3, 3))
        batched = T.conv3d(Tensor(x), Tensor(k), padding=(1, 1, 1)).data
        for b in range(3):
            single = T.conv3d(Tensor(x[b]), Tensor(k), padding=(1, 1, 1)).data
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            T.conv3d(Tensor(np.ones((3, 4, 4, 4))), Tensor(np.ones((2, 4, 3, 3, 3))))

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError, match="H"):
            T.conv2d(Tensor(np.ones((1, 2, 8))), Tensor(np.ones((1, 1, 5, 3))))


class TestBackwardSemantics:
    def test_sum_loss_gives_ones(self):
        w = Tensor(np.zeros((3, 2)), requires_grad=True)
        T.tsum(w).backward()
        np.testing.assert_allclose(w.grad, 1.0)

    def test_unused_parameter_grad_stays_zero(self):
        w = Tensor(np.ones(4), requires_grad=True)
        unused = Tensor(np.ones(4), requires_grad=True)
        T.tsum(w).backward()
        np.testing.assert_allclose(unused.grad, 0.0)

    def test_fanout_gradients_sum(self):
        r = rng_for(0)
        x = r.normal(size=(3,))
        # path A alone
        xa = Tensor(x.copy(), requires_grad=True)
        T.tsum(T.mul(xa, xa)).backward()
        # path B alone
        xb = Tensor(x.copy(), requires_grad=True)
        T.tsum(T.texp(xb)).backward()
        # both paths from one tensor
        xc = Tensor(x.copy(), requires_grad=True)
        T.add(T.tsum(T.mul(xc, xc)), T.tsum(T.texp(xc))).backward()
        np.testing.assert_allclose(xc.grad, xa.grad + xb.grad, atol=1e-12)

    def test_backward_on_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_composed_graph_matches_fd(self):
        # conv3d -> relu -> pool -> cosine against a fixed direction
        for seed in SEEDS[:3]:
            r = rng_for(seed)
            x = r.normal(size=(2, 3, 5, 5))
            k = r.normal(size=(3, 2, 3, 3, 3)) * 0.5
            ref = r.normal(size=3)

            def build(a, w):
                feat = T.global_avg_pool(T.relu(T.conv3d(a, w, padding=(1, 1, 1))))
                return T.cosine_similarity(feat, Tensor(ref))

            assert_grad_matches(build, [x, k], tol=1e-4)

    def test_forward_deterministic(self):
        r = rng_for(5)
        x = r.normal(size=(2, 3, 4, 4))
        k = r.normal(size=(2, 2, 3, 3, 3))
        a = T.tsum(T.relu(T.conv3d(Tensor(x), Tensor(k), padding=(1, 1, 1))))
        b = T.tsum(T.relu(T.conv3d(Tensor(x), Tensor(k), padding=(1, 1, 1))))
        assert a.item() == b.item()

    def test_no_grad_builds_no_graph(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.tsum(T.mul(w, w))
        assert not out.requires_grad
        assert out._backward is None


class TestFiniteDifferenceOracle:
    def test_oracle_on_quadratic(self):
        # the oracle itself: grad of sum(x^2) is 2x
        x = np.array([1.0, -2.0, 3.0])
        g = finite_difference_grad(lambda a: float((a ** 2).sum()), x.copy())
        assert max_rel_error(2 * x, g) < 1e-8
