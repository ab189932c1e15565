import numpy as np
import pytest

from lungsound import autodiff as ad
from lungsound.autodiff import Tensor
from lungsound.errors import (InvalidConfigError, InvalidInputError,
                              UsageError)


def conv2d_loop(x, w, b, padding="valid"):
    """Quadruple-loop cross-correlation oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding == "same":
        pl, pr = (kh - 1) // 2, kh - 1 - (kh - 1) // 2
        ql, qr = (kw - 1) // 2, kw - 1 - (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (pl, pr), (ql, qr)))
        h, wd = x.shape[2], x.shape[3]
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for ni in range(n):
        for oi in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[ni, oi, i, j] = (
                        np.sum(x[ni, :, i : i + kh, j : j + kw] * w[oi]) + b[oi]
                    )
    return out


class TestConv2d:
    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, w, Tensor(np.zeros(1)))
        assert np.allclose(out.data, x.data)

    def test_zero_input_broadcasts_bias(self):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        w = Tensor(np.random.default_rng(1).standard_normal((4, 2, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        out = ad.conv2d(x, w, b, padding="same")
        for oi in range(4):
            assert np.allclose(out.data[0, oi], b.data[oi])

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_matches_loop_oracle(self, padding):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 5, 5))
        w = rng.standard_normal((2, 1, 3, 3))
        b = rng.standard_normal(2)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding).data
        assert np.allclose(out, conv2d_loop(x, w, b, padding), atol=1e-6)

    def test_even_kernel_pads_high_side(self):
        # 4x1 kernel, impulse at frequency row 1 of 4: "same" output places
        # the extra tap beyond the high side
        x = np.zeros((1, 1, 4, 1))
        x[0, 0, 1, 0] = 1.0
        w = np.arange(4.0).reshape(1, 1, 4, 1)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), "same").data
        oracle = conv2d_loop(x, w, np.zeros(1), "same")
        assert out.shape == (1, 1, 4, 1)
        assert np.allclose(out, oracle)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            ad.conv2d(Tensor(np.zeros((1, 2, 3, 3))),
                      Tensor(np.zeros((1, 3, 1, 1))), Tensor(np.zeros(1)))


class TestPooling:
    def test_avg_2x2(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
        assert ad.pool2d(x, "avg", (2, 2)).data[0, 0, 0, 0] == 4.0

    def test_max_2x2(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
        assert ad.pool2d(x, "max", (2, 2)).data[0, 0, 0, 0] == 7.0

    def test_floor_division_drops_remainder(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 5, 7)))
        out = ad.pool2d(x, "avg", (2, 2))
        assert out.shape == (1, 1, 2, 3)

    def test_kernel_too_large_rejected(self):
        with pytest.raises(InvalidConfigError):
            ad.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "avg", (3, 3))

    def test_global_variants_match_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 5))
        avg_c = ad.global_avg_over(Tensor(x), "channel").data
        max_t = ad.global_max_over(Tensor(x), "time").data
        avg_f = ad.global_avg_over(Tensor(x), "frequency").data
        for n in range(2):
            for f in range(4):
                for t in range(5):
                    assert avg_c[n, f, t] == pytest.approx(
                        sum(x[n, c, f, t] for c in range(3)) / 3
                    )
            for c in range(3):
                for f in range(4):
                    assert max_t[n, c, f] == pytest.approx(
                        max(x[n, c, f, t] for t in range(5))
                    )
                for t in range(5):
                    assert avg_f[n, c, t] == pytest.approx(
                        sum(x[n, c, f, t] for f in range(4)) / 4
                    )


class TestBatchNorm:
    def test_training_normalizes_batch(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 5 + 2)
        gamma = Tensor(np.ones(3))
        beta = Tensor(np.zeros(3))
        rm, rv = np.zeros(3), np.ones(3)
        out = ad.batch_norm(x, gamma, beta, rm, rv, training=True).data
        for c in range(3):
            assert abs(out[:, c].mean()) < 1e-4
            assert abs(out[:, c].var() - 1.0) < 1e-3

    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((64, 2, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(
            axis=(0, 2, 3), keepdims=True
        )
        out = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            np.zeros(2), np.ones(2), training=True).data
        assert np.allclose(out, x, atol=1e-4)

    def test_eval_uses_running_stats(self):
        x = np.array([3.0, 5.0]).reshape(2, 1, 1, 1)
        gamma, beta = np.array([2.0]), np.array([1.0])
        rm, rv = np.array([4.0]), np.array([          4.0])
        out = ad.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                            training=False).data
        expected = (x - 4.0) / np.sqrt(4.0 + 1e-5) * 2.0 + 1.0
        assert np.allclose(out, expected)


class TestInstanceNormFreq:
    def test_idempotent_on_normalized_rows(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 3, 64))
        x = (x - x.mean(axis=-1, keepdims=True)) / x.std(axis=-1, keepdims=True)
        out = ad.instance_norm_freq(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-4)

    def test_constant_rows_map_to_zero(self):
        out = ad.instance_norm_freq(Tensor(np.full((1, 2, 3, 8), 7.0))).data
        assert np.allclose(out, 0.0)

    def test_matches_row_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 2, 8))
        out = ad.instance_norm_freq(Tensor(x)).data
        for f in range(2):
            row = x[0, 0, f]
            expected = (row - row.mean()) / np.sqrt(row.var() + 1e-5)
            assert np.allclose(out[0, 0, f], expected, atol=1e-6)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        out = ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, x)

    def test_hand_sum(self):
        out = ad.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]),
                       Tensor([0.0]))
        assert out.data[0, 0] == 3.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, w, b = (rng.standard_normal(s) for s in [(4, 8), (8, 3), (3,)])
        out = ad.dense(Tensor(x), Tensor(w), Tensor(b)).data
        oracle = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                oracle[i, j] = sum(x[i, k] * w[k, j] for k in range(8)) + b[j]
        assert np.allclose(out, oracle, atol=1e-9)


class TestActivations:
    def test_relu(self):
        out = ad.relu(Tensor([-3.0, 2.0])).data
        assert np.array_equal(out, [0.0, 2.0])

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([[0.0, 0.0, 0.0]])).data
        assert np.allclose(out, 1.0 / 3.0)

    def test_softmax_simplex_on_extreme_inputs(self):
        x = Tensor(np.array([[1e4, -1e4, 0.0], [300.0, 300.0, -300.0]]))
        out = ad.softmax(x, axis=-1).data
        assert np.all(np.isfinite(out))
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_dropout_p0_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert ad.dropout(x, 0.5, False) is x

    def test_dropout_preserves_expectation(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones(10000))
        out = ad.dropout(x, 0.5, True, rng).data
        assert abs(out.mean() - 1.0) < 0.05


class TestAttention:
    def mha_params(self, rng, d, k, heads=1):
        wq = [Tensor(rng.standard_normal((d, k))) for _ in range(heads)]
        wk = [Tensor(rng.standard_normal((d, k))) for _ in range(heads)]
        wv = [Tensor(rng.standard_normal((d, k))) for _ in range(heads)]
        wo = Tensor(rng.standard_normal((heads * k, d)))
        return wq, wk, wv, wo

    def test_identical_tokens_yield_identical_outputs(self):
        rng = np.random.default_rng(0)
        token = rng.standard_normal(6)
        x = Tensor(np.tile(token, (2, 5, 1)))
        out = ad.multi_head_attention(x, *self.mha_params(rng, 6, 3, heads=2))
        for s in range(1, 5):
            assert np.allclose(out.data[:, s], out.data[:, 0])

    def test_single_token_reduces_to_projection(self):
        rng = np.random.default_rng(1)
        wq, wk, wv, wo = self.mha_params(rng, 4, 2)
        x = Tensor(rng.standard_normal((1, 1, 4)))
        out = ad.multi_head_attention(x, wq, wk, wv, wo)
        expected = x.data @ wv[0].data @ wo.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_matches_hand_computed_table(self):
        # H=1, K=2, S=2, D=2 with simple projections
        x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        wq = np.array([[1.0, 0.0], [0.0, 1.0]])
        wk = np.array([[1.0, 1.0], [0.0, 1.0]])
        wv = np.array([[2.0, 0.0], [0.0, 3.0]])
        wo = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = ad.multi_head_attention(
            Tensor(x), [Tensor(wq)], [Tensor(wk)], [Tensor(wv)], Tensor(wo)
        ).data
        q = x[0] @ wq
        k = x[0] @ wk
        v = x[0] @ wv
        scores = q @ k.T / np.sqrt(2.0)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        expected = (weights @ v) @ wo
        assert np.allclose(out[0], expected, atol=1e-6)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = ad.tsum(x * x)
        loss.backward()
        assert np.allclose(x.grad, 2 * x.data)

    def test_unused_parameter_keeps_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        unused.zero_grad()
        ad.tsum(x * x).backward()
        assert np.array_equal(unused.grad, np.zeros(2))

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = ad.tsum(x * x)
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_nonscalar_backward_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(InvalidInputError):
            (x * x).backward()


class TestGradCheck:
    TOL = 1e-6

    def test_dense(self):
        err = ad.grad_check(
            lambda x, w, b: ad.tsum(ad.dense(x, w, b) ** 2),
            [(3, 4), (4, 2), (2,)], seed=0,
        )
        assert err < self.TOL

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_conv2d(self, padding):
        err = ad.grad_check(
            lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, padding) ** 2),
            [(2, 2, 5, 5), (3, 2, 3, 3), (3,)], seed=1,
        )
        assert err < self.TOL

    def test_conv2d_even_kernel(self):
        err = ad.grad_check(
            lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, "same") ** 2),
            [(1, 1, 5, 4), (2, 1, 4, 1), (2,)], seed=2,
        )
        assert err < self.TOL

    def test_pool_avg(self):
        err = ad.grad_check(
            lambda x: ad.tsum(ad.pool2d(x, "avg", (2, 2)) ** 2),
            [(2, 2, 4, 6)], seed=3,
        )
        assert err < self.TOL

    def test_pool_max(self):
        err = ad.grad_check(
            lambda x: ad.tsum(ad.pool2d(x, "max", (2, 2)) ** 2),
            [(2, 2, 4, 4)], seed=4,
        )
        assert err < self.TOL

    def test_global_pools(self):
        err = ad.grad_check(
            lambda x: ad.tsum(ad.global_avg_over(x, "channel") ** 2)
            + ad.tsum(ad.global_max_over(x, "time") ** 2)
            + ad.tsum(ad.global_avg_over(x, "frequency") ** 2),
            [(2, 3, 4, 5)], seed=5,
        )
        assert err < self.TOL

    def test_batch_norm(self):
        # Weight the output elementwise so the loss is not invariant to the
        # normalization (plain sum-of-squares of a standardized tensor has
        # near-zero input gradients, which defeats a relative metric).
        coef = Tensor(np.random.default_rng(60).standard_normal((3, 2, 4, 4)))

        def fn(x, g, b):
            bn = ad.batch_norm(x, g, b, np.zeros(2), np.ones(2),
                               training=True)
            return ad.tsum(coef * bn + (coef * bn) ** 2)

        assert ad.grad_check(fn, [(3, 2, 4, 4), (2,), (2,)], seed=6) < 1e-5

    def test_instance_norm(self):
        err = ad.grad_check(
            lambda x: ad.tsum(ad.instance_norm_freq(x) ** 2),
            [(1, 2, 2, 6)], seed=7,
        )
        assert err < 1e-5

    def test_attention(self):
        def fn(x, q, k, v, o):
            return ad.tsum(
                ad.multi_head_attention(x, [q], [k], [v], o) ** 2
            )

        err = ad.grad_check(
            fn, [(1, 3, 4), (4, 2), (4, 2), (4, 2), (2, 4)], seed=8
        )
        assert err < 1e-5

    def test_softmax_kl_composite(self):
        y = np.array([[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]])

        def fn(logits):
            p = ad.softmax(logits, axis=-1)
            return ad.tsum(Tensor(y) * (ad.log(Tensor(y)) - ad.log(p)))

        assert ad.grad_check(fn, [(2, 3)], seed=9) < 1e-5
