import numpy as np
import pytest

from dualseg.errors import ContractError, DimensionError
from dualseg.nn import (BN_EPS, IGNORE_INDEX, BatchNorm2d, Conv2d, ConvBNReLU,
                        Module, batch_norm, conv2d, conv_out_extent,
                        cross_entropy, interp_matrix, upsample_bilinear)
from dualseg.tensor import (Tensor, finite_diff_grad, grad_error, make_rng,
                            reduce_sum)

RNG = make_rng(77)


def rand(*shape, requires_grad=True):
    return Tensor(RNG.normal(size=shape), requires_grad=requires_grad)


def naive_conv(x, w, b, stride, pad, dil):
    """Direct six-loop cross-correlation, the reference implementation."""
    n, c, h, wid = x.shape
    oc, _, kh, kw = w.shape
    oh = conv_out_extent(h, kh, stride, pad, dil)
    ow = conv_out_extent(wid, kw, stride, pad, dil)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (w[o, ci, ki, kj] *
                                        xp[ni, ci, i * stride + ki * dil, j * stride + kj * dil])
                    out[ni, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    @pytest.mark.parametrize("kernel", [1, 3])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad", [0, 1])
    @pytest.mark.parametrize("dil", [1, 2])
    def test_matches_naive(self, kernel, stride, pad, dil):
        if conv_out_extent(6, kernel, stride, pad, dil) < 1:
            pytest.skip("degenerate geometry")
        x = RNG.normal(size=(2, 3, 6, 7))
        w = RNG.normal(size=(4, 3, kernel, kernel))
        b = RNG.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil)
        assert np.allclose(got.data, naive_conv(x, w, b, stride, pad, dil), atol=1e-10)

    def test_no_bias(self):
        x = RNG.normal(size=(1, 2, 4, 4))
        w = RNG.normal(size=(3, 2, 3, 3))
        got = conv2d(Tensor(x), Tensor(w), None, 1, 1, 1)
        assert np.allclose(got.data, naive_conv(x, w, None, 1, 1, 1), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(rand(1, 3, 4, 4), rand(2, 5, 1, 1))

    def test_needs_4d(self):
        with pytest.raises(DimensionError):
            conv2d(rand(3, 4, 4), rand(2, 3, 1, 1))

    def test_too_small_input(self):
        with pytest.raises(DimensionError):
            conv2d(rand(1, 1, 2, 2), rand(1, 1, 3, 3))

    @pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
    def test_gradients(self, stride, pad, dil):
        x, w, b = rand(2, 2, 5, 5), rand(3, 2, 3, 3), rand(3)

        def f(_=None):
            return reduce_sum(conv2d(x, w, b, stride, pad, dil))

        loss = f()
        for t in (x, w, b):
            t.zero_grad()
        loss.backward()
        for t in (x, w, b):
            assert grad_error(t.grad, finite_diff_grad(f, t)) <= 1e-6


class TestBatchNorm:
    def test_training_normalizes(self):
        x = Tensor(RNG.normal(loc=3.0, scale=2.0, size=(4, 3, 5, 5)))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        rm, rv = np.zeros(3), np.ones(3)
        y = batch_norm(x, gamma, beta, rm, rv, training=True).data
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_ema(self):
        x = RNG.normal(size=(2, 2, 3, 3))
        rm, rv = np.full(2, 5.0), np.full(2, 7.0)
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   rm, rv, training=True, momentum=0.1)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        ns = x.size // 2
        assert np.allclose(rm, 0.9 * 5.0 + 0.1 * mean, atol=1e-12)
        assert np.allclose(rv, 0.9 * 7.0 + 0.1 * var * ns / (ns - 1), atol=1e-12)

    def test_eval_uses_running_stats(self):
        x = RNG.normal(size=(1, 2, 2, 2))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 9.0])
        g, b = np.array([2.0, 3.0]), np.array([0.5, -0.5])
        y = batch_norm(Tensor(x), Tensor(g), Tensor(b), rm, rv, training=False).data
        want = (g.reshape(1, 2, 1, 1) * (x - rm.reshape(1, 2, 1, 1))
                / np.sqrt(rv.reshape(1, 2, 1, 1) + BN_EPS) + b.reshape(1, 2, 1, 1))
        assert np.allclose(y, want, atol=1e-12)

    def test_eval_does_not_touch_buffers(self):
        rm, rv = np.zeros(2), np.ones(2)
        batch_norm(rand(1, 2, 3, 3), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   rm, rv, training=False)
        assert np.array_equal(rm, np.zeros(2)) and np.array_equal(rv, np.ones(2))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            batch_norm(rand(1, 3, 2, 2), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        x = rand(2, 3, 4, 4)
        gamma = Tensor(RNG.normal(size=3) + 1.0, requires_grad=True)
        beta = rand(3)
        rm, rv = RNG.normal(size=3), np.abs(RNG.normal(size=3)) + 1.0
        coef = Tensor(RNG.normal(size=(2, 3, 4, 4)))

        def f(_=None):
            return reduce_sum(batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training) * coef)

        loss = f()
        for t in (x, gamma, beta):
            t.zero_grad()
        loss.backward()
        for t in (x, gamma, beta):
            assert grad_error(t.grad, finite_diff_grad(f, t)) <= 1e-6


class TestUpsample:
    def test_hand_case_2x2_to_4x4(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        y = upsample_bilinear(x, 4, 4).data[0, 0]
        want = np.array([[1.00, 1.25, 1.75, 2.00],
                         [1.50, 1.75, 2.25, 2.50],
                         [2.50, 2.75, 3.25, 3.50],
                         [3.00, 3.25, 3.75, 4.00]])
        assert np.allclose(y, want, atol=1e-12)

    def test_hand_case_downsample(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 1, 4))
        y = upsample_bilinear(x, 1, 2).data.ravel()
        assert np.allclose(y, [0.5, 2.5], atol=1e-12)

    def test_identity_when_same_size(self):
        x = rand(2, 3, 5, 7, requires_grad=False)
        assert np.array_equal(upsample_bilinear(x, 5, 7).data, x.data)

    def test_preserves_constants(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.25))
        y = upsample_bilinear(x, 11, 13).data
        assert np.allclose(y, 4.25, atol=1e-12)

    def test_interp_matrix_partition_of_unity(self):
        for n_in, n_out in [(2, 4), (3, 8), (8, 3), (5, 5), (1, 6)]:
            m = interp_matrix(n_in, n_out)
            assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)
            assert (m >= 0).all()

    def test_bad_target(self):
        with pytest.raises(DimensionError):
            upsample_bilinear(rand(1, 1, 2, 2), 0, 4)

    def test_gradient_exact_for_linear_map(self):
        x = rand(1, 2, 3, 4)
        coef = Tensor(RNG.normal(size=(1, 2, 6, 8)))

        def f(_=None):
            return reduce_sum(upsample_bilinear(x, 6, 8) * coef)

        loss = f()
        x.zero_grad()
        loss.backward()
        assert grad_error(x.grad, finite_diff_grad(f, x)) <= 1e-7


class TestCrossEntropy:
    def test_manual_value(self):
        logits = np.zeros((1, 3, 1, 2))
        logits[0, :, 0, 0] = [2.0, 0.0, -1.0]
        logits[0, :, 0, 1] = [0.0, 1.0, 0.0]
        labels = np.array([[[0, 1]]])
        z0 = np.array([2.0, 0.0, -1.0])
        z1 = np.array([0.0, 1.0, 0.0])
        want = 0.5 * ((np.log(np.exp(z0).sum()) - 2.0) + (np.log(np.exp(z1).sum()) - 1.0))
        got = cross_entropy(Tensor(logits), labels).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_uniform_logits_give_log_k(self):
        loss = cross_entropy(Tensor(np.zeros((2, 5, 3, 3))),
                             np.zeros((2, 3, 3), dtype=int)).item()
        assert loss == pytest.approx(np.log(5.0), abs=1e-12)

    def test_ignore_index_excluded(self):
        logits = Tensor(RNG.normal(size=(1, 4, 2, 2)))
        labels = np.array([[[0, IGNORE_INDEX], [IGNORE_INDEX, 3]]])
        kept = np.array([[[0, 0], [0, 3]]])
        z = logits.data
        lse = np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) + z.max(axis=1)
        per = lse - np.take_along_axis(z, kept[:, None], axis=1)[:, 0]
        want = (per[0, 0, 0] + per[0, 1, 1]) / 2.0
        assert cross_entropy(logits, labels).item() == pytest.approx(want, abs=1e-10)

    def test_all_ignored_is_zero_loss(self):
        logits = rand(1, 3, 2, 2)
        labels = np.full((1, 2, 2), IGNORE_INDEX)
        loss = cross_entropy(logits, labels)
        assert loss.item() == 0.0
        logits.zero_grad()
        loss.backward()
        assert logits.grad is None or np.allclose(logits.grad, 0.0)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy(rand(1, 3, 1, 1), np.array([[[3]]]))
        with pytest.raises(ContractError):
            cross_entropy(rand(1, 3, 1, 1), np.array([[[-1]]]))

    def test_label_shape_checked(self):
        with pytest.raises(DimensionError):
            cross_entropy(rand(1, 3, 2, 2), np.zeros((1, 3, 3), dtype=int))

    def test_gradient(self):
        logits = rand(2, 4, 3, 3)
        labels = RNG.integers(0, 4, size=(2, 3, 3))
        labels[0, 0, 0] = IGNORE_INDEX

        def f(_=None):
            return cross_entropy(logits, labels)

        loss = f()
        logits.zero_grad()
        loss.backward()
        assert grad_error(logits.grad, finite_diff_grad(f, logits)) <= 1e-6

    def test_grad_is_softmax_minus_onehot_over_count(self):
        logits = rand(1, 3, 1, 1)
        labels = np.array([[[2]]])
        loss = cross_entropy(logits, labels)
        logits.zero_grad()
        loss.backward()
        z = logits.data.ravel()
        soft = np.exp(z - z.max())
        soft /= soft.sum()
        soft[2] -= 1.0
        assert np.allclose(logits.grad.ravel(), soft, atol=1e-10)


class TestModules:
    def test_conv2d_module_init_scale(self):
        conv = Conv2d(8, 16, 3, rng=make_rng(0), dtype=np.float64)
        std = conv.weight.data.std()
        assert 0.5 * np.sqrt(2.0 / 72) < std < 2.0 * np.sqrt(2.0 / 72)
        assert np.allclose(conv.bias.data, 0.0)

    def test_named_parameters_recurse_lists(self):
        class Stack(Module):
            def __init__(self):
                self.blocks = [ConvBNReLU(2, 3, rng=make_rng(1)),
                               ConvBNReLU(3, 4, rng=make_rng(2))]

        names = [n for n, _ in Stack().named_parameters()]
        assert "blocks.0.conv.weight" in names
        assert "blocks.1.bn.gamma" in names
        assert len(names) == 6

    def test_state_roundtrip(self):
        a = ConvBNReLU(2, 3, rng=make_rng(3))
        b = ConvBNReLU(2, 3, rng=make_rng(4))
        b.load_state({n: arr for n, arr in a.state_arrays()})
        for (_, pa), (_, pb) in zip(a.state_arrays(), b.state_arrays()):
            assert np.array_equal(pa, pb)

    def test_load_state_rejects_unknown_and_missing(self):
        m = BatchNorm2d(2)
        good = {n: arr for n, arr in m.state_arrays()}
        with pytest.raises(ContractError):
            m.load_state({**good, "bogus": np.zeros(1)})
        bad = dict(good)
        bad.pop("gamma")
        with pytest.raises(ContractError):
            m.load_state(bad)

    def test_load_state_rejects_wrong_shape(self):
        m = BatchNorm2d(2)
        state = {n: arr for n, arr in m.state_arrays()}
        state["gamma"] = np.ones(3)
        with pytest.raises(DimensionError):
            m.load_state(state)

    def test_zero_grad_clears(self):
        m = Conv2d(1, 1, 1, rng=make_rng(5), dtype=np.float64)
        out = reduce_sum(m(Tensor(np.ones((1, 1, 2, 2)))))
        out.backward()
        assert m.weight.grad is not None
        m.zero_grad()
        assert m.weight.grad is None

    def test_convbnrelu_nonnegative_and_downsamples(self):
        m = ConvBNReLU(3, 8, stride=2, rng=make_rng(6))
        y = m(Tensor(RNG.normal(size=(2, 3, 8, 8)).astype(np.float32)), training=True)
        assert y.shape == (2, 8, 4, 4)
        assert (y.data >= 0).all()

    def test_dilation_keeps_extent_with_matching_pad(self):
        m = ConvBNReLU(2, 2, stride=1, dilation=4, rng=make_rng(7))
        y = m(Tensor(RNG.normal(size=(1, 2, 16, 16)).astype(np.float32)), training=True)
        assert y.shape == (1, 2, 16, 16)
