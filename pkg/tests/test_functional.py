import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from litevae import functional as F
from litevae.tensor import DimensionError, flop_counter, tensor


def conv_reference(x, w, b, stride, pad):
    """Direct quadruple-loop cross-correlation."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


class TestConv2d:
    def test_scaling_kernel(self):
        out = F.conv2d(tensor(np.ones((1, 1, 3, 3))), tensor([[[[2.0]]]]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_averaging_kernel(self):
        x = tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = F.conv2d(x, tensor(np.full((1, 1, 2, 2), 0.25)), stride=2)
        assert out.shape == (1, 1, 1, 1) and out.item() == 2.5

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (4, 0, 4)])
    def test_matches_loop_reference(self, stride, pad, k, rng, f64):
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = F.conv2d(tensor(x), tensor(w), tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, conv_reference(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(tensor(np.ones((1, 2, 4, 4))), tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            F.conv2d(tensor(np.ones((1, 1, 2, 2))), tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_gradients(self, stride, pad, rng, f64):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        proj = rng.standard_normal(conv_reference(x, w, b, stride, pad).shape)
        xt, wt, bt = tensor(x.copy(), True), tensor(w.copy(), True), tensor(b.copy(), True)
        (F.conv2d(xt, wt, bt, stride, pad) * proj).sum().backward()
        f = lambda: float((conv_reference(x, w, b, stride, pad) * proj).sum())  # noqa: E731
        for t, arr in ((xt, x), (wt, w), (bt, b)):
            assert rel_err(t.grad, numeric_grad(f, arr)) < 1e-6

    def test_conv_silu_chain_gradients(self, rng, f64):
        ws = [rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))]
        x = tensor(rng.standard_normal((1, 2, 6, 6)))
        wts = [tensor(w.copy(), True) for w in ws]

        def run(weights):
            h = x
            for w in weights[:-1]:
                h = F.conv2d(h, w, padding=1).silu()
            return F.conv2d(h, weights[-1], padding=1).sum()
        run(wts).backward()
        for wt, w in zip(wts, ws):
            num = numeric_grad(lambda: run([tensor(a) for a in ws]).item(), w)
            assert rel_err(wt.grad, num) < 1e-6

    def test_flop_count_closed_form(self):
        x = tensor(np.zeros((1, 3, 16, 16)))
        with flop_counter() as c:
            F.conv2d(x, tensor(np.zeros((8, 3, 3, 3))), tensor(np.zeros(8)), padding=1)
        assert c[0] == 2 * (3 * 9) * 8 * 256 + 8 * 256

    def test_dry_mode_shapes_only(self):
        with flop_counter(dry=True):
            out = F.conv2d(tensor(np.ones((1, 2, 8, 8))), tensor(np.ones((5, 2, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 5, 4, 4) and not out.data.any()


class TestGroupNorm:
    def test_constant_input_zero(self):
        out = F.group_norm(tensor(np.full((2, 4, 3, 3), 5.0)), 2, tensor(np.ones(4)), tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_input_beta(self):
        out = F.group_norm(tensor(np.full((1, 4, 3, 3), -2.0)), 4, tensor(np.ones(4)), tensor(np.full(4, 0.7)))
        np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-7)

    def test_statistics(self, rng, f64):
        x = rng.standard_normal((3, 6, 5, 5)) * 4 + 2
        out = F.group_norm(tensor(x), 3, tensor(np.ones(6)), tensor(np.zeros(6)), eps=1e-6).data
        g = out.reshape(3, 3, -1)
        var = x.reshape(3, 3, -1).var(axis=2)
        assert np.abs(g.mean(axis=2)).max() < 1e-5
        np.testing.assert_allclose(g.var(axis=2), var / (var + 1e-6), atol=1e-4)

    def test_bad_groups(self):
        with pytest.raises(DimensionError):
            F.group_norm(tensor(np.ones((1, 6, 2, 2))), 4, tensor(np.ones(6)), tensor(np.zeros(6)))

    def test_gradients(self, rng, f64):
        x = rng.standard_normal((2, 4, 3, 3))
        gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
        proj = rng.standard_normal(x.shape)

        def ref():
            g = x.reshape(2, 2, -1)
            mu, var = g.mean(2, keepdims=True), g.var(2, keepdims=True)
            y = ((g - mu) / np.sqrt(var + 1e-6)).reshape(x.shape)
            return float(((y * gamma[None, :, None, None] + beta[None, :, None, None]) * proj).sum())
        ts = [tensor(a.copy(), True) for a in (x, gamma, beta)]
        (F.group_norm(ts[0], 2, ts[1], ts[2]) * proj).sum().backward()
        for t, arr in zip(ts, (x, gamma, beta)):
            assert rel_err(t.grad, numeric_grad(ref, arr)) < 1e-6


class TestResampling:
    def test_upsample_block_replication(self):
        out = F.upsample_nearest(tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_upsample_factor_one(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(F.upsample_nearest(tensor(x), 1).data, x)

    def test_upsample_gradient_sums(self, rng, f64):
        x = rng.standard_normal((1, 1, 2, 3))
        proj = rng.standard_normal((1, 1, 6, 9))
        xt = tensor(x.copy(), True)
        (F.upsample_nearest(xt, 3) * proj).sum().backward()
        num = numeric_grad(lambda: float((np.kron(x[0, 0], np.ones((3, 3))) * proj[0, 0]).sum()), x)
        assert rel_err(xt.grad, num) < 1e-6

    @pytest.mark.parametrize("mode", ["constant", "reflect"])
    def test_pad_matches_numpy(self, mode, rng, f64):
        x = rng.standard_normal((1, 2, 4, 5))
        pad = (2, 1, 0, 3)
        ref = lambda: np.pad(x, ((0, 0), (0, 0), (pad[2], pad[3]), (pad[0], pad[1])), mode=mode)  # noqa: E731
        np.testing.assert_array_equal(F.pad2d(tensor(x), pad, mode).data, ref())
        proj = rng.standard_normal(ref().shape)
        xt = tensor(x.copy(), True)
        (F.pad2d(xt, pad, mode) * proj).sum().backward()
        assert rel_err(xt.grad, numeric_grad(lambda: float((ref() * proj).sum()), x)) < 1e-6


class TestDropout:
    def test_zero_rate_identity(self, rng):
        x = tensor(rng.standard_normal((2, 3)))
        assert F.dropout(x, 0.0, rng, True) is x

    def test_eval_identity(self, rng):
        x = tensor(rng.standard_normal((2, 3)))
        assert F.dropout(x, 0.5, rng, False) is x

    def test_inverted_scaling(self):
        x = tensor(np.ones((200, 200)))
        out = F.dropout(x, 0.25, np.random.default_rng(0), True).data
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1 / 0.75, rtol=1e-6)
        assert abs((out != 0).mean() - 0.75) < 0.01
