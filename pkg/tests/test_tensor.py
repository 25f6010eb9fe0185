import zlib

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from litevae import tensor as T
from litevae.tensor import DimensionError, Tensor, backward, grad, no_grad, precision, tensor


class TestBasics:
    def test_default_precision_is_f32(self):
        assert tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with precision("f64"):
            assert tensor([1.0]).dtype == np.float64
        assert tensor([1.0]).dtype == np.float32

    def test_bad_precision_rejected(self):
        with pytest.raises(ValueError):
            T.set_default_dtype("f16")

    def test_shape_and_size(self):
        t = tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4) and t.size == 24 and t.ndim == 3

    def test_silu_zero(self):
        assert tensor([0.0]).silu().item() == 0.0

    def test_concat_shapes(self):
        a, b = tensor(np.ones((1, 3, 2, 2))), tensor(np.zeros((1, 3, 2, 2)))
        assert T.concat([a, b], axis=1).shape == (1, 6, 2, 2)

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([tensor(np.ones((1, 3, 2, 2))), tensor(np.ones((1, 3, 3, 2)))], axis=1)

    def test_chunk_round_trip(self):
        x = tensor(np.arange(24.0).reshape(2, 6, 2))
        parts = T.chunk(x, 3, axis=1)
        assert [p.shape for p in parts] == [(2, 2, 2)] * 3
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)

    def test_chunk_indivisible(self):
        with pytest.raises(DimensionError):
            T.chunk(tensor(np.ones((2, 5))), 2, axis=1)


class TestBackward:
    def test_square_sum(self, f64):
        x = tensor([1.0, -2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_untracked_constant(self, f64):
        x = tensor([1.0, 2.0], requires_grad=True)
        c = tensor([3.0, 4.0])
        loss = c.sum() + (x * 0.0).sum()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])
        assert c.grad is None

    def test_fan_out_accumulates(self, f64):
        x = tensor([2.0], requires_grad=True)
        (x * x + x * 3.0 + x).sum().backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0 + 1.0)

    def test_non_scalar_loss_rejected(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_graph_freed(self, f64):
        x = tensor([1.0], requires_grad=True)
        y = (x * x).sum()
        y.backward()
        assert y._parents == ()

    def test_retain_graph_allows_second_pass(self, f64):
        x = tensor([3.0], requires_grad=True)
        y = (x * x).sum()
        y.backward(retain_graph=True)
        y.backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_grad_does_not_touch_leaf(self, f64):
        x = tensor([1.0, 2.0], requires_grad=True)
        (g,) = grad((x * x).sum(), [x])
        np.testing.assert_array_equal(g, [2.0, 4.0])
        assert x.grad is None

    def test_grad_unreached_input_is_zero(self, f64):
        x = tensor([1.0], requires_grad=True)
        y = tensor([5.0], requires_grad=True)
        gx, gy = grad((x * 2.0).sum(), [x, y])
        assert gx[0] == 2.0 and gy[0] == 0.0

    def test_no_grad_builds_no_graph(self):
        x = tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_linearity(self, f64, rng):
        x = tensor(rng.standard_normal(5), requires_grad=True)
        (ga,) = grad((x * x).sum(), [x])
        (gb,) = grad(x.exp().sum(), [x])
        (gc,) = grad((x * x).sum() * 2.0 - x.exp().sum() * 3.0, [x])
        np.testing.assert_allclose(gc, 2.0 * ga - 3.0 * gb, rtol=1e-12)

    def test_deep_chain_no_recursion_limit(self, f64):
        x = tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),
    "sqrt": lambda t: (t * t + 0.1).sqrt(),
    "abs": lambda t: t.abs(),
    "relu": lambda t: t.relu(),
    "sigmoid": lambda t: t.sigmoid(),
    "silu": lambda t: t.silu(),
    "softplus": lambda t: t.softplus(),
    "tanh": lambda t: T.tanh(t),
    "clamp": lambda t: t.clamp(-0.5, 0.7),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "leaky_relu": lambda t: T.leaky_relu(t, 0.2),
    "mean_axis": lambda t: t.mean(axis=1, keepdims=True),
    "sum_axis": lambda t: t.sum(axis=0),
    "transpose": lambda t: t.transpose(1, 0),
    "reshape": lambda t: t.reshape(12),
    "getitem_basic": lambda t: t[1:, ::2],
    "getitem_fancy": lambda t: t[np.array([0, 2, 2])],
    "softmax": lambda t: T.softmax(t, axis=1),
    "div": lambda t: t / (t * t + 1.0),
    "rdiv": lambda t: 1.0 / (t * t + 1.0),
    "rsub": lambda t: 2.0 - t,
    "neg": lambda t: -t,
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_ops(self, name, f64):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-2] += 0.1  # stay away from kinks
        xt = tensor(x.copy(), requires_grad=True)
        fn = UNARY[name]
        proj = rng.standard_normal(fn(tensor(x)).shape)
        (fn(xt) * proj).sum().backward()
        num = numeric_grad(lambda: float((fn(tensor(x)).data * proj).sum()), x)
        assert rel_err(xt.grad, num) < 1e-6

    @pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (3, 4)), ((3, 4), (4,)), ((3, 1), (1, 4)), ((2, 3, 4), ())])
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_binary(self, op, shape_a, shape_b, f64, rng):
        a = rng.standard_normal(shape_a)
        b = np.array(rng.standard_normal(shape_b) + 3.0)
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[op]
        at, bt = tensor(a.copy(), True), tensor(b.copy(), True)
        proj = rng.standard_normal(np.broadcast_shapes(shape_a, shape_b))
        (fn(at, bt) * proj).sum().backward()
        f = lambda: float((fn(tensor(a), tensor(b)).data * proj).sum())  # noqa: E731
        assert at.grad.shape == a.shape and bt.grad.shape == b.shape
        assert rel_err(at.grad, numeric_grad(f, a)) < 1e-6
        assert rel_err(bt.grad, numeric_grad(f, b)) < 1e-6

    def test_matmul(self, f64, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
        at, bt = tensor(a.copy(), True), tensor(b.copy(), True)
        (at @ bt).sum().backward()
        f = lambda: float((a @ b).sum())  # noqa: E731
        assert rel_err(at.grad, numeric_grad(f, a)) < 1e-6
        assert rel_err(bt.grad, numeric_grad(f, b)) < 1e-6

    def test_concat_and_stack(self, f64, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        at, bt = tensor(a.copy(), True), tensor(b.copy(), True)
        proj = rng.standard_normal((2, 2, 5))
        out = T.stack([T.concat([at, bt], axis=1), T.concat([bt, at], axis=1)], axis=1)
        (out * proj).sum().backward()

        def f():
            c1 = np.concatenate([a, b], 1)
            c2 = np.concatenate([b, a], 1)
            return float((np.stack([c1, c2], 1) * proj).sum())
        assert rel_err(at.grad, numeric_grad(f, a)) < 1e-6
        assert rel_err(bt.grad, numeric_grad(f, b)) < 1e-6


class TestFlops:
    def test_elementwise_counted_once(self):
        with T.flop_counter() as c:
            tensor(np.ones((4, 5))) * 2.0
        assert c[0] == 20

    def test_matmul_counts_two_per_mac(self):
        with T.flop_counter() as c:
            tensor(np.ones((3, 4))) @ tensor(np.ones((4, 5)))
        assert c[0] == 2 * 3 * 4 * 5

    def test_nested_counter_restores(self):
        with T.flop_counter() as outer:
            with T.flop_counter() as inner:
                tensor(np.ones(3)) * 1.0
            tensor(np.ones(2)) * 1.0
        assert inner[0] == 3 and outer[0] == 2


class TestDeterminism:
    def test_bit_identical_repeat(self, rng):
        x = rng.standard_normal((4, 8)).astype(np.float32)
        outs = []
        for _ in range(2):
            t = tensor(x, requires_grad=True)
            (t.silu() * t).sum().backward()
            outs.append(t.grad.copy())
        assert np.array_equal(outs[0], outs[1])


def test_tensor_repr():
    assert "requires_grad=True" in repr(Tensor(np.ones(2), requires_grad=True))
