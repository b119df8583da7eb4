import numpy as np
import pytest

from sparsereg.core import tensor as T
from sparsereg.core.algorithms import expectile_loss, mse
from sparsereg.core.exceptions import DimensionError, UsageError
from sparsereg.core.nn import OutputTransform, build_mlp
from sparsereg.core.tensor import Tensor


def numeric_grad(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of `param`."""
    grad = np.zeros_like(param.data)
    with T.no_grad():
        for idx in np.ndindex(param.data.shape):
            original = param.data[idx]
            param.data[idx] = original + h
            plus = loss_fn().item()
            param.data[idx] = original - h
            minus = loss_fn().item()
            param.data[idx] = original
            grad[idx] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(loss_fn, params) -> list[np.ndarray]:
    T.zero_grad(params)
    loss_fn().backward()
    return [p.grad.copy() for p in params]


def check_gradients(loss_fn, params, rtol=1e-4, atol=1e-7):
    for p, g in zip(params, analytic_grads(loss_fn, params)):
        np.testing.assert_allclose(g, numeric_grad(loss_fn, p), rtol=rtol, atol=atol)


class TestElementaryOps:
    def test_broadcast_add_accumulates_over_batch(self):
        a = Tensor.parameter(np.ones((3, 2)))
        b = Tensor.parameter(np.array([0.5, -0.5]))
        T.tensor_sum(T.add(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.ones((3, 2)))
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_matmul_gradients(self, rng):
        a = Tensor.parameter(rng.normal(size=(4, 3)))
        b = Tensor.parameter(rng.normal(size=(3, 2)))
        check_gradients(lambda: T.tensor_sum(T.square(T.matmul(a, b))), [a, b])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_abs_subgradient_at_zero_is_zero(self):
        a = Tensor.parameter(np.array([-2.0, 0.0, 3.0]))
        T.tensor_sum(T.absolute(a)).backward()
        np.testing.assert_array_equal(a.grad, [-1.0, 0.0, 1.0])

    def test_minimum_ties_route_to_first_argument(self):
        a = Tensor.parameter(np.array([1.0, 2.0, 5.0]))
        b = Tensor.parameter(np.array([1.0, 3.0, 4.0]))
        T.tensor_sum(T.minimum(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 1.0, 0.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0, 1.0])

    def test_mean_over_axis(self, rng):
        a = Tensor.parameter(rng.normal(size=(5, 3)))
        out = T.mean(a, axis=1)
        assert out.shape == [5]
        check_gradients(lambda: T.tensor_sum(T.square(T.mean(a, axis=1))), [a])

    def test_concat_splits_gradient(self, rng):
        a = Tensor.parameter(rng.normal(size=(4, 2)))
        b = Tensor.parameter(rng.normal(size=(4, 1)))
        weights = np.arange(12.0).reshape(4, 3)
        T.tensor_sum(T.mul(T.concat([a, b], axis=1), weights)).backward()
        np.testing.assert_array_equal(a.grad, weights[:, :2])
        np.testing.assert_array_equal(b.grad, weights[:, 2:])

    def test_clip_blocks_gradient_outside(self):
        a = Tensor.parameter(np.array([-2.0, 0.5, 2.0]))
        T.tensor_sum(T.clip(a, -1.0, 1.0)).backward()
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])

    def test_layer_norm_gradient(self, rng):
        a = Tensor.parameter(rng.normal(size=(3, 5)))
        weights = rng.normal(size=(3, 5))
        check_gradients(lambda: T.tensor_sum(T.mul(T.layer_norm(a), weights)), [a])

    def test_spectral_scaled_gradient(self, rng):
        w = Tensor.parameter(rng.normal(size=(4, 6)))
        u = rng.normal(size=4)
        u /= np.linalg.norm(u)
        v = w.data.T @ u
        v /= np.linalg.norm(v)
        weights = rng.normal(size=(4, 6))
        check_gradients(lambda: T.tensor_sum(T.mul(T.spectral_scaled(w, u, v), weights)), [w])

    def test_tanh_and_exp(self, rng):
        a = Tensor.parameter(rng.normal(size=(2, 3)))
        check_gradients(lambda: T.tensor_sum(T.exp(T.tanh(a))), [a])

    def test_shared_node_gradients_add_up(self):
        a = Tensor.parameter(np.array([3.0]))
        b = T.mul(a, 2.0)
        T.tensor_sum(T.add(b, b)).backward()
        np.testing.assert_array_equal(a.grad, [4.0])


class TestGraphRules:
    def test_backward_needs_a_scalar(self):
        a = Tensor.parameter(np.ones(3))
        with pytest.raises(UsageError):
            T.mul(a, 2.0).backward()

    def test_backward_on_constant_is_refused(self):
        with pytest.raises(UsageError):
            Tensor(np.ones(1)).backward()

    def test_no_grad_builds_no_graph(self):
        a = Tensor.parameter(np.ones(2))
        with T.no_grad():
            out = T.tensor_sum(T.square(a))
        assert not out.requires_grad
        assert T.is_recording()

    def test_constants_never_require_grad(self):
        out = T.add(Tensor(np.ones(2)), np.ones(2))
        assert not out.requires_grad

    def test_division_by_tensor_is_refused(self):
        with pytest.raises(UsageError):
            Tensor.parameter(np.ones(2)) / Tensor(np.ones(2))


class TestGradientOracle:
    """Autodiff against central differences for the three training objectives."""

    @staticmethod
    def _net(seed, sizes, bounded=False):
        rng = np.random.default_rng(seed)
        transform = OutputTransform("tanh_bounded", 2.0) if bounded else None
        net = build_mlp(sizes, rng, activation="tanh", output_transform=transform)
        # non-zero biases so their gradients are exercised too
        for p in net.parameters():
            p.data[...] = p.data + rng.normal(scale=0.1, size=p.data.shape)
        return net, rng

    @pytest.mark.parametrize("seed", range(20))
    def test_behavior_cloning_loss(self, seed):
        net, rng = self._net(seed, [3, 6, 5, 2], bounded=True)
        s = rng.normal(size=(8, 3))
        a = rng.uniform(-2, 2, size=(8, 2))
        check_gradients(lambda: mse(net(s), a), net.parameters())

    @pytest.mark.parametrize("seed", range(20))
    def test_critic_td_loss(self, seed):
        net, rng = self._net(100 + seed, [4, 6, 5, 1])
        s = rng.normal(size=(8, 3))
        a = rng.uniform(-1, 1, size=(8, 1))
        target = rng.normal(size=(8, 1))
        check_gradients(lambda: mse(net(T.concat([Tensor(s), Tensor(a)], axis=1)), target), net.parameters())

    @pytest.mark.parametrize("seed", range(20))
    def test_value_expectile_loss(self, seed):
        net, rng = self._net(200 + seed, [3, 6, 5, 1])
        s = rng.normal(size=(8, 3))
        target_q = rng.normal(size=(8, 1))
        check_gradients(lambda: expectile_loss(T.sub(target_q, net(s)), 0.7), net.parameters())
