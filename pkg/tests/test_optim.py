import numpy as np
import pytest

from sparsereg.core import tensor as T
from sparsereg.core.exceptions import DimensionError
from sparsereg.core.optim import Optimizer, OptimizerState, adam_step
from sparsereg.core.sparse_reg import Mask
from sparsereg.core.tensor import Tensor


def test_first_adam_step_moves_by_lr_times_sign():
    p = Tensor.parameter(np.array([1.0, -2.0]))
    p.grad[...] = [0.5, -0.1]
    state = OptimizerState.for_params([p], lr=0.01)
    adam_step(state, [p])
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-6)
    assert state.step_count == 1


def test_masked_entries_are_written_as_positive_zero():
    p = Tensor.parameter(np.array([-3.0, 2.0]))
    p.grad[...] = [1.0, 1.0]
    state = OptimizerState.for_params([p], kind="adamw")
    adam_step(state, [p], [Mask.from_bits(np.array([False, True]))])
    assert p.data[0] == 0.0 and not np.signbit(p.data[0])
    assert p.data[1] != 2.0
    # masked gradient never reaches the moments
    assert state.first_moment[0][0] == 0.0


def test_adamw_decays_without_gradient():
    p = Tensor.parameter(np.array([4.0, -1.0]))
    state = OptimizerState.for_params([p], kind="adamw", lr=0.1, weight_decay=0.01)
    adam_step(state, [p])
    np.testing.assert_allclose(p.data, np.array([4.0, -1.0]) * (1 - 0.1 * 0.01))


def test_plain_adam_has_no_decay():
    p = Tensor.parameter(np.array([4.0, -1.0]))
    state = OptimizerState.for_params([p], kind="adam", lr=0.1)
    adam_step(state, [p])
    np.testing.assert_array_equal(p.data, [4.0, -1.0])


def test_adam_minimises_a_quadratic():
    p = Tensor.parameter(np.zeros(1))
    opt = Optimizer([p], lr=0.01)
    for _ in range(2000):
        opt.zero_grad()
        T.tensor_sum(T.square(T.sub(p, 3.0))).backward()
        opt.step()
    assert p.data[0] == pytest.approx(3.0, abs=0.05)


def test_mismatched_masks_and_moments():
    p = Tensor.parameter(np.ones((2, 2)))
    state = OptimizerState.for_params([p])
    with pytest.raises(DimensionError):
        adam_step(state, [p, p])
    with pytest.raises(DimensionError):
        adam_step(state, [p], [Mask.from_bits(np.ones(3, dtype=bool))])
    with pytest.raises(DimensionError):
        adam_step(state, [p], [])


def test_none_mask_entries_leave_tensor_unmasked():
    a = Tensor.parameter(np.array([1.0]))
    b = Tensor.parameter(np.array([1.0]))
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    state = OptimizerState.for_params([a, b], lr=0.5)
    adam_step(state, [a, b], [None, Mask.from_bits(np.array([False]))])
    assert a.data[0] == pytest.approx(0.5)
    assert b.data[0] == 0.0


def test_single_step_recurrence_by_hand():
    p = Tensor.parameter(np.array([1.0]))
    p.grad[...] = 1.0
    state = OptimizerState.for_params([p])
    adam_step(state, [p])
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p.data[0] == pytest.approx(1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)


def test_zero_gradient_leaves_adam_params_alone():
    p = Tensor.parameter(np.array([0.3, -0.7]))
    state = OptimizerState.for_params([p])
    adam_step(state, [p])
    np.testing.assert_array_equal(p.data, [0.3, -0.7])
    assert state.step_count == 1


def test_revived_entries_start_from_zero_moments():
    p = Tensor.parameter(np.array([1.0, 1.0]))
    state = OptimizerState.for_params([p], lr=0.01)
    for _ in range(3):
        p.grad[...] = [1.0, 2.0]
        adam_step(state, [p])
    p.grad[...] = [1.0, 2.0]
    adam_step(state, [p], [Mask.from_bits(np.array([True, False]))])
    assert state.first_moment[0][1] == 0.0
    assert state.second_moment[0][1] == 0.0
    assert state.first_moment[0][0] > 0.0

    p.grad[...] = [1.0, 2.0]
    adam_step(state, [p], [Mask.from_bits(np.array([True, True]))])
    assert state.first_moment[0][1] == pytest.approx((1.0 - state.beta1) * 2.0)
    assert state.second_moment[0][1] == pytest.approx((1.0 - state.beta2) * 4.0)
