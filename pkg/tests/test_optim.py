import numpy as np
import pytest

from cellbridge.errors import NumericError
from cellbridge.nn import autodiff as ad
from cellbridge.nn.optim import Adam, adam_step, init_adam


def test_zero_gradient_leaves_params_unchanged():
    p = ad.param(np.array([1.0, -2.0]))
    state = init_adam([p], lr=0.1)
    before = p.data.copy()
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step_count == 5


def test_constant_gradient_step_approaches_lr():
    # closed-form fixed point: with constant g, m_hat=g and v_hat=g^2, so the
    # update magnitude is lr * |g| / (|g| + eps) ~= lr
    p = ad.param(np.array([0.0]))
    lr = 0.01
    state = init_adam([p], lr=lr)
    g = np.array([3.0])
    prev = p.data.copy()
    for _ in range(50):
        prev = p.data.copy()
        adam_step([p], [g], state)
    step = prev - p.data
    expected = lr * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(step, expected, rtol=1e-6)


def test_step_count_increments_by_one():
    p = ad.param(np.zeros(3))
    state = init_adam([p])
    assert state.step_count == 0
    adam_step([p], [np.ones(3)], state)
    assert state.step_count == 1
    adam_step([p], [np.ones(3)], state)
    assert state.step_count == 2


def test_nonfinite_gradient_raises():
    p = ad.param(np.zeros(2))
    state = init_adam([p])
    with pytest.raises(NumericError):
        adam_step([p], [np.array([np.nan, 0.0])], state)


def test_shape_mismatch_raises():
    p = ad.param(np.zeros(2))
    state = init_adam([p])
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], state)


def test_adam_wrapper_reads_tensor_grads():
    rng = np.random.default_rng(0)
    p = ad.param(rng.normal(size=4))
    opt = Adam([p], lr=0.05)
    target = np.array([1.0, 2.0, 3.0, 4.0])
    for _ in range(400):
        opt.zero_grad()
        diff = ad.sub(p, target)
        ad.backward(ad.sumt(ad.mul(diff, diff)))
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)
