import numpy as np
import pytest

from cellbridge.errors import NumericError
from cellbridge.nn import autodiff as ad
from cellbridge.nn.gradcheck import grad_check


def fd_grad(loss_fn, param, step=1e-6):
    """Independent central-difference gradient for one tensor."""
    g = np.zeros_like(param.data)
    for i in range(param.data.size):
        orig = param.data.flat[i]
        param.data.flat[i] = orig + step
        hi = loss_fn().item()
        param.data.flat[i] = orig - step
        lo = loss_fn().item()
        param.data.flat[i] = orig
        g.flat[i] = (hi - lo) / (2 * step)
    return g


def test_sum_of_squares_gradient_is_two_x():
    p = ad.param(np.array([1.0, -2.0, 3.0]))
    loss = ad.sumt(ad.mul(p, p))
    ad.backward(loss)
    np.testing.assert_allclose(p.grad, 2 * p.data, rtol=0, atol=1e-15)


def test_relu_subgradient_zero_below_and_at_zero():
    p = ad.param(np.array([-1.0, 0.0, 2.0]))
    loss = ad.sumt(ad.relu(p))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [0.0, 0.0, 1.0])


def test_unused_parameter_gets_zero_gradient():
    used = ad.param(np.ones(3))
    unused = ad.param(np.ones(4))
    loss = ad.sumt(ad.mul(used, used))
    ad.backward(loss)
    assert unused.grad is None
    g_used, g_unused = ad.grads_of([used, unused])
    np.testing.assert_array_equal(g_unused, np.zeros(4))
    np.testing.assert_array_equal(g_used, 2 * np.ones(3))


def test_backward_requires_finite_scalar():
    p = ad.param(np.array([1.0]))
    bad = ad.mul(p, np.array([np.inf]))
    with pytest.raises(NumericError):
        ad.backward(bad)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(p, np.ones(2)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_finite_checks_name_the_op():
    with ad.finite_checks():
        with pytest.raises(NumericError, match="exp"):
            ad.exp(ad.as_tensor(np.array([1e9])))


def test_broadcast_gradients_reduce_correctly():
    rng = np.random.default_rng(0)
    a = ad.param(rng.normal(size=(4, 1, 3)))
    b = ad.param(rng.normal(size=(5, 3)))

    def loss_fn():
        return ad.sumt(ad.mul(ad.add(a, b), ad.add(a, b)))

    assert grad_check(loss_fn, [a, b], n_coords=27, rng=rng) < 1e-7


def test_matmul_batched_gradients():
    rng = np.random.default_rng(1)
    a = ad.param(rng.normal(size=(3, 4, 5)))
    w = ad.param(rng.normal(size=(5, 2)))

    def loss_fn():
        out = ad.matmul(a, w)  # [3, 4, 2] with w broadcast over the stack
        return ad.sumt(ad.mul(out, out))

    assert grad_check(loss_fn, [a, w], n_coords=50, rng=rng) < 1e-7


@pytest.mark.parametrize("op", [ad.exp, ad.sigmoid, ad.silu,
                                lambda t: ad.leaky_relu(t, 0.2), ad.relu,
                                lambda t: ad.clip(t, -0.8, 0.9)])
def test_elementwise_ops_match_finite_differences(op):
    rng = np.random.default_rng(2)
    p = ad.param(rng.normal(size=7))

    def loss_fn():
        return ad.sumt(ad.mul(op(p), op(p)))

    ad.zero_grad([p])
    loss = loss_fn()
    ad.backward(loss)
    analytic = p.grad.copy()
    numeric = fd_grad(loss_fn, p)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_log_rejects_nonpositive():
    with pytest.raises(NumericError):
        ad.log(ad.as_tensor(np.array([0.0, 1.0])))


def test_gather_rows_scatter_adds():
    table = ad.param(np.arange(12, dtype=float).reshape(4, 3))
    out = ad.gather_rows(table, np.array([1, 1, 3]))
    ad.backward(ad.sumt(out))
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_concat_and_slice_roundtrip_gradient():
    a = ad.param(np.ones((2, 3)))
    b = ad.param(np.ones((2, 2)))
    joined = ad.concat([a, b], axis=-1)
    back = ad.slice0(ad.swapaxes(joined, 0, 1), 0, 3)  # rows of a, transposed
    ad.backward(ad.sumt(back))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.zeros((2, 2)))  # reached but unused


def test_masked_softmax_rows_sum_to_one_and_rejects_empty():
    rng = np.random.default_rng(3)
    mask = np.eye(5, dtype=bool)
    mask[0, 3] = True
    y = ad.masked_softmax(ad.as_tensor(rng.normal(size=(5, 5))), mask)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y.data[~mask] == 0.0)
    with pytest.raises(ValueError):
        ad.masked_softmax(ad.as_tensor(np.zeros((2, 2))), np.zeros((2, 2), dtype=bool))


def test_masked_softmax_gradient():
    rng = np.random.default_rng(4)
    mask = np.ones((4, 4), dtype=bool)
    mask[2, 0] = mask[0, 2] = False
    p = ad.param(rng.normal(size=(4, 4)))
    coeff = rng.normal(size=(4, 4))

    def loss_fn():
        return ad.sumt(ad.mul(ad.masked_softmax(p, mask), coeff))

    ad.zero_grad([p])
    ad.backward(loss_fn())
    analytic = p.grad.copy()
    np.testing.assert_allclose(analytic, fd_grad(loss_fn, p), rtol=1e-6, atol=1e-9)


def test_no_grad_skips_graph_construction():
    p = ad.param(np.ones(3))
    with ad.no_grad():
        out = ad.mul(p, p)
    assert not out.requires_grad and out._backward is None
