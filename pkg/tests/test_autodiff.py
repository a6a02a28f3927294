import numpy as np
import pytest

from torusvae.autodiff import Tensor, concat
from conftest import finite_diff_grads, max_relative_error


def check_scalar_graph(build, arrays, tol=1e-6):
    """build(tensors) -> scalar Tensor; compare backward grads to finite differences."""
    tensors = [Tensor(a) for a in arrays]
    out = build(tensors)
    out.backward()
    analytic = [t.grad.copy() for t in tensors]

    def value():
        fresh = [Tensor(a) for a in arrays]
        return float(build(fresh).data)

    numeric = finite_diff_grads(value, arrays)
    for a, n in zip(analytic, numeric):
        assert max_relative_error(a, n) < tol


def test_add_broadcast(rng):
    arrays = [rng.standard_normal((4, 3)), rng.standard_normal(3)]
    check_scalar_graph(lambda t: (t[0] + t[1]).square().sum(), arrays)


def test_mul_broadcast_3d(rng):
    arrays = [rng.standard_normal((2, 4, 1)), rng.standard_normal((2, 1, 3))]
    check_scalar_graph(lambda t: (t[0] * t[1]).sum(), arrays)


def test_matmul(rng):
    arrays = [rng.standard_normal((5, 4)), rng.standard_normal((4, 3))]
    check_scalar_graph(lambda t: t[0].matmul(t[1]).square().sum(), arrays)


def test_div_and_sqrt(rng):
    arrays = [rng.uniform(0.5, 2.0, size=(3, 3)), rng.uniform(0.5, 2.0, size=(3, 3))]
    check_scalar_graph(lambda t: (t[0] / t[1].sqrt()).sum(), arrays)


def test_exp_tanh_relu(rng):
    arrays = [rng.uniform(-1.2, 1.2, size=(4, 4)) + 0.05]
    check_scalar_graph(lambda t: (t[0].exp().tanh() + t[0].relu()).sum(), arrays)


def test_sum_axis_keepdims(rng):
    arrays = [rng.standard_normal((3, 5))]
    check_scalar_graph(
        lambda t: (t[0].sum(axis=1, keepdims=True) * t[0]).sum(), arrays
    )


def test_getitem_and_reshape(rng):
    arrays = [rng.standard_normal((4, 6))]
    check_scalar_graph(
        lambda t: (t[0][:, 1:4].reshape(2, 6) * 2.0).square().sum(), arrays
    )


def test_concat(rng):
    arrays = [rng.standard_normal((3, 2)), rng.standard_normal((3, 4))]
    check_scalar_graph(lambda t: concat(t, axis=1).square().sum(), arrays)


def test_normalization_chain(rng):
    # the per-circle normalization pattern used by the engine
    arrays = [rng.uniform(0.3, 1.5, size=(4, 3, 2))]

    def build(t):
        norm = t[0].square().sum(axis=2, keepdims=True).sqrt()
        return (t[0] / norm).sum()

    check_scalar_graph(build, arrays)


def test_value_reuse_accumulates(rng):
    x = Tensor(rng.standard_normal(4))
    y = (x * x + x).sum()
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        Tensor(rng.standard_normal(3)).backward()
