import numpy as np
import pytest

from ffpdet import tensor as T
from ffpdet.gradcheck import check_gradients, numerical_grad
from ffpdet.tensor import Tensor


def leaf(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True, dtype=np.float64)


def test_add_mul_broadcast_grads(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    (a * b + a).sum().backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data + 1, (3, 4)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_grad_accumulates_over_reuse(rng):
    x = leaf(rng, 5)
    (x * x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 3 * x.data ** 2)


@pytest.mark.parametrize("op", ["exp", "log", "div", "power", "mean", "transpose", "stack", "concat"])
def test_ops_match_finite_differences(rng, op):
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
    fns = {
        "exp": lambda: a.exp().sum(),
        "log": lambda: (a.log() * b).sum(),
        "div": lambda: (a / b).sum(),
        "power": lambda: (a ** 3).sum(),
        "mean": lambda: (a.mean(axis=1) * b.mean(axis=1)).sum(),
        "transpose": lambda: (a.transpose(1, 0) * b.transpose(1, 0)).sum(),
        "stack": lambda: (T.stack([a, b], axis=0) ** 2).sum(),
        "concat": lambda: (T.concatenate([a, b], axis=1) ** 2).sum(),
    }
    report = check_gradients(fns[op], {"a": a, "b": b})
    assert all(r["passed"] for r in report), report


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with T.no_grad():
        y = (x * 2).sum()
    assert T.is_grad_enabled()
    assert not y.requires_grad


def test_detach_stops_gradient(rng):
    x = leaf(rng, 3)
    (x.detach() * x).sum().backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_numerical_grad_of_quadratic():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    g = numerical_grad(lambda: (x * x).sum(), x)
    np.testing.assert_allclose(g, 2 * x.data, rtol=1e-6)
