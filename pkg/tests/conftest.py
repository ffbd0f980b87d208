import numpy as np
import pytest

from tedmil.core import Tape, _emit, backward, sum_all


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op_grads(op, inputs, h=1e-5, seed=0):
    """Analytic vs numeric gradients of ``sum(op(*inputs) * R)`` for a fixed random R.

    Returns the max relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=op(*inputs).shape)

    def scalar():
        return float(np.sum(op(*inputs).value * weights))

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = op(*inputs)
        loss = sum_all(_weighted(out, weights))
    backward(tape, loss)
    worst = 0.0
    for t in inputs:
        num = numerical_grad(scalar, t.value, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def _weighted(out, weights):
    return _emit("weight", (out,), out.value * weights, lambda g: (g * weights,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
