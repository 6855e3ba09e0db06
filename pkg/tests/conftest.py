import numpy as np
import pytest

from cpcl import tensor as T
from cpcl.tensor import Tensor


def numeric_grad(fn, arrays, index, weights, eps=1e-3):
    """Central differences of sum(fn(*arrays) * weights) w.r.t. arrays[index], in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    g = grad.reshape(-1)

    def f():
        with T.no_grad():
            out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
        return float((out.data * weights).sum())

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


def analytic_grads(fn, arrays, weights):
    ts = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=True) for a in arrays]
    out = fn(*ts)
    loss = T.tsum(T.mul(out, weights.astype(np.float32)))
    T.backward(loss)
    return [t.grad if t.grad is not None else np.zeros(t.shape, np.float32) for t in ts]


def gradcheck(fn, arrays, seed=0, eps=1e-3):
    """Max relative error (norm-wise) between analytic f32 and finite-difference f64 gradients."""
    with T.no_grad():
        shape = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).shape
    weights = np.random.default_rng(seed).normal(size=shape)
    analytic = analytic_grads(fn, arrays, weights)
    errs = []
    for i in range(len(arrays)):
        num = numeric_grad(fn, arrays, i, weights, eps)
        ga = analytic[i].astype(np.float64)
        denom = max(np.linalg.norm(ga), np.linalg.norm(num), 1e-12)
        errs.append(np.linalg.norm(ga - num) / denom)
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
