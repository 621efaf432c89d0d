import numpy as np
import pytest

from faith import tensor as T
from faith.data import gen_planted_motif


def numeric_grad(f, x, step=1e-6):
    """Central differences of the scalar f() with respect to array x, in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_op_grads(build, inputs, seed=0):
    """Compare tape gradients of sum(R * build(*inputs)) with central differences.

    Returns the maximum elementwise relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    leaves = [T.parameter(x) for x in inputs]
    with T.Tape() as tape:
        out = build(*leaves)
    weights = rng.uniform(-1, 1, size=out.shape)
    with tape:
        loss = T.sum(T.mul(out, T.Value(weights)))
    T.backward(loss, tape)

    def f():
        return float(np.sum(build(*leaves).data * weights))

    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(f, leaf.data)
        worst = max(worst, float(rel_err(leaf.grad, num).max()))
    return worst


@pytest.fixture(scope="session")
def motif_dataset():
    return gen_planted_motif(6, 30, seed=3)
