"""Independent oracles shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import contextlib

import numpy as np

from mpsupernet import quantize, tensor

STEP = 1e-3


@contextlib.contextmanager
def float64_engine():
    """Run the tensor engine in float64 so central differences with a 1e-3
    step are not swamped by float32 rounding."""
    saved = tensor.DTYPE, quantize.DTYPE
    tensor.DTYPE = quantize.DTYPE = np.float64
    try:
        yield
    finally:
        tensor.DTYPE, quantize.DTYPE = saved


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), 1e-12))


def check_op(op, inputs, rng, h: float = STEP) -> float:
    """Max relative error over ``inputs`` of the gradient of
    ``sum(op(*inputs) * R)`` against central differences."""
    from mpsupernet.tensor import Tensor

    out = op(*[Tensor(x) for x in inputs])
    proj = rng.normal(size=out.shape)
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    (op(*ts) * Tensor(proj)).sum().backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = [Tensor(xk if j == k else inputs[j]) for j in range(len(inputs))]
            return float((op(*args).data * proj).sum())
        g = ts[k].grad if ts[k].grad is not None else np.zeros_like(x)
        worst = max(worst, rel_err(g, numeric_grad(f, x, h)))
    return worst


def brute_force_macs(trace) -> int:
    """Multiplications in each traced matmul, counted by contracting ones."""
    total = 0
    for _, a_shape, b_shape in trace:
        total += int((np.ones(a_shape, np.int64) @ np.ones(b_shape, np.int64)).sum())
    return total
