import numpy as np
import pytest

from mpsupernet import tensor as T
from mpsupernet.tensor import Tensor, ShapeError

from oracles import check_op, float64_engine, rel_err

CASES = 100
TOL = 1e-3


def _ce(labels):
    return lambda z: T.cross_entropy(z, labels)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


# name -> (op factory(rng), input factory(rng))
PRIMITIVES = {
    "add_broadcast": (lambda r: T.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda r: T.sub, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul_broadcast": (lambda r: T.mul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]),
    "neg": (lambda r: T.neg, lambda r: [r.normal(size=(5,))]),
    "relu": (lambda r: T.relu, lambda r: [_away_from_zero(r, (4, 3))]),
    "gelu": (lambda r: T.gelu, lambda r: [r.normal(size=(4, 3)) * 2]),
    "sum": (lambda r: T.tsum, lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda r: T.tmean, lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda r: T.softmax, lambda r: [r.normal(size=(2, 5)) * 2]),
    "layernorm": (lambda r: T.layernorm,
                  lambda r: [r.normal(size=(2, 3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "matmul": (lambda r: T.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matmul_batched": (lambda r: T.matmul,
                       lambda r: [r.normal(size=(2, 2, 3, 4)), r.normal(size=(2, 2, 4, 3))]),
    "matmul_broadcast_rhs": (lambda r: T.matmul,
                             lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "reshape": (lambda r: (lambda x: x.reshape(6, 2)), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda r: (lambda x: T.transpose(x, (2, 0, 1))), lambda r: [r.normal(size=(2, 3, 4))]),
    "getitem": (lambda r: (lambda x: x[:, 1:3]), lambda r: [r.normal(size=(3, 4))]),
    "patchify": (lambda r: (lambda x: T.patchify(x, 2)), lambda r: [r.normal(size=(1, 4, 4, 2))]),
    "bilinear_resize": (lambda r: (lambda x: T.bilinear_resize(x, 5, 3)),
                        lambda r: [r.normal(size=(1, 3, 4, 2))]),
    "cross_entropy": (lambda r: _ce(r.integers(0, 4, size=(2, 3))), lambda r: [r.normal(size=(2, 3, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    make_op, make_inputs = PRIMITIVES[name]
    worst = 0.0
    with float64_engine():
        for seed in range(CASES):
            rng = np.random.default_rng(seed)
            worst = max(worst, check_op(make_op(rng), make_inputs(rng), rng))
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"


def test_shared_node_gradient_accumulates():
    # y = x*x + x uses x along three paths
    x = Tensor([1.5, -2.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * np.array([1.5, -2.0]) + 1)


def test_backward_visits_each_node_once():
    calls = []
    x = Tensor(np.ones(3), requires_grad=True)

    def bw(g):
        calls.append(1)
        return (g,)

    y = T.make(x.data * 1, (x,), bw)
    (y + y).sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))


def test_deep_chain_order():
    # reverse creation order is a valid topological order for any graph built
    # forward, including one whose branches were created out of order
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    a = x * 2.0
    b = T.gelu(x)
    c = a * b + T.softmax(a)
    c.sum().backward()
    g1 = x.grad.copy()
    x.grad = None
    (x * 2.0 * T.gelu(x) + T.softmax(x * 2.0)).sum().backward()
    np.testing.assert_allclose(g1, x.grad, rtol=1e-6)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_grad_accumulates_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_nonscalar_backward_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        T.patchify(Tensor(np.ones((1, 5, 4, 1))), 2)
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    lab = np.array([0, 2])
    ref = np.mean([-np.log(np.exp(2) / (np.exp(2) + 1 + np.exp(-1))), np.log(3)])
    assert abs(T.cross_entropy(Tensor(logits), lab).item() - ref) < 1e-6
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(logits), np.array([0, 3]))


def test_bilinear_resize_identity_and_corners():
    g = np.random.default_rng(0).normal(size=(3, 3, 2))
    out = T.bilinear_resize(Tensor(g), 3, 3).data
    np.testing.assert_array_equal(out, g.astype(np.float32))
    big = T.bilinear_resize(Tensor(g), 7, 5).data
    # align-corners keeps the four corner values
    for i, j, a, b in [(0, 0, 0, 0), (0, -1, 0, -1), (-1, 0, -1, 0), (-1, -1, -1, -1)]:
        np.testing.assert_allclose(big[i, j], g[a, b], rtol=1e-6)
    # a linear ramp is reproduced exactly
    ramp = np.arange(4, dtype=float)[:, None, None] * np.ones((1, 1, 1))
    up = T.bilinear_resize(Tensor(ramp), 7, 1).data[:, 0, 0]
    np.testing.assert_allclose(up, np.linspace(0, 3, 7), atol=1e-6)


def test_layernorm_matches_reference():
    x = np.random.default_rng(1).normal(size=(4, 8))
    g, b = np.full(8, 1.5), np.full(8, 0.1)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    out = T.layernorm(Tensor(x), Tensor(g), Tensor(b)).data
    assert rel_err(out, ref) < 1e-6


def test_trace_matmuls_records_scope_and_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))
    with T.trace_matmuls() as log:
        with T.scope("blk"):
            T.matmul(a, b)
    T.matmul(a, b)
    assert log == [("blk", (2, 3), (3, 4))]
