"""Small float32 tensor engine with reverse-mode autodiff.

Only the operations the elastic ViT needs are provided. Every op records a
node holding its parents and a backward closure; ``Tensor.backward`` walks the
reachable nodes in reverse creation order, which is a valid reverse
topological order because a node is always created after its inputs.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_counter = itertools.count()
_grad_enabled = True
_matmul_trace: list | None = None
_scope: list[str] = []


class ShapeError(ValueError):
    """Incompatible operand shapes."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label the matmuls issued inside the block (used by MAC tracing)."""
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


@contextlib.contextmanager
def trace_matmuls() -> Iterator[list]:
    """Collect ``(scope, a_shape, b_shape)`` for every matmul executed."""
    global _matmul_trace
    prev = _matmul_trace
    _matmul_trace = []
    try:
        yield _matmul_trace
    finally:
        _matmul_trace = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=DTYPE)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording a graph node only when it is needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape),
                           _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(np.where(mask, a.data, DTYPE(0)), (a,), lambda g: (g * mask,))


_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + DTYPE(0.044715) * x ** 3)
    th = np.tanh(inner)
    out = DTYPE(0.5) * x * (DTYPE(1) + th)

    def backward(g):
        dinner = _GELU_C * (DTYPE(1) + DTYPE(3 * 0.044715) * x ** 2)
        d = DTYPE(0.5) * (DTYPE(1) + th) + DTYPE(0.5) * x * (DTYPE(1) - th ** 2) * dinner
        return (g * d,)

    return make(out, (a,), backward)


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    return make(np.asarray(a.data.sum(), dtype=DTYPE), (a,),
                lambda g: (np.broadcast_to(g, a.shape).astype(DTYPE),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return make(np.asarray(a.data.mean(), dtype=DTYPE), (a,),
                lambda g: (np.broadcast_to(g / DTYPE(n), a.shape).astype(DTYPE),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make(s, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis, then apply gain and bias."""
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise ShapeError("layernorm over a zero-length feature axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = DTYPE(1) / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(out, (x, gamma, beta), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if _matmul_trace is not None:
        _matmul_trace.append((_scope[-1] if _scope else "", a.shape, b.shape))
    out = np.matmul(a.data, b.data)

    def backward(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return make(out, (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,),
                lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] += g
        return (full,)

    return make(out, (a,), backward)


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C): the reshape half of a
    stride-p convolution; the projection is a following matmul."""
    if images.ndim != 4:
        raise ShapeError(f"patchify expects (B, H, W, C), got {images.shape}")
    bsz, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.data.reshape(bsz, gh, patch, gw, patch, c)
    out = x.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, gh * gw, patch * patch * c)

    def backward(g):
        g = g.reshape(bsz, gh, gw, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
        return (g.reshape(images.shape),)

    return make(np.ascontiguousarray(out), (images,), backward)


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights of shape (dst, src)."""
    m = np.zeros((dst, src), dtype=np.float64)
    if dst == 1 or src == 1:
        m[:, 0] = 1.0
        return m.astype(DTYPE)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m.astype(DTYPE)


def bilinear_resize(grid: Tensor, new_h: int, new_w: int) -> Tensor:
    """Align-corners bilinear resize of a (..., h, w, c) grid."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    if grid.ndim < 3:
        raise ShapeError(f"bilinear_resize expects (..., h, w, c), got {grid.shape}")
    h, w = grid.shape[-3], grid.shape[-2]
    if (h, w) == (new_h, new_w):
        return make(grid.data.copy(), (grid,), lambda g: (g,))
    rh = _resize_matrix(h, new_h)
    rw = _resize_matrix(w, new_w)
    tmp = np.einsum("ia,...awc->...iwc", rh, grid.data)
    out = np.einsum("jb,...ibc->...ijc", rw, tmp)

    def backward(g):
        gt = np.einsum("jb,...ijc->...ibc", rw, g)
        return (np.einsum("ia,...iwc->...awc", rh, gt).astype(DTYPE),)

    return make(out.astype(DTYPE), (grid,), backward)


# -- loss --------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy; ``logits`` is (..., C), ``labels`` matches the
    leading shape and holds class indices."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    lab = labels.reshape(-1).astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError("label outside [0, C)")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = flat.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, lab].astype(np.float64).mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, lab] -= 1
        return ((p * (g / DTYPE(n))).reshape(logits.shape),)

    return make(np.asarray(loss, dtype=DTYPE), (logits,), backward)
