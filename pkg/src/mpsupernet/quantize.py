"""LSQ+-style learnable fake quantization and static min-max quantization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor, make

FULL = 32
QUANT_BITS = (2, 3, 4, 8)
WEIGHT = "weight"
ACTIVATION = "activation"


class RangeError(ValueError):
    """Calibration range is empty or inverted."""


@dataclass
class QuantizerParams:
    """Scale/zero-point of one asymmetric uniform quantizer.

    ``scale`` and ``zero_point`` are scalar tensors so they can take part in
    the autodiff graph. Weight quantizers never train their zero point.
    """

    bits: int
    kind: str
    scale: Tensor = field(default_factory=lambda: Tensor(1.0))
    zero_point: Tensor = field(default_factory=lambda: Tensor(0.0))

    def __post_init__(self):
        if self.kind not in (WEIGHT, ACTIVATION):
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.bits != FULL and self.bits not in QUANT_BITS:
            raise ValueError(f"unsupported bit-width {self.bits}")
        if self.kind == WEIGHT:
            self.zero_point.requires_grad = False

    @property
    def is_full(self) -> bool:
        return self.bits == FULL

    @property
    def n(self) -> int:
        return 0

    @property
    def p(self) -> int:
        return 2 ** self.bits - 1

    @property
    def delta(self) -> float:
        return float(self.scale.data)

    @property
    def z(self) -> float:
        return float(self.zero_point.data)

    def set_trainable(self, flag: bool) -> None:
        self.scale.requires_grad = flag and not self.is_full
        self.zero_point.requires_grad = flag and self.kind == ACTIVATION and not self.is_full

    def project(self) -> None:
        """Clamp state back into its valid domain after an optimizer step."""
        if self.is_full:
            return
        self.scale.data = np.maximum(self.scale.data, DTYPE(1e-8))
        self.zero_point.data = np.clip(self.zero_point.data, DTYPE(self.n), DTYPE(self.p))


def full_quantizer(kind: str) -> QuantizerParams:
    q = QuantizerParams(FULL, kind)
    q.set_trainable(False)
    return q


def init_quantizer(x_min: float, x_max: float, bits: int, kind: str) -> QuantizerParams:
    """Min/max calibration: ``x_min`` lands on integer ``n`` when the zero
    point is not clamped."""
    if bits not in QUANT_BITS:
        raise ValueError(f"init_quantizer needs bits in {QUANT_BITS}, got {bits}")
    if not x_max > x_min:
        raise RangeError(f"degenerate range [{x_min}, {x_max}]")
    n, p = 0, 2 ** bits - 1
    delta = DTYPE((DTYPE(x_max) - DTYPE(x_min)) / DTYPE(p - n))
    z = np.clip(np.rint(DTYPE(-x_min) / delta), n, p)
    q = QuantizerParams(bits, kind, Tensor(delta), Tensor(DTYPE(z)))
    q.set_trainable(True)
    return q


def _forward_parts(x: np.ndarray, delta, z, n: int, p: int):
    v = x / delta + z
    k = np.clip(np.rint(v), n, p)
    return v, k


def quantize_codes(x: np.ndarray, q: QuantizerParams) -> np.ndarray:
    """Integer codes in [n, p] for ``x`` under ``q``."""
    _, k = _forward_parts(np.asarray(x, dtype=DTYPE), q.scale.data, q.zero_point.data, q.n, q.p)
    return k.astype(np.int32)


def dequantize(codes: np.ndarray, delta, z) -> np.ndarray:
    return (codes.astype(DTYPE) - DTYPE(z)) * DTYPE(delta)


def fake_quantize(x: Tensor, q: QuantizerParams) -> Tensor:
    """Quantize-dequantize ``x``; gradients follow the LSQ+ straight-through
    rules for x, the step size and (activations only) the zero point."""
    if q.is_full:
        return x
    delta, z = q.scale.data, q.zero_point.data
    v, k = _forward_parts(x.data, delta, z, q.n, q.p)
    out = (k - z) * delta

    def backward(g):
        return fake_quantize_backward(g, x.data, q, v=v, k=k)

    parents = (x, q.scale, q.zero_point)
    return make(out.astype(DTYPE), parents, backward)


def fake_quantize_backward(upstream: np.ndarray, x: np.ndarray, q: QuantizerParams,
                           v: np.ndarray | None = None, k: np.ndarray | None = None):
    """Returns ``(dx, d_scale, d_zero_point)``."""
    upstream = np.asarray(upstream, dtype=DTYPE)
    if q.is_full:
        return upstream, np.zeros((), DTYPE), np.zeros((), DTYPE)
    delta, z = q.scale.data, q.zero_point.data
    if v is None or k is None:
        v, k = _forward_parts(x, delta, z, q.n, q.p)
    below = v < q.n
    above = v > q.p
    inside = ~(below | above)
    dx = np.where(inside, upstream, DTYPE(0))
    ddelta_local = np.where(inside, k - z - x / delta,
                            np.where(below, DTYPE(q.n) - z, DTYPE(q.p) - z))
    d_scale = np.asarray((upstream * ddelta_local).sum(dtype=np.float64), dtype=DTYPE)
    if q.kind == WEIGHT:
        d_zero = np.zeros((), DTYPE)
    else:
        d_zero = np.asarray((upstream * np.where(inside, DTYPE(0), -delta)).sum(dtype=np.float64),
                            dtype=DTYPE)
    return dx.astype(DTYPE), d_scale, d_zero


def minmax_params(x: np.ndarray, bits: int = 8) -> tuple[float, float] | None:
    """(scale, zero_point) from the tensor's own range; None if constant."""
    lo, hi = DTYPE(x.min()), DTYPE(x.max())
    if not hi > lo:
        return None
    p = 2 ** bits - 1
    delta = DTYPE((hi - lo) / DTYPE(p))
    z = DTYPE(np.clip(np.rint(-lo / delta), 0, p))
    return delta, z


def minmax_quantize_static(x: Tensor, bits: int = 8) -> Tensor:
    """One-shot min-max fake quantization with a pass-through gradient.

    A constant tensor is returned unchanged.
    """
    if x.data.size == 0:
        raise ValueError("minmax_quantize_static on an empty tensor")
    params = minmax_params(x.data, bits)
    if params is None:
        return make(x.data.copy(), (x,), lambda g: (g,))
    delta, z = params
    k = np.clip(np.rint(x.data / delta + z), 0, 2 ** bits - 1)
    out = ((k - z) * delta).astype(DTYPE)
    return make(out, (x,), lambda g: (g,))


class QuantizerBank:
    """Quantizers keyed by ``(layer, kind, bits)``, calibrated lazily.

    An entry is created the first time its key is requested, using the
    min/max of the tensor being quantized at that moment.
    """

    def __init__(self):
        self.entries: dict[tuple[str, str, int], QuantizerParams] = {}
        self.trainable = True

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, layer: str, kind: str, bits: int, calib: np.ndarray | None = None) -> QuantizerParams:
        if bits == FULL:
            return full_quantizer(kind)
        key = (layer, kind, bits)
        q = self.entries.get(key)
        if q is None:
            if calib is None:
                raise KeyError(f"quantizer {key} is not calibrated")
            lo, hi = float(np.min(calib)), float(np.max(calib))
            if not hi > lo:
                pad = max(abs(lo), 1.0) * 1e-3
                lo, hi = lo - pad, hi + pad
            q = init_quantizer(lo, hi, bits, kind)
            q.set_trainable(self.trainable)
            self.entries[key] = q
        return q

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for q in self.entries.values():
            q.set_trainable(flag)

    @staticmethod
    def param_name(key: tuple[str, str, int], which: str) -> str:
        layer, kind, bits = key
        return f"quant/{layer}/{kind}/{bits}/{which}"

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for key in sorted(self.entries):
            q = self.entries[key]
            out[self.param_name(key, "scale")] = q.scale
            out[self.param_name(key, "zero_point")] = q.zero_point
        return out

    def project(self) -> None:
        for q in self.entries.values():
            q.project()
