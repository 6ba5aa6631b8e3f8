"""Low-rank adapter banks with quantization-aware forward and merging.

Weights are stored input-major (``y = x @ W``, ``W`` of shape ``(d_in, d_out)``).
Adapter factors keep the usual orientation, ``A: (r, d_in)`` and
``B: (d_out, r)``, so the weight-space update is ``(s * B @ A).T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import FULL, QUANT_BITS, QuantizerParams, fake_quantize
from .tensor import DTYPE, ShapeError, Tensor, matmul, no_grad, transpose

ALL_BITS = QUANT_BITS + (FULL,)
REGULAR, SELECTIVE, MULTIPLEX = "regular", "selective", "multiplex"
MODES = (REGULAR, SELECTIVE, MULTIPLEX)

# Largest bit-widths share a module; the module holding FULL is the base.
BIT_GROUPS = {
    1: ((2, 3, 4, 8, FULL),),
    3: ((2,), (3,), (4, 8, FULL)),
    4: ((2,), (3,), (4,), (8, FULL)),
    5: ((2,), (3,), (4,), (8,), (FULL,)),
}


class LoRAConfigError(ValueError):
    pass


@dataclass
class LoRAModule:
    A: Tensor
    B: Tensor
    scaling: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def factors(self, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
        """Leading slices matching an elastic (d_in, d_out) weight view."""
        A = self.A if d_in == self.A.shape[1] else self.A[:, :d_in]
        B = self.B if d_out == self.B.shape[0] else self.B[:d_out]
        return A, B

    def delta(self, d_in: int | None = None, d_out: int | None = None) -> np.ndarray:
        d_in = d_in or self.A.shape[1]
        d_out = d_out or self.B.shape[0]
        a = self.A.data[:, :d_in]
        b = self.B.data[:d_out]
        return (DTYPE(self.scaling) * (a.T @ b.T)).astype(DTYPE)


class LoRABank:
    """One layer's adapters: a module per bit group plus the switching rule."""

    def __init__(self, mode: str, groups, modules: list[LoRAModule],
                 detach: bool = False, switch: str = "activation"):
        self.mode = mode
        self.groups = tuple(tuple(g) for g in groups)
        self.modules = modules
        self.detach = detach
        self.switch = switch

    @property
    def base_index(self) -> int | None:
        if self.mode != MULTIPLEX:
            return None
        return next(i for i, g in enumerate(self.groups) if FULL in g)

    def group_of(self, bits: int) -> int:
        for i, g in enumerate(self.groups):
            if bits in g:
                return i
        raise LoRAConfigError(f"no LoRA module assigned to {bits}-bit")

    def key_bits(self, wbits: int, abits: int) -> int:
        return abits if self.switch == "activation" else wbits

    def active(self, wbits: int, abits: int) -> list[tuple[LoRAModule, bool]]:
        """Modules used for this layer's bit setting, each with a
        ``detached`` flag (gradient blocked)."""
        if self.mode == REGULAR:
            return [(self.modules[0], False)]
        g = self.group_of(self.key_bits(wbits, abits))
        if self.mode == SELECTIVE:
            return [(self.modules[g], False)]
        base = self.base_index
        if g == base:
            return [(self.modules[base], False)]
        return [(self.modules[base], self.detach), (self.modules[g], False)]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, m in enumerate(self.modules):
            out[f"{prefix}.lora{i}.A"] = m.A
            out[f"{prefix}.lora{i}.B"] = m.B
        return out


def check_groups(groups) -> None:
    seen: list[int] = []
    for g in groups:
        if not g:
            raise LoRAConfigError("empty bit group")
        seen.extend(g)
    if len(seen) != len(set(seen)):
        raise LoRAConfigError(f"overlapping bit groups {groups}")
    if set(seen) != set(ALL_BITS):
        raise LoRAConfigError(f"bit groups {groups} do not cover {ALL_BITS}")


def lora_init(d: int, k: int, r: int, s: float, mode: str, bit_groups=None,
              seed=0, detach: bool = False, switch: str = "activation",
              std: float = 0.02) -> LoRABank:
    """Build a bank for a weight with ``d`` outputs and ``k`` inputs.

    A is Gaussian, B is zero, so every module starts as a no-op.
    """
    if mode not in MODES:
        raise LoRAConfigError(f"unknown LoRA mode {mode!r}")
    if switch not in ("activation", "weight"):
        raise LoRAConfigError(f"unknown switch key {switch!r}")
    if r < 1:
        raise LoRAConfigError("rank must be positive")
    if mode == REGULAR:
        groups = BIT_GROUPS[1]
    else:
        groups = BIT_GROUPS[5] if bit_groups is None else bit_groups
    check_groups(groups)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    modules = []
    for _ in groups:
        A = Tensor(rng.normal(0.0, std, size=(r, k)).astype(DTYPE), requires_grad=True)
        B = Tensor(np.zeros((d, r), DTYPE), requires_grad=True)
        modules.append(LoRAModule(A, B, float(s)))
    return LoRABank(mode, groups, modules, detach=detach, switch=switch)


def _combined_delta(active, d_in: int, d_out: int) -> np.ndarray:
    total = np.zeros((d_in, d_out), DTYPE)
    for m, _ in active:
        total = total + m.delta(d_in, d_out)
    return total


def pre_quantization(w0: Tensor, active, q: QuantizerParams) -> Tensor:
    """``quantize(W0 + BA) - BA`` with BA held constant.

    W0 and the quantizer step size keep their gradients; the adapters learn
    only through the explicit low-rank branch of ``qalora_forward``.
    """
    if q.is_full:
        return w0
    d_in, d_out = w0.shape
    with no_grad():
        ba = Tensor(_combined_delta(active, d_in, d_out))
    if ba.shape != w0.shape:
        raise ShapeError(f"adapter update {ba.shape} vs weight {w0.shape}")
    return fake_quantize(w0 + ba, q) - ba


def qalora_forward(x: Tensor, w0: Tensor, bank: LoRABank, wbits: int, abits: int,
                   q: QuantizerParams) -> Tensor:
    """``x @ W~ + sum_s s * (x @ A.T) @ B.T`` over the active modules."""
    d_in, d_out = w0.shape
    active = bank.active(wbits, abits)
    y = matmul(x, pre_quantization(w0, active, q))
    for m, detached in active:
        A, B = m.factors(d_in, d_out)
        if detached:
            A, B = A.detach(), B.detach()
        y = y + matmul(matmul(x, transpose(A)), transpose(B)) * DTYPE(m.scaling)
    return y


def adapted_weight(w0: np.ndarray, bank: LoRABank | None, wbits: int, abits: int) -> np.ndarray:
    """Float ``W0 + sum s*BA`` for the modules active at this bit setting."""
    w0 = np.asarray(w0, dtype=DTYPE)
    if bank is None:
        return w0
    return w0 + _combined_delta(bank.active(wbits, abits), *w0.shape)


def merge(w0: np.ndarray, bank: LoRABank | None, wbits: int, abits: int,
          q: QuantizerParams) -> np.ndarray:
    """Inference weight: the quantized sum of the frozen weight and the
    active adapters."""
    w = adapted_weight(w0, bank, wbits, abits)
    if q.is_full:
        return w
    return fake_quantize(Tensor(w), q).data
