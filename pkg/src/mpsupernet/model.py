"""Weight-sharing elastic ViT with per-layer quantizers and LoRA banks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .lora import BIT_GROUPS, LoRABank, adapted_weight, lora_init, merge, qalora_forward
from .quantize import ACTIVATION, FULL, WEIGHT, QuantizerBank, fake_quantize, minmax_quantize_static
from .space import ConfigError, SearchSpace, SubnetConfig, validate_config
from .tensor import (DTYPE, Tensor, bilinear_resize, gelu, layernorm, matmul, patchify,
                     scope, softmax, transpose)

LORA_TARGETS = ("q", "k", "v", "fc1", "fc2")
BLOCK_LINEARS = ("q", "k", "v", "proj", "fc1", "fc2")


@dataclass(frozen=True)
class LoRASpec:
    mode: str = "multiplex"
    modules: int = 5
    rank: int = 4
    scaling: float = 2.0
    detach: bool = False
    switch: str = "activation"

    @property
    def groups(self):
        if self.mode == "regular":
            return BIT_GROUPS[1]
        try:
            return BIT_GROUPS[self.modules]
        except KeyError:
            raise ConfigError(f"no bit assignment for {self.modules} LoRA modules") from None

    def to_dict(self) -> dict:
        return asdict(self)


def block_prefix(stage: int, index: int) -> str:
    return f"s{stage}.b{index}"


class ElasticViT:
    """Supernet over resolution, stage depth, MLP ratio and bit-widths.

    Every subnet reads leading slices of the same base arrays: dropped blocks
    are the last ones of each stage and a smaller MLP uses the first hidden
    units of the full ``fc1``/``fc2`` weights.
    """

    def __init__(self, space: SearchSpace, seed: int = 0):
        self.space = space
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.quant = QuantizerBank()
        self.lora: dict[str, LoRABank] = {}
        self.lora_spec: LoRASpec | None = None
        self._merged = False
        self._init_base(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(DTYPE), requires_grad=True)

    def _init_base(self, rng: np.random.Generator) -> None:
        sp = self.space
        d, hmax, c = sp.embed_dim, sp.max_hidden, sp.classes
        pin = sp.patch * sp.patch * sp.channels
        grid = sp.max_resolution // sp.patch

        def dense(name, fan_in, fan_out):
            self._add(name + ".w", rng.normal(0, fan_in ** -0.5, (fan_in, fan_out)))
            self._add(name + ".b", np.zeros(fan_out))

        def norm(name):
            self._add(name + ".g", np.ones(d))
            self._add(name + ".b", np.zeros(d))

        dense("embed", pin, d)
        self._add("pos", rng.normal(0, 0.02, (grid, grid, d)))
        for s, depth in enumerate(sp.max_depths):
            for j in range(depth):
                p = block_prefix(s, j)
                norm(p + ".ln1")
                for lin in ("q", "k", "v", "proj"):
                    dense(f"{p}.{lin}", d, d)
                norm(p + ".ln2")
                dense(p + ".fc1", d, hmax)
                dense(p + ".fc2", hmax, d)
        norm("norm")
        dense("out", d, d)
        dense("head", d, c)

    def attach_lora(self, spec: LoRASpec, seed: int = 0) -> None:
        self.lora_spec = spec
        self.lora = {}
        idx = 0
        for s, depth in enumerate(self.space.max_depths):
            for j in range(depth):
                for lin in LORA_TARGETS:
                    name = f"{block_prefix(s, j)}.{lin}"
                    d_in, d_out = self.params[name + ".w"].shape
                    self.lora[name] = lora_init(
                        d_out, d_in, spec.rank, spec.scaling, spec.mode, spec.groups,
                        seed=np.random.default_rng([seed, idx]),
                        detach=spec.detach, switch=spec.switch)
                    idx += 1

    def freeze_base(self, frozen: bool = True) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen

    # -- parameter views -----------------------------------------------------

    def base_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def lora_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in sorted(self.lora):
            out.update(self.lora[name].named_parameters(name))
        return out

    def quant_parameters(self) -> dict[str, Tensor]:
        return self.quant.named_parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.base_parameters(), **self.lora_parameters(), **self.quant_parameters()}

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward ---------------------------------------------------------------

    def pos_embed(self, resolution: int) -> Tensor:
        g = resolution // self.space.patch
        pos = self.params["pos"]
        if g == pos.shape[0]:
            return pos
        return bilinear_resize(pos, g, g)

    def linear(self, name: str, x: Tensor, wbits: int, abits: int,
               d_in: int | None = None, d_out: int | None = None) -> Tensor:
        W, b = self.params[name + ".w"], self.params[name + ".b"]
        d_in = d_in or W.shape[0]
        d_out = d_out or W.shape[1]
        w0 = W if (d_in, d_out) == W.shape else W[:d_in, :d_out]
        bias = b if d_out == b.shape[0] else b[:d_out]
        with scope(name):
            qa = self.quant.get(name, ACTIVATION, abits, x.data)
            x = fake_quantize(x, qa)
            bank = self.lora.get(name)
            if self._merged:
                calib = None
                if wbits != FULL and (name, WEIGHT, wbits) not in self.quant:
                    calib = adapted_weight(w0.data, bank, wbits, abits)
                qw = self.quant.get(name, WEIGHT, wbits, calib)
                y = matmul(x, Tensor(merge(w0.data, bank, wbits, abits, qw)))
            elif bank is None:
                qw = self.quant.get(name, WEIGHT, wbits, w0.data)
                y = matmul(x, fake_quantize(w0, qw))
            else:
                calib = None
                if wbits != FULL and (name, WEIGHT, wbits) not in self.quant:
                    calib = adapted_weight(w0.data, bank, wbits, abits)
                qw = self.quant.get(name, WEIGHT, wbits, calib)
                y = qalora_forward(x, w0, bank, wbits, abits, qw)
        return y + bias

    def attention(self, prefix: str, h: Tensor, wbits: int, abits: int) -> Tensor:
        sp = self.space
        bsz, t, d = h.shape
        heads, hd = sp.heads, sp.head_dim

        def split(z):
            return transpose(z.reshape(bsz, t, heads, hd), (0, 2, 1, 3))

        q = split(self.linear(prefix + ".q", h, wbits, abits))
        k = split(self.linear(prefix + ".k", h, wbits, abits))
        v = split(self.linear(prefix + ".v", h, wbits, abits))
        with scope(prefix + ".attn"):
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * DTYPE(hd ** -0.5)
            o = matmul(softmax(scores), v)
        o = transpose(o, (0, 2, 1, 3)).reshape(bsz, t, d)
        return self.linear(prefix + ".proj", o, wbits, abits)

    def block(self, stage: int, index: int, x: Tensor, ratio: float, bits) -> Tensor:
        p = block_prefix(stage, index)
        w, a = bits
        P = self.params
        h = layernorm(x, P[p + ".ln1.g"], P[p + ".ln1.b"])
        x = x + self.attention(p, h, w, a)
        h = layernorm(x, P[p + ".ln2.g"], P[p + ".ln2.b"])
        hidden = self.space.hidden_dim(ratio)
        h = gelu(self.linear(p + ".fc1", h, w, a, d_out=hidden))
        return x + self.linear(p + ".fc2", h, w, a, d_in=hidden)

    def head(self, x: Tensor) -> Tensor:
        with scope("head"):
            xq = minmax_quantize_static(x, 8)
            wq = minmax_quantize_static(self.params["head.w"], 8)
            return matmul(xq, wq) + self.params["head.b"]

    def forward(self, cfg: SubnetConfig, images: np.ndarray, merged: bool = False) -> Tensor:
        """Per-pixel logits of shape (B, R, R, classes).

        ``merged=True`` runs the inference form: each linear uses its merged,
        quantized weight instead of the frozen weight plus adapter branch.
        """
        self._merged = merged
        try:
            return self._forward(cfg, images)
        finally:
            self._merged = False

    __call__ = forward

    def _forward(self, cfg: SubnetConfig, images: np.ndarray) -> Tensor:
        validate_config(self.space, cfg)
        images = np.asarray(images, dtype=DTYPE)
        if images.ndim != 4 or images.shape[1:3] != (cfg.resolution, cfg.resolution):
            raise ConfigError(f"images {images.shape} do not match resolution {cfg.resolution}")
        sp = self.space
        bsz, g = images.shape[0], cfg.resolution // sp.patch
        x = self.linear("embed", patchify(Tensor(images), sp.patch), *cfg.embed_bits)
        x = x + self.pos_embed(cfg.resolution).reshape(g * g, sp.embed_dim)
        for s, j in cfg.active_blocks():
            x = self.block(s, j, x, cfg.mlp_ratios[s][j], cfg.block_bits[s][j])
        x = layernorm(x, self.params["norm.g"], self.params["norm.b"])
        x = self.linear("out", x, *cfg.out_bits)
        logits = self.head(x).reshape(bsz, g, g, sp.classes)
        return bilinear_resize(logits, cfg.resolution, cfg.resolution)
