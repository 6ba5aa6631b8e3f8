"""BitOPs accounting: MACs x weight bits x activation bits, per layer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .quantize import FULL
from .space import SearchSpace, SubnetConfig, validate_config

HEAD_BITS = 8


def macs(kind: str, *, tokens: int, d_in: int = 0, d_out: int = 0, heads: int = 0,
         head_dim: int = 0, patch: int = 0, channels: int = 0) -> int:
    """Multiply-accumulate count of one layer.

    ``linear``: tokens*d_in*d_out; ``attention``: score and value products,
    2*heads*tokens^2*head_dim; ``patch_embed``: tokens*patch^2*channels*d_out.
    """
    if kind == "linear":
        return tokens * d_in * d_out
    if kind == "attention":
        return 2 * heads * tokens * tokens * head_dim
    if kind == "patch_embed":
        return tokens * patch * patch * channels * d_out
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class LayerCost:
    layer: str
    macs: int
    weight_bits: int
    act_bits: int

    @property
    def bitops(self) -> int:
        return self.macs * self.weight_bits * self.act_bits


@dataclass
class BitOpsReport:
    records: list[LayerCost] = field(default_factory=list)

    @property
    def head(self) -> int:
        return sum(r.bitops for r in self.records if r.layer == "head")

    @property
    def backbone(self) -> int:
        return sum(r.bitops for r in self.records if r.layer != "head")

    @property
    def total(self) -> int:
        return sum(r.bitops for r in self.records)

    def by_layer(self) -> dict[str, int]:
        return {r.layer: r.bitops for r in self.records}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "macs", "weight_bits", "act_bits", "bitops"])
        for r in self.records:
            w.writerow([r.layer, r.macs, r.weight_bits, r.act_bits, r.bitops])
        w.writerow(["backbone", "", "", "", self.backbone])
        w.writerow(["head", "", "", "", self.head])
        w.writerow(["total", "", "", "", self.total])
        return buf.getvalue()


def bitops(cfg: SubnetConfig, space: SearchSpace) -> BitOpsReport:
    """Closed-form BitOPs of a subnet.

    Attention score/value products have no quantizer in the forward pass and
    are charged at 32x32; the head is charged at 8x8.
    """
    validate_config(space, cfg)
    t = space.tokens(cfg.resolution)
    d = space.embed_dim
    rep = BitOpsReport()
    add = rep.records.append

    w, a = cfg.embed_bits
    add(LayerCost("embed", macs("patch_embed", tokens=t, patch=space.patch,
                                channels=space.channels, d_out=d), w, a))
    for s, j in cfg.active_blocks():
        p = f"s{s}.b{j}"
        w, a = cfg.block_bits[s][j]
        hidden = space.hidden_dim(cfg.mlp_ratios[s][j])
        for lin in ("q", "k", "v"):
            add(LayerCost(f"{p}.{lin}", macs("linear", tokens=t, d_in=d, d_out=d), w, a))
        add(LayerCost(f"{p}.attn", macs("attention", tokens=t, heads=space.heads,
                                        head_dim=space.head_dim), FULL, FULL))
        add(LayerCost(f"{p}.proj", macs("linear", tokens=t, d_in=d, d_out=d), w, a))
        add(LayerCost(f"{p}.fc1", macs("linear", tokens=t, d_in=d, d_out=hidden), w, a))
        add(LayerCost(f"{p}.fc2", macs("linear", tokens=t, d_in=hidden, d_out=d), w, a))
    w, a = cfg.out_bits
    add(LayerCost("out", macs("linear", tokens=t, d_in=d, d_out=d), w, a))
    add(LayerCost("head", macs("linear", tokens=t, d_in=d, d_out=space.classes),
                  HEAD_BITS, HEAD_BITS))
    return rep


def total_bitops(cfg: SubnetConfig, space: SearchSpace) -> int:
    return bitops(cfg, space).total
