"""Search space, subnet configurations and their compact string form.

A subnet carries one (weight-bit, activation-bit) pair per quantized layer:
the patch embedding, every active transformer block (shared by the block's
q/k/v, attention projection and MLP linears) and the final projection.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .quantize import FULL

BitPair = tuple[int, int]


class ConfigError(ValueError):
    """A subnet or search-space description violates its constraints."""


@dataclass(frozen=True)
class SearchSpace:
    resolutions: tuple[int, ...] = (32, 48, 64)
    depths: tuple[tuple[int, ...], ...] = ((2, 3), (2, 3))
    mlp_ratios: tuple[float, ...] = (2.0, 4.0)
    weight_bits: tuple[int, ...] = (2, 3, 4, 8, FULL)
    act_bits: tuple[int, ...] = (2, 3, 4, 8, FULL)
    embed_dim: int = 32
    heads: int = 4
    patch: int = 8
    channels: int = 1
    classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(sorted(int(r) for r in self.resolutions)))
        object.__setattr__(self, "depths", tuple(tuple(sorted(int(d) for d in s)) for s in self.depths))
        object.__setattr__(self, "mlp_ratios", tuple(sorted(float(m) for m in self.mlp_ratios)))
        object.__setattr__(self, "weight_bits", tuple(sorted(int(b) for b in self.weight_bits)))
        object.__setattr__(self, "act_bits", tuple(sorted(int(b) for b in self.act_bits)))
        for name in ("resolutions", "depths", "mlp_ratios", "weight_bits", "act_bits"):
            if not getattr(self, name):
                raise ConfigError(f"search space field {name!r} is empty")
        for s, opts in enumerate(self.depths):
            if not opts or min(opts) < 1:
                raise ConfigError(f"stage {s} depth options must be positive, got {opts}")
        for r in self.resolutions:
            if r % self.patch:
                raise ConfigError(f"resolution {r} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        for b in self.weight_bits + self.act_bits:
            if b not in (2, 3, 4, 8, FULL):
                raise ConfigError(f"unsupported bit-width {b}")

    @property
    def stages(self) -> int:
        return len(self.depths)

    @property
    def max_depths(self) -> tuple[int, ...]:
        return tuple(max(d) for d in self.depths)

    @property
    def max_resolution(self) -> int:
        return self.resolutions[-1]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def hidden_dim(self, ratio: float) -> int:
        return int(math.ceil(ratio * self.embed_dim))

    @property
    def max_hidden(self) -> int:
        return self.hidden_dim(self.mlp_ratios[-1])

    def tokens(self, resolution: int) -> int:
        return (resolution // self.patch) ** 2

    def capped(self, max_resolution: int) -> "SearchSpace":
        res = tuple(r for r in self.resolutions if r <= max_resolution)
        if not res:
            raise ConfigError(f"no resolution <= {max_resolution}")
        return replace(self, resolutions=res)

    def restrict(self, operator: str) -> "SearchSpace":
        """Keep only ``operator`` elastic; every other field is pinned to its
        largest option."""
        pinned = dict(
            resolutions=(self.resolutions[-1],),
            depths=tuple((max(d),) for d in self.depths),
            mlp_ratios=(self.mlp_ratios[-1],),
            weight_bits=(self.weight_bits[-1],),
            act_bits=(self.act_bits[-1],),
        )
        keep = {"resolution": ("resolutions",), "depth": ("depths",),
                "mlp": ("mlp_ratios",), "bits": ("weight_bits", "act_bits")}
        if operator not in keep:
            raise ConfigError(f"unknown operator {operator!r}")
        for name in keep[operator]:
            pinned.pop(name)
        return replace(self, **pinned)

    def max_config(self) -> "SubnetConfig":
        return uniform_config(self, self.resolutions[-1], self.max_depths,
                              self.mlp_ratios[-1], (self.weight_bits[-1], self.act_bits[-1]))

    def to_dict(self) -> dict:
        return dict(resolutions=list(self.resolutions), depths=[list(d) for d in self.depths],
                    mlp_ratios=list(self.mlp_ratios), weight_bits=list(self.weight_bits),
                    act_bits=list(self.act_bits), embed_dim=self.embed_dim, heads=self.heads,
                    patch=self.patch, channels=self.channels, classes=self.classes)


@dataclass(frozen=True)
class SubnetConfig:
    resolution: int
    depths: tuple[int, ...]
    mlp_ratios: tuple[tuple[float, ...], ...]
    block_bits: tuple[tuple[BitPair, ...], ...]
    embed_bits: BitPair = (FULL, FULL)
    out_bits: BitPair = (FULL, FULL)

    def active_blocks(self) -> Iterator[tuple[int, int]]:
        for s, d in enumerate(self.depths):
            for j in range(d):
                yield s, j

    def bit_list(self) -> list[BitPair]:
        flat = [b for stage in self.block_bits for b in stage]
        return [self.embed_bits, *flat, self.out_bits]

    def __str__(self) -> str:
        return to_string(self)


def uniform_config(space: SearchSpace, resolution: int, depths, ratio: float,
                   bits: BitPair) -> SubnetConfig:
    depths = tuple(depths)
    return SubnetConfig(
        resolution=resolution,
        depths=depths,
        mlp_ratios=tuple((float(ratio),) * d for d in depths),
        block_bits=tuple((tuple(bits),) * d for d in depths),
        embed_bits=tuple(bits),
        out_bits=tuple(bits),
    )


def _fmt_ratio(r: float) -> str:
    return f"{r:g}"


def to_string(cfg: SubnetConfig) -> str:
    mlp = ",".join(_fmt_ratio(r) for stage in cfg.mlp_ratios for r in stage)
    bits = ",".join(f"w{w}a{a}" for w, a in cfg.bit_list())
    depths = ",".join(str(d) for d in cfg.depths)
    return f"res={cfg.resolution};d={depths};mlp={mlp};bits={bits}"


def parse_subnet(text: str) -> SubnetConfig:
    """Inverse of :func:`to_string`."""
    fields = {}
    for part in text.strip().split(";"):
        if not part:
            continue
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"malformed subnet field {part!r}")
        fields[key.strip()] = val.strip()
    missing = {"res", "d", "mlp", "bits"} - fields.keys()
    if missing:
        raise ConfigError(f"subnet string lacks {sorted(missing)}")
    try:
        res = int(fields["res"])
        depths = tuple(int(v) for v in fields["d"].split(","))
        ratios = [float(v) for v in fields["mlp"].split(",")] if fields["mlp"] else []
        bits = []
        for tok in fields["bits"].split(","):
            w, _, a = tok.strip().lstrip("w").partition("a")
            bits.append((int(w), int(a)))
    except ValueError as exc:
        raise ConfigError(f"malformed subnet string {text!r}: {exc}") from None
    n = sum(depths)
    if len(ratios) != n:
        raise ConfigError(f"mlp has {len(ratios)} entries, depths need {n}")
    if len(bits) != n + 2:
        raise ConfigError(f"bits has {len(bits)} entries, expected {n + 2}")
    mlp, blk, i = [], [], 0
    for d in depths:
        mlp.append(tuple(ratios[i:i + d]))
        blk.append(tuple(bits[1 + i:1 + i + d]))
        i += d
    return SubnetConfig(res, depths, tuple(mlp), tuple(blk), bits[0], bits[-1])


def validate_config(space: SearchSpace, cfg: SubnetConfig) -> None:
    """Raise :class:`ConfigError` listing every violation."""
    errors = []
    if cfg.resolution not in space.resolutions:
        errors.append(f"resolution: {cfg.resolution} not in {space.resolutions}")
    if len(cfg.depths) != space.stages:
        errors.append(f"depths: {len(cfg.depths)} stages, space has {space.stages}")
    if len(cfg.mlp_ratios) != len(cfg.depths) or len(cfg.block_bits) != len(cfg.depths):
        errors.append("mlp_ratios/block_bits: stage count differs from depths")
    for s, d in enumerate(cfg.depths[:space.stages]):
        if d not in space.depths[s]:
            errors.append(f"depths[{s}]: {d} not in {space.depths[s]}")
        if s < len(cfg.mlp_ratios):
            ratios = cfg.mlp_ratios[s]
            if len(ratios) != d:
                errors.append(f"mlp_ratios[{s}]: {len(ratios)} entries for depth {d}")
            for j, r in enumerate(ratios):
                if r not in space.mlp_ratios:
                    errors.append(f"mlp_ratios[{s}][{j}]: {r} not in {space.mlp_ratios}")
        if s < len(cfg.block_bits):
            bits = cfg.block_bits[s]
            if len(bits) > d:
                errors.append(f"block_bits[{s}]: bits assigned to dropped layer(s) "
                              f"{list(range(d, len(bits)))} (depth {d})")
            elif len(bits) < d:
                errors.append(f"block_bits[{s}]: {len(bits)} entries for depth {d}")
            for j, pair in enumerate(bits):
                errors.extend(_check_pair(space, f"block_bits[{s}][{j}]", pair))
    errors.extend(_check_pair(space, "embed_bits", cfg.embed_bits))
    errors.extend(_check_pair(space, "out_bits", cfg.out_bits))
    if errors:
        raise ConfigError("invalid subnet: " + "; ".join(errors))


def _check_pair(space: SearchSpace, label: str, pair) -> list[str]:
    out = []
    if len(pair) != 2:
        return [f"{label}: expected (weight, activation) pair, got {pair}"]
    w, a = pair
    if w not in space.weight_bits:
        out.append(f"{label}: weight bits {w} not in {space.weight_bits}")
    if a not in space.act_bits:
        out.append(f"{label}: activation bits {a} not in {space.act_bits}")
    return out


def is_valid(space: SearchSpace, cfg: SubnetConfig) -> bool:
    try:
        validate_config(space, cfg)
    except ConfigError:
        return False
    return True


def _choice(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def sample_pair(space: SearchSpace, rng: np.random.Generator) -> BitPair:
    return (_choice(rng, space.weight_bits), _choice(rng, space.act_bits))


def sample_stage(space: SearchSpace, s: int, rng: np.random.Generator, depth: int | None = None):
    if depth is None:
        depth = _choice(rng, space.depths[s])
    ratios = tuple(_choice(rng, space.mlp_ratios) for _ in range(depth))
    bits = tuple(sample_pair(space, rng) for _ in range(depth))
    return depth, ratios, bits


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> SubnetConfig:
    """Draw every field independently and uniformly from its options."""
    res = _choice(rng, space.resolutions)
    embed = sample_pair(space, rng)
    stages = [sample_stage(space, s, rng) for s in range(space.stages)]
    out = sample_pair(space, rng)
    return SubnetConfig(
        resolution=res,
        depths=tuple(st[0] for st in stages),
        mlp_ratios=tuple(st[1] for st in stages),
        block_bits=tuple(st[2] for st in stages),
        embed_bits=embed,
        out_bits=out,
    )


def iter_configs(space: SearchSpace) -> Iterator[SubnetConfig]:
    """Every valid subnet of ``space`` (exhaustive; keep the space small)."""
    pairs = list(itertools.product(space.weight_bits, space.act_bits))

    def stage_options(s):
        for d in space.depths[s]:
            for ratios in itertools.product(space.mlp_ratios, repeat=d):
                for bits in itertools.product(pairs, repeat=d):
                    yield d, ratios, bits

    per_stage = [list(stage_options(s)) for s in range(space.stages)]
    for res in space.resolutions:
        for embed in pairs:
            for out in pairs:
                for stages in itertools.product(*per_stage):
                    yield SubnetConfig(res, tuple(st[0] for st in stages),
                                       tuple(st[1] for st in stages),
                                       tuple(st[2] for st in stages), embed, out)


def count_configs(space: SearchSpace) -> int:
    pairs = len(space.weight_bits) * len(space.act_bits)
    total = len(space.resolutions) * pairs * pairs
    for opts in space.depths:
        total *= sum((len(space.mlp_ratios) * pairs) ** d for d in opts)
    return total
