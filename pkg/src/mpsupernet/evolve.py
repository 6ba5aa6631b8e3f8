"""Budget-constrained evolutionary subnet search.

Candidates are scored by ``eval_fn`` (validation loss, lower is better);
parents are the best configs seen so far, so the best fitness can only
improve from one generation to the next. Offspring over the BitOPs budget
are rejected and redrawn.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cost import total_bitops
from .space import (SearchSpace, SubnetConfig, _choice, sample_stage, sample_uniform, to_string,
                    validate_config)


class BudgetError(RuntimeError):
    """No config satisfies the BitOPs budget."""


@dataclass(frozen=True)
class EvolutionHyper:
    population: int = 50
    parents: int = 10
    mutation_prob: float = 0.4
    mutation_pool: int = 25
    crossover_pool: int = 25
    epochs: int = 5
    max_retries: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.population, self.parents) < 1:
            raise ValueError("population and parents must be >= 1")
        if max(self.parents, self.mutation_pool, self.crossover_pool) > self.population:
            raise ValueError("parent/mutation/crossover pools cannot exceed the population")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must lie in [0, 1]")


@dataclass
class Candidate:
    cfg: SubnetConfig
    loss: float
    bitops: int

    @property
    def key(self) -> str:
        return to_string(self.cfg)


@dataclass
class Generation:
    index: int
    best: Candidate
    population: list[Candidate] = field(default_factory=list)


def _mutate_pair(space: SearchSpace, pair, p: float, rng: np.random.Generator):
    w, a = pair
    if rng.random() < p:
        w = _choice(rng, space.weight_bits)
    if rng.random() < p:
        a = _choice(rng, space.act_bits)
    return (w, a)


def mutate(cfg: SubnetConfig, space: SearchSpace, p: float, rng: np.random.Generator) -> SubnetConfig:
    """Resample each field with probability ``p``. A deeper stage gets fresh
    random entries for its new layers; a shallower one drops the tail."""
    res = _choice(rng, space.resolutions) if rng.random() < p else cfg.resolution
    embed = _mutate_pair(space, cfg.embed_bits, p, rng)
    depths, ratios, bits = [], [], []
    for s in range(space.stages):
        d_old = cfg.depths[s]
        d = _choice(rng, space.depths[s]) if rng.random() < p else d_old
        _, fresh_r, fresh_b = sample_stage(space, s, rng, depth=d)
        r_s, b_s = [], []
        for j in range(d):
            if j < d_old:
                r = cfg.mlp_ratios[s][j]
                if rng.random() < p:
                    r = _choice(rng, space.mlp_ratios)
                r_s.append(r)
                b_s.append(_mutate_pair(space, cfg.block_bits[s][j], p, rng))
            else:
                r_s.append(fresh_r[j])
                b_s.append(fresh_b[j])
        depths.append(d)
        ratios.append(tuple(r_s))
        bits.append(tuple(b_s))
    out = _mutate_pair(space, cfg.out_bits, p, rng)
    child = SubnetConfig(res, tuple(depths), tuple(ratios), tuple(bits), embed, out)
    validate_config(space, child)
    return child


def crossover(a: SubnetConfig, b: SubnetConfig, rng: np.random.Generator) -> SubnetConfig:
    """Uniform crossover; a stage's depth, ratios and bits travel together."""
    def pick(x, y):
        return x if rng.random() < 0.5 else y

    res = pick(a.resolution, b.resolution)
    embed = pick(a.embed_bits, b.embed_bits)
    stages = [pick((a.depths[s], a.mlp_ratios[s], a.block_bits[s]),
                   (b.depths[s], b.mlp_ratios[s], b.block_bits[s]))
              for s in range(len(a.depths))]
    out = pick(a.out_bits, b.out_bits)
    return SubnetConfig(res, tuple(st[0] for st in stages), tuple(st[1] for st in stages),
                        tuple(st[2] for st in stages), embed, out)


def evolve_search(space: SearchSpace, eval_fn: Callable[[SubnetConfig], float], tau: float,
                  hyper: EvolutionHyper = EvolutionHyper(), rng: np.random.Generator | None = None,
                  cost_fn: Callable[[SubnetConfig], int] | None = None,
                  log: Callable[[str], None] | None = None):
    """Return ``(best Candidate, list[Generation])``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cost_fn = cost_fn or (lambda c: total_bitops(c, space))
    cache: dict[str, Candidate] = {}

    def feasible(c: SubnetConfig) -> bool:
        return cost_fn(c) <= tau

    def draw(make, taken: set[str]) -> SubnetConfig | None:
        for _ in range(hyper.max_retries):
            c = make()
            k = to_string(c)
            if k not in taken and k not in cache and feasible(c):
                taken.add(k)
                return c
        return None

    taken: set[str] = set()
    population = []
    for _ in range(hyper.population):
        c = draw(lambda: sample_uniform(space, rng), taken)
        if c is not None:
            population.append(c)
    if not population:
        raise BudgetError(f"no config within the budget of {tau:.4g} BitOPs after "
                          f"{hyper.population * hyper.max_retries} draws")

    history: list[Generation] = []
    for gen in range(hyper.epochs):
        evaluated = []
        for c in population:
            k = to_string(c)
            if k not in cache:
                loss = float(eval_fn(c))
                if math.isnan(loss):
                    raise ValueError(f"eval_fn returned NaN for {k}")
                cache[k] = Candidate(c, loss, int(cost_fn(c)))
            evaluated.append(cache[k])
        ranked = sorted(cache.values(), key=lambda cand: (cand.loss, cand.key))
        parents = ranked[:hyper.parents]
        history.append(Generation(gen, parents[0], evaluated))
        if log:
            log(f"generation {gen}: best loss {parents[0].loss:.5f} "
                f"bitops {parents[0].bitops} ({len(cache)} evaluated)")
        if gen == hyper.epochs - 1:
            break

        def pick_parent():
            return parents[int(rng.integers(len(parents)))].cfg

        taken = set()
        nxt = []
        for _ in range(hyper.mutation_pool):
            c = draw(lambda: mutate(pick_parent(), space, hyper.mutation_prob, rng), taken)
            if c is not None:
                nxt.append(c)
        for _ in range(hyper.crossover_pool):
            c = draw(lambda: crossover(pick_parent(), pick_parent(), rng), taken)
            if c is not None:
                nxt.append(c)
        while len(nxt) < hyper.population:
            c = draw(lambda: sample_uniform(space, rng), taken)
            if c is None:
                break
            nxt.append(c)
        population = nxt
    return history[-1].best, history


def write_history(history: list[Generation], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_loss", "best_bitops", "config"])
        for g in history:
            w.writerow([g.index, f"{g.best.loss:.8g}", g.best.bitops, g.best.key])
