"""Layer-wise evolutionary search over per-layer bit-widths and scale factors.

A search unit is one transformer layer: every weight matrix it owns shares
the unit's bit-width while keeping its own scale factor.  The population is
elitist (two children in, worst two out), so the best fitness never rises
within a run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .losses import ContrastiveConfig, stage2_fitness
from .quant import MIN_GAMMA, LayerQuant, QuantizedModel, QuantScheme, initial_gamma
from .vit import ViTModel, layer_groups, quantizable_layers

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBudget:
    passes: int = 10
    cycles: int = 6
    diverse_parents: int = 5
    population: int = 15
    bit_range: tuple = (2, 8)
    fixed_bits: Optional[int] = None
    gamma_radius: float = 1e-3
    freeze_gamma: bool = False
    refresh: str = "per_layer"  # or "every_half_cycle"
    max_avg_bits: Optional[float] = None

    def __post_init__(self):
        lo, hi = self.bit_range
        if not 2 <= lo <= hi <= 8:
            raise ContractError(f"bit range {self.bit_range} must lie within [2, 8]")
        if self.fixed_bits is not None and not 2 <= self.fixed_bits <= 8:
            raise ContractError(f"fixed bit-width {self.fixed_bits} outside [2, 8]")
        if self.refresh not in ("per_layer", "every_half_cycle"):
            raise ContractError(f"unknown refresh mode {self.refresh!r}")
        if min(self.passes, self.cycles) < 0 or self.diverse_parents < 1:
            raise ContractError("passes and cycles must be >= 0 and diverse_parents >= 1")
        if self.max_avg_bits is not None and self.max_avg_bits < self.bits[0]:
            raise ContractError(f"average bit budget {self.max_avg_bits} is below the lowest bit-width")

    @property
    def mode(self) -> str:
        return "mixed" if self.fixed_bits is None else "fixed"

    @property
    def bits(self) -> tuple:
        return self.bit_range if self.fixed_bits is None else (self.fixed_bits, self.fixed_bits)


@dataclass
class Candidate:
    scheme: QuantScheme
    fitness: Optional[float] = None
    order: int = -1


class Population:
    """Candidates kept sorted by (fitness, insertion order)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.members: list[Candidate] = []
        self._counter = 0

    def __len__(self) -> int:
        return len(self.members)

    def add(self, cand: Candidate) -> None:
        if cand.fitness is None or not math.isfinite(cand.fitness):
            raise ContractError("only candidates with finite fitness join the population")
        cand.order = self._counter
        self._counter += 1
        self.members.append(cand)
        self.members.sort(key=lambda c: (c.fitness, c.order))

    def trim(self) -> None:
        del self.members[self.capacity:]

    @property
    def best(self) -> Candidate:
        return self.members[0]

    def parents(self) -> tuple[Candidate, Candidate]:
        return self.members[0], self.members[1]

    def mean_fitness(self) -> float:
        return float(np.mean([c.fitness for c in self.members]))


class FitnessEvaluator:
    """Scores schemes on one synthetic batch; the FP trace is computed once per batch."""

    def __init__(self, fp_model: ViTModel, batch, cfg: ContrastiveConfig = ContrastiveConfig()):
        self.fp_model = fp_model
        self.cfg = cfg
        self.calls = 0
        self.set_batch(batch)

    def set_batch(self, batch) -> None:
        self.batch = batch
        with T.no_grad():
            self._fp_logits, self._fp_trace = self.fp_model.forward(batch.images, trace=True)

    def __call__(self, scheme: QuantScheme) -> float:
        self.calls += 1
        q = QuantizedModel(self.fp_model, scheme)
        with T.no_grad():
            q_logits, q_trace = q.forward(self.batch.images, trace=True)
        return stage2_fitness(q_trace, self._fp_trace, q_logits, self._fp_logits,
                              self.batch.targets, self.cfg)


class SearchSpace:
    """Per-model constants for candidate generation: layer groups and initial scales."""

    def __init__(self, fp_model: ViTModel, budget: SearchBudget):
        cfg = fp_model.config
        self.budget = budget
        self.groups = layer_groups(cfg)
        names = quantizable_layers(cfg)
        lo, hi = budget.bits
        self.gamma_init = [{b: initial_gamma(fp_model.params[n].data, b) for b in range(lo, hi + 1)}
                           for n in names]

    @property
    def num_layers(self) -> int:
        return len(self.groups)

    def _gamma(self, t: int, b: int, center: Optional[float], rng) -> float:
        if self.budget.freeze_gamma:
            return self.gamma_init[t][b]
        base = self.gamma_init[t][b] if center is None else center
        r = self.budget.gamma_radius
        return max(base + rng.uniform(-r, r), MIN_GAMMA)

    def feasible(self, unit_bits: Sequence[int]) -> bool:
        """Whether per-unit bit-widths respect the optional average-bit budget."""
        cap = self.budget.max_avg_bits
        if cap is None:
            return True
        total = sum(b * len(g) for b, g in zip(unit_bits, self.groups))
        return total / len(self.gamma_init) <= cap + 1e-12

    def unit_bits(self, scheme: QuantScheme) -> list[int]:
        return [scheme.weight_params[g[0]].b for g in self.groups]

    def random_scheme(self, rng: np.random.Generator) -> QuantScheme:
        lo, hi = self.budget.bits
        while True:
            bits = [int(rng.integers(lo, hi + 1)) for _ in self.groups]
            if self.feasible(bits):
                break
        params = [None] * len(self.gamma_init)
        for group, b in zip(self.groups, bits):
            for t in group:
                params[t] = LayerQuant(b, self._gamma(t, b, None, rng))
        return QuantScheme.build(params)

    def regenerate(self, p1: QuantScheme, p2: QuantScheme, layer: int, rng) -> QuantScheme:
        """Cross p1 and p2 at one transformer layer; every other layer copies p1."""
        if not 0 <= layer < self.num_layers:
            raise ContractError(f"layer {layer} out of range [0, {self.num_layers})")
        group = self.groups[layer]
        b1, b2 = p1.weight_params[group[0]].b, p2.weight_params[group[0]].b
        if self.budget.mode == "fixed":
            b = b1
        else:
            lo, hi = self.budget.bits
            draws = [min(max(v, lo), hi) for v in range(min(b1, b2) - 1, max(b1, b2) + 2)]
            bits = self.unit_bits(p1)
            allowed = [v for v in draws if self.feasible(bits[:layer] + [v] + bits[layer + 1:])]
            b = allowed[int(rng.integers(len(allowed)))] if allowed else b1
        params = list(p1.weight_params)
        for t in group:
            center = 0.5 * (p1.weight_params[t].gamma + p2.weight_params[t].gamma)
            params[t] = LayerQuant(b, self._gamma(t, b, center, rng))
        return QuantScheme.build(params)


def init_population(evaluator: FitnessEvaluator, space: SearchSpace, K: int,
                    rng: np.random.Generator) -> Population:
    if K < 3:
        raise ContractError("population needs at least 3 candidates (two parents plus a survivor)")
    pop = Population(K)
    while len(pop) < K:
        scheme = space.random_scheme(rng)
        fit = evaluator(scheme)
        if math.isfinite(fit):
            pop.add(Candidate(scheme, fit))
        else:
            logger.warning("discarding initial candidate with non-finite fitness")
    return pop


def regenerate_layer(p1: Candidate, p2: Candidate, layer: int, rng, space: SearchSpace) -> Candidate:
    return Candidate(space.regenerate(p1.scheme, p2.scheme, layer, rng))


def diverse_children(child: Candidate, layer: int, P: int, rng, space: SearchSpace) -> list[Candidate]:
    """Cross ``child`` with P fresh random candidates at ``layer`` (unevaluated)."""
    return [regenerate_layer(child, Candidate(space.random_scheme(rng)), layer, rng, space)
            for _ in range(P)]


def _evaluate(cands, evaluator) -> None:
    for c in cands:
        c.fitness = evaluator(c.scheme)


def _best_finite(cands) -> Optional[Candidate]:
    ok = [c for c in cands if c.fitness is not None and math.isfinite(c.fitness)]
    return min(ok, key=lambda c: c.fitness) if ok else None


def diversity_select(child: Candidate, layer: int, P: int, rng, space: SearchSpace,
                     evaluator: FitnessEvaluator) -> Optional[Candidate]:
    """Best of P evaluated diverse children (None if every one is non-finite)."""
    if P < 1:
        raise ContractError("need at least one diverse parent")
    kids = diverse_children(child, layer, P, rng, space)
    _evaluate(kids, evaluator)
    return _best_finite(kids)


@dataclass
class SearchResult:
    best: Candidate
    history: list = field(default_factory=list)
    population: Optional[Population] = None
    refreshes: int = 0


def _summary(pop: Population, **where) -> dict:
    best = pop.best.scheme
    return {**where, "best_fitness": pop.best.fitness, "mean_fitness": pop.mean_fitness(),
            "avg_bw_w": float(np.mean(best.bits)),
            "avg_bw_a": float(np.mean([a for a, _ in best.act_params]))}


def search(evaluator: FitnessEvaluator, space: SearchSpace, population: Population,
           rng: np.random.Generator, on_refresh: Callable | None = None) -> SearchResult:
    """Run passes × layers × cycles population updates.

    ``on_refresh(best_scheme)`` is called when the data should be adapted; it
    returns the new synthetic batch, which the evaluator switches to.  Cached
    fitness values of existing members are kept as recorded.
    """
    budget = space.budget
    history, refreshes, update = [], 0, 0
    half = budget.cycles // 2
    for p in range(budget.passes):
        for layer in range(space.num_layers):
            for cycle in range(budget.cycles):
                p1, p2 = population.parents()
                child = regenerate_layer(p1, p2, layer, rng, space)
                kids = diverse_children(child, layer, budget.diverse_parents, rng, space)
                _evaluate([child, *kids], evaluator)
                for c in (child, _best_finite(kids)):
                    if c is None or not math.isfinite(c.fitness):
                        logger.warning("discarding child with non-finite fitness")
                        continue
                    population.add(c)
                population.trim()
                if history and population.best.fitness > history[-1]["best_fitness"]:
                    raise ContractError("elitism violated: best fitness increased during search")
                history.append(_summary(population, update_index=update, **{"pass": p},
                                        layer=layer, cycle=cycle))
                update += 1
                if budget.refresh == "per_layer":
                    due = cycle == half
                else:
                    due = half > 0 and update % half == 0
                if due and on_refresh is not None:
                    evaluator.set_batch(on_refresh(population.best.scheme))
                    refreshes += 1
    return SearchResult(population.best, history, population, refreshes)
