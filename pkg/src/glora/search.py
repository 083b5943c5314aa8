"""Evolutionary search for per-layer support configurations.

A genome holds one gene per (layer, role): an index into that layer's list
of admissible kinds for the role (see :meth:`LayerSearchSpace.options`).
Each generation keeps the top-K genomes as parents and breeds 50 random,
50 crossover and 50 mutation children. Fitness is validation accuracy for
classification and negative validation loss for regression.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .layer import ROLES, LayerConfig, LayerSearchSpace, trainable_param_count
from .supernet import ToyModel, forward, task_loss
from .synth import Dataset

Genome = tuple[int, ...]


@dataclass(frozen=True)
class EvoSettings:
    population: int = 50
    generations: int = 20
    topk: int = 10
    crossover_prob: float = 0.2
    mutation_prob: float = 0.2
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.population < 1 or self.topk < 1 or self.generations < 0 or self.threads < 1:
            raise ContractError(f"counts must be positive: {self}")
        for p in (self.crossover_prob, self.mutation_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"probabilities must lie in [0, 1]: {self}")


@dataclass(frozen=True)
class FitnessRecord:
    genome: Genome
    fitness: float
    params: int


@dataclass
class SearchResult:
    best: FitnessRecord
    history: list[dict] = field(default_factory=list)
    evaluations: int = 0


def gene_options(spaces: Sequence[LayerSearchSpace]) -> list[list]:
    return [space.options(role) for space in spaces for role in ROLES]


def decode(genome: Genome, spaces: Sequence[LayerSearchSpace]) -> list[LayerConfig]:
    options = gene_options(spaces)
    if len(genome) != len(options):
        raise ContractError(f"genome has {len(genome)} genes, expected {len(options)}")
    kinds = [opts[g] for opts, g in zip(options, genome)]
    return [LayerConfig(*kinds[i : i + 5]) for i in range(0, len(kinds), 5)]


def encode(config: Sequence[LayerConfig], spaces: Sequence[LayerSearchSpace]) -> Genome:
    genes = []
    for cfg, space in zip(config, spaces):
        for role in ROLES:
            opts = space.options(role)
            kind = cfg.kind(role)
            if kind not in opts:
                raise ContractError(f"{role}={kind} is not an option of the search space")
            genes.append(opts.index(kind))
    return tuple(genes)


def random_genome(spaces, rng: np.random.Generator) -> Genome:
    return tuple(int(rng.integers(len(opts))) for opts in gene_options(spaces))


def init_population(spaces, n: int, rng: np.random.Generator) -> list[Genome]:
    return [random_genome(spaces, rng) for _ in range(n)]


def crossover(parent_a: Genome, parent_b: Genome, rng: np.random.Generator) -> Genome:
    if len(parent_a) != len(parent_b):
        raise ContractError("parents have different gene layouts")
    pick = rng.random(len(parent_a)) < 0.5
    return tuple(a if p else b for a, b, p in zip(parent_a, parent_b, pick))


def mutate(parent: Genome, p: float, spaces, rng: np.random.Generator) -> Genome:
    """Resample each gene with probability ``p`` (the same allele may come back)."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"mutation probability {p} outside [0, 1]")
    options = gene_options(spaces)
    if len(parent) != len(options):
        raise ContractError("genome does not match the search spaces")
    child = list(parent)
    hits = rng.random(len(parent)) < p
    for i in np.flatnonzero(hits):
        child[i] = int(rng.integers(len(options[i])))
    return tuple(child)


def param_count(model: ToyModel, config: Sequence[LayerConfig]) -> int:
    return sum(trainable_param_count(layer, cfg) for layer, cfg in zip(model.layers, config))


def evaluate_fitness(supernet: ToyModel, genome: Genome, val: Dataset, spaces) -> FitnessRecord:
    """Fitness of ``genome`` on the validation split; never modifies ``supernet``."""
    x, y = val.split("val")
    if len(x) == 0:
        raise ContractError("validation split is empty")
    config = decode(genome, spaces)
    out = forward(supernet, x, config)
    if val.is_classification:
        fitness = float(np.mean(out.data.argmax(axis=0) == y))
    else:
        fitness = -float(task_loss(out, y, False).data[0, 0])
    if not math.isfinite(fitness):
        raise ContractError(f"non-finite fitness for genome {genome}")
    return FitnessRecord(genome, fitness, param_count(supernet, config))


def _rank_key(rec: FitnessRecord):
    return (-rec.fitness, rec.params, rec.genome)


def select_topk(records: Sequence[FitnessRecord], k: int) -> list[FitnessRecord]:
    """Best ``k`` by fitness; ties go to fewer parameters, then lower genome."""
    if k > len(records):
        raise ContractError(f"cannot select {k} parents from {len(records)} records")
    return sorted(records, key=_rank_key)[:k]


class _Evaluator:
    def __init__(self, supernet, val, spaces, threads):
        self.supernet, self.val, self.spaces = supernet, val, spaces
        self.threads = threads
        self.cache: dict[Genome, FitnessRecord] = {}

    def __call__(self, genomes: Sequence[Genome]) -> list[FitnessRecord]:
        new = sorted({g for g in genomes if g not in self.cache})
        if new:
            if self.threads > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    results = list(pool.map(lambda g: evaluate_fitness(self.supernet, g, self.val, self.spaces), new))
            else:
                results = [evaluate_fitness(self.supernet, g, self.val, self.spaces) for g in new]
            self.cache.update(zip(new, results))
        return [self.cache[g] for g in genomes]


def evolve(supernet: ToyModel, spaces, val: Dataset, settings: EvoSettings = EvoSettings()) -> SearchResult:
    if len(spaces) != len(supernet.layers):
        raise ContractError(f"{len(spaces)} search spaces for {len(supernet.layers)} layers")
    rng = np.random.default_rng(settings.seed)
    evaluate = _Evaluator(supernet, val, spaces, settings.threads)
    pool = evaluate(init_population(spaces, settings.population, rng))
    best = select_topk(pool, 1)[0]
    history = [_summary(0, pool, best)]
    for generation in range(1, settings.generations + 1):
        parents = select_topk(list({r.genome: r for r in pool}.values()), min(settings.topk, len(set(r.genome for r in pool))))
        k = len(parents)
        children = init_population(spaces, settings.population, rng)
        for _ in range(settings.population):
            a = parents[int(rng.integers(k))].genome
            b = parents[int(rng.integers(k))].genome
            children.append(crossover(a, b, rng) if rng.random() < settings.crossover_prob else a)
        for _ in range(settings.population):
            parent = parents[int(rng.integers(k))].genome
            children.append(mutate(parent, settings.mutation_prob, spaces, rng))
        pool = parents + evaluate(children)
        best = select_topk(pool, 1)[0]
        history.append(_summary(generation, pool, best))
    return SearchResult(best, history, len(evaluate.cache))


def _summary(generation: int, pool: Sequence[FitnessRecord], best: FitnessRecord) -> dict:
    return {
        "generation": generation,
        "best_fitness": best.fitness,
        "best_params": best.params,
        "best_genome": list(best.genome),
        "mean_fitness": float(np.mean([r.fitness for r in pool])),
    }


def brute_force(supernet: ToyModel, spaces, val: Dataset) -> FitnessRecord:
    """Exhaustive optimum under the same ranking as :func:`select_topk`."""
    sizes = [len(opts) for opts in gene_options(spaces)]
    best = None
    for genome in itertools.product(*(range(s) for s in sizes)):
        rec = evaluate_fitness(supernet, genome, val, spaces)
        if best is None or _rank_key(rec) < _rank_key(best):
            best = rec
    return best


@dataclass(frozen=True)
class SpaceSize:
    per_layer: list[int]
    summed_total: int
    """Per-layer counts added up over layers."""
    exact_total: int
    """Number of distinct whole-model configurations (product over layers)."""


def search_space_size(spaces: Sequence[LayerSearchSpace]) -> SpaceSize:
    per_layer = [space.size() for space in spaces]
    return SpaceSize(per_layer, sum(per_layer), math.prod(per_layer))
