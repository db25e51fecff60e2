"""Aging-population evolutionary search over classifier hyperparameters.

Each iteration samples a few entries from the population, mutates the
fittest sample in exactly one hyperparameter, evaluates the child, appends
it, and discards the oldest entry. Fitness is the mean F1 over stratified
80/20 resplits of the dataset; a child that fails to train scores 0 so the
population dynamics never stall. Every evaluation lands in an audit log.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics, tinynn
from .tinynn import BATCH_SIZES, CnnConfig

__all__ = [
    "Categorical",
    "FloatRange",
    "IntRange",
    "PopulationEntry",
    "SearchSpace",
    "default_space",
    "evaluate_config",
    "mutate",
    "random_config",
    "regularized_evolution",
    "write_audit_csv",
]

log = logging.getLogger(__name__)

CONFIG_FIELDS = ("n_fc_layers", "n_conv_layers", "channel_ratio",
                 "batch_size", "early_stop", "learning_rate", "momentum",
                 "epochs")


@dataclass(frozen=True)
class IntRange:
    lo: int
    hi: int

    def sample(self, rng: np.random.Generator):
        return int(rng.integers(self.lo, self.hi + 1))


@dataclass(frozen=True)
class Categorical:
    values: tuple

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]


@dataclass(frozen=True)
class FloatRange:
    lo: float
    hi: float
    scale: str = "linear"

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise ValueError("scale must be 'linear' or 'log'")
        if self.scale == "log" and self.lo <= 0:
            raise ValueError("log scale requires positive bounds")

    def sample(self, rng: np.random.Generator):
        if self.scale == "log":
            return float(10.0 ** rng.uniform(math.log10(self.lo),
                                             math.log10(self.hi)))
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class SearchSpace:
    domains: dict

    def __post_init__(self):
        if set(self.domains) != set(CONFIG_FIELDS):
            raise ValueError(
                "search space must cover every config field exactly once")


def default_space() -> SearchSpace:
    return SearchSpace(domains={
        "n_fc_layers": IntRange(1, 6),
        "n_conv_layers": IntRange(1, 6),
        "channel_ratio": IntRange(1, 3),
        "batch_size": Categorical(BATCH_SIZES),
        "early_stop": IntRange(0, 5),
        "learning_rate": FloatRange(1e-5, 0.5, scale="log"),
        "momentum": FloatRange(0.0, 1.0),
        "epochs": IntRange(100, 500),
    })


def random_config(space: SearchSpace, rng: np.random.Generator) -> CnnConfig:
    draws = {name: space.domains[name].sample(rng) for name in CONFIG_FIELDS}
    return CnnConfig(**draws)


def mutate(cfg: CnnConfig, space: SearchSpace,
           rng: np.random.Generator) -> CnnConfig:
    """Resample exactly one uniformly chosen field until it differs."""
    name = CONFIG_FIELDS[int(rng.integers(len(CONFIG_FIELDS)))]
    domain = space.domains[name]
    current = getattr(cfg, name)
    while True:
        candidate = domain.sample(rng)
        if candidate != current:
            return replace(cfg, **{name: candidate})


def _stratified_split(labels: np.ndarray, test_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        n_test = max(1, int(round(test_fraction * members.size)))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return np.concatenate(train_idx), np.concatenate(test_idx)


def evaluate_config(cfg: CnnConfig, dataset, k_splits: int,
                    rng: np.random.Generator,
                    max_epochs: int | None = None) -> float:
    """Mean F1 over stratified 80/20 resplits; training failures score 0."""
    if k_splits < 1:
        raise ValueError("k_splits must be >= 1")
    x, y = tinynn._dataset_arrays(dataset)
    if len(np.unique(y)) < 2:
        raise ValueError("evaluation requires both classes present")
    scores = []
    for _ in range(k_splits):
        train_idx, test_idx = _stratified_split(y, 0.2, rng)
        try:
            model = tinynn.build_model(cfg, rng)
            tinynn.train(model, (x[train_idx], y[train_idx]), cfg, rng,
                         max_epochs=max_epochs)
            predicted = tinynn.predict_labels(model, x[test_idx])
            cm = metrics.confusion_from_predictions(
                y[test_idx].astype(bool), predicted)
            scores.append(metrics.f1(cm))
        except (ValueError, FloatingPointError) as exc:
            log.warning("config %s failed to train (%s); scoring 0",
                        cfg, exc)
            scores.append(0.0)
    return float(np.mean(scores))


@dataclass(frozen=True)
class PopulationEntry:
    config: CnnConfig
    fitness: float
    age: int

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness must lie in [0, 1]")


def regularized_evolution(space: SearchSpace, eval_fn, population_size: int,
                          sample_size: int, iterations: int,
                          rng: np.random.Generator
                          ) -> tuple[PopulationEntry, list[dict]]:
    """Run the aging-evolution loop; returns (best entry, audit history).

    eval_fn(cfg, rng) -> fitness in [0, 1]. The population is a FIFO queue
    of fixed size; each history row records one evaluation.
    """
    if not population_size >= sample_size >= 2:
        raise ValueError("need population_size >= sample_size >= 2")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    population: deque[PopulationEntry] = deque()
    history: list[dict] = []
    best: PopulationEntry | None = None
    age = 0

    def record(entry: PopulationEntry, origin: str, iteration: int,
               parent_age: int):
        nonlocal best
        if best is None or entry.fitness > best.fitness:
            best = entry
        row = {"iteration": iteration, "origin": origin, "age": entry.age,
               "parent_age": parent_age, "fitness": entry.fitness,
               "best_fitness": best.fitness}
        row.update(entry.config.to_dict())
        history.append(row)

    for _ in range(population_size):
        cfg = random_config(space, rng)
        entry = PopulationEntry(config=cfg, fitness=float(eval_fn(cfg, rng)),
                                age=age)
        age += 1
        population.append(entry)
        record(entry, "init", 0, parent_age=-1)

    for iteration in range(1, iterations + 1):
        picks = rng.choice(population_size, size=sample_size, replace=False)
        parent = max((population[int(i)] for i in picks),
                     key=lambda e: e.fitness)
        child_cfg = mutate(parent.config, space, rng)
        child = PopulationEntry(config=child_cfg,
                                fitness=float(eval_fn(child_cfg, rng)),
                                age=age)
        age += 1
        population.append(child)
        population.popleft()
        record(child, "mutation", iteration, parent_age=parent.age)

    return best, history


def write_audit_csv(history: list[dict], path) -> None:
    if not history:
        raise ValueError("empty history")
    columns = ["iteration", "origin", "age", "parent_age", "fitness",
               "best_fitness", *CONFIG_FIELDS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(history)


def save_best_config(entry: PopulationEntry, path) -> None:
    import json
    payload = {"fitness": entry.fitness, "age": entry.age,
               "config": entry.config.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
