"""Stochastic ensembles: sample members, accumulate scores, sweep error vs. size."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .hw import MuxRounderConfig, hw_project_model
from .inference import forward
from .model import DiscreteModelInstance, NetworkModel, ProjectionMode
from .projection import RandomSource, project


@dataclass(frozen=True)
class ExactProjection:
    """Ideal-randomness projection."""

    def describe(self) -> str:
        return "exact"


@dataclass(frozen=True)
class HardwareRounder:
    config: MuxRounderConfig = field(default_factory=MuxRounderConfig)
    lanes: int = 1

    def describe(self) -> str:
        c = self.config
        return f"hw:{c.select_source.value}:N{c.n_inputs}:M{c.modulator_width}:lanes{self.lanes}"


Sampler = Union[ExactProjection, HardwareRounder]


def sample_member(model: NetworkModel, mode, sampler: Sampler, rng: RandomSource) -> DiscreteModelInstance:
    mode = ProjectionMode(mode)
    if isinstance(sampler, HardwareRounder):
        if mode is not ProjectionMode.TERNARY:
            raise ValueError("the multiplexer rounder produces ternary weights only")
        return hw_project_model(model, sampler.config, rng, lanes=sampler.lanes)
    return project(model, mode, rng)


def aggregate(scores_list: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum of member scores."""
    if len(scores_list) == 0:
        raise ValueError("aggregate needs at least one member")
    out = np.array(scores_list[0], dtype=np.float64, copy=True)
    for s in scores_list[1:]:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != out.shape:
            raise ValueError(f"score shape mismatch: {s.shape} vs {out.shape}")
        out += s
    return out


def decide(scores) -> Union[int, np.ndarray]:
    """Argmax over the last axis; ties go to the lowest class index."""
    s = np.asarray(scores)
    if s.shape[-1] == 0:
        raise ValueError("empty scores")
    d = np.argmax(s, axis=-1)
    return int(d) if d.ndim == 0 else d


def _votes(decisions: np.ndarray, num_classes: int) -> np.ndarray:
    """decisions (K, B) -> one-hot vote counts (B, C)."""
    return np.eye(num_classes)[decisions].sum(axis=0)


@dataclass(frozen=True)
class EnsembleConfig:
    member_counts: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    projection: ProjectionMode = ProjectionMode.TERNARY
    sampler: Sampler = field(default_factory=ExactProjection)
    trials: int = 20
    base_seed: int = 0
    nested: bool = True
    aggregation: str = "sum"

    def __post_init__(self):
        ks = tuple(sorted(set(int(k) for k in self.member_counts)))
        if not ks or ks[0] < 1:
            raise ValueError("member counts must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.aggregation not in ("sum", "vote"):
            raise ValueError("aggregation must be 'sum' or 'vote'")
        object.__setattr__(self, "member_counts", ks)
        object.__setattr__(self, "projection", ProjectionMode(self.projection))

    def to_dict(self) -> dict:
        return {"member_counts": list(self.member_counts), "projection": self.projection.value,
                "sampler": self.sampler.describe(), "trials": self.trials,
                "base_seed": self.base_seed, "nested": self.nested,
                "aggregation": self.aggregation}


@dataclass
class EnsembleRunReport:
    member_counts: tuple[int, ...]
    errors: np.ndarray          # (trials, len(member_counts))
    config: EnsembleConfig

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        # sample convention; a single trial has no spread to report
        if self.errors.shape[0] < 2:
            return np.zeros(self.errors.shape[1])
        return self.errors.std(axis=0, ddof=1)

    def at(self, k: int) -> tuple[float, float]:
        i = self.member_counts.index(k)
        return float(self.mean[i]), float(self.std[i])

    def rows(self) -> list[tuple]:
        c = self.config
        return [(k, float(m), float(s), c.trials, c.sampler.describe(), c.projection.value, c.base_seed)
                for k, m, s in zip(self.member_counts, self.mean, self.std)]

    CSV_COLUMNS = ("K", "mean_error", "std_error", "trials", "sampler_mode", "projection_mode", "seed")


def member_rng(base_seed: int, trial: int, member: int, k: Optional[int] = None) -> RandomSource:
    root = RandomSource(base_seed)
    if k is None:
        return root.derive("trial", trial, "member", member)
    return root.derive("trial", trial, "k", k, "member", member)


def _member_scores(model, dataset, config, rngs) -> list[np.ndarray]:
    return [forward(sample_member(model, config.projection, config.sampler, r), dataset.features)
            for r in rngs]


def _errors_from_members(scores: list[np.ndarray], labels: np.ndarray, aggregation: str,
                         num_classes: int) -> np.ndarray:
    """Error rate of the first-K ensemble for every K = 1..len(scores)."""
    if aggregation == "sum":
        acc = np.cumsum(np.stack(scores), axis=0)
    else:
        dec = np.stack([decide(s) for s in scores])
        acc = np.stack([_votes(dec[:k + 1], num_classes) for k in range(len(scores))])
    return (decide(acc) != labels[None, :]).mean(axis=1)


def _run_trial(model, dataset, config: EnsembleConfig, t: int) -> np.ndarray:
    ks = config.member_counts
    if config.nested:
        scores = _member_scores(model, dataset, config,
                                [member_rng(config.base_seed, t, m) for m in range(ks[-1])])
        curve = _errors_from_members(scores, dataset.labels, config.aggregation, model.num_classes)
        return np.array([curve[k - 1] for k in ks])
    row = []
    for k in ks:
        scores = _member_scores(model, dataset, config,
                                [member_rng(config.base_seed, t, m, k) for m in range(k)])
        row.append(_errors_from_members(scores, dataset.labels, config.aggregation,
                                        model.num_classes)[-1])
    return np.array(row)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BITSTORM_THREADS", "1")))
    except ValueError:
        return 1


def ensemble_error_curve(model: NetworkModel, dataset: Dataset, config: EnsembleConfig) -> EnsembleRunReport:
    """Classification error vs. ensemble size, repeated over ``config.trials``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    workers = min(worker_count(), config.trials)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(lambda t: _run_trial(model, dataset, config, t), range(config.trials)))
    else:
        rows = [_run_trial(model, dataset, config, t) for t in range(config.trials)]
    return EnsembleRunReport(config.member_counts, np.stack(rows), config)


def error_rate(net, dataset: Dataset) -> float:
    return float(np.mean(decide(forward(net, dataset.features)) != dataset.labels))
