"""Sampled-coalition feature attribution.

The estimator always evaluates the M leave-one-out ("essential") coalitions,
adds random distinct non-empty coalitions up to ``floor(((2^M - 1) - M) * r)``
capped at ``C_max - M``, scores every coalition by the bounded similarity of
its class distribution to the full-input distribution, and sets each
feature's raw score to the difference between the mean similarity of
coalitions that include it and of those that exclude it. Raw scores are
shifted by their minimum and normalized to sum to one.

This is a tractable sampled proxy for Shapley values, not the exact
weighted formula over all 2^M subsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backends import Backend, evaluate_prompts
from .divergence import METRICS, similarity
from .errors import AttributionError, BackendError, ConfigError
from .tabular import PromptTemplate, TabularInstance, build_prompt
from .verbalizer import VerbalizerMap, class_distribution


@dataclass(frozen=True)
class Coalition:
    """A non-empty subset of feature indices."""

    members: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))
        if not self.members:
            raise ValueError("coalitions must be non-empty")
        if min(self.members) < 0:
            raise ValueError("feature indices must be non-negative")

    def __contains__(self, j: int) -> bool:
        return j in self.members

    @property
    def sorted_members(self) -> tuple[int, ...]:
        return tuple(sorted(self.members))


@dataclass(frozen=True)
class SamplingConfig:
    """Estimator knobs. Defaults: ratio 0.4, cap 800 coalitions, top-10 logits."""

    ratio: float = 0.4
    max_coalitions: int = 800
    seed: int = 0
    metric: str = "jsd"
    top_k: int = 10

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.max_coalitions < 1:
            raise ConfigError("max_coalitions must be positive")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    def to_payload(self) -> dict:
        return {
            "ratio": self.ratio,
            "max_coalitions": self.max_coalitions,
            "seed": self.seed,
            "metric": self.metric,
            "top_k": self.top_k,
        }

    @classmethod
    def from_payload(cls, data: Mapping) -> "SamplingConfig":
        return cls(
            ratio=float(data["ratio"]),
            max_coalitions=int(data["max_coalitions"]),
            seed=int(data["seed"]),
            metric=str(data["metric"]),
            top_k=int(data["top_k"]),
        )


@dataclass(frozen=True)
class CoalitionRecord:
    """One evaluated coalition: its class distribution and similarity."""

    coalition: Coalition
    class_dist: tuple[float, ...]
    similarity: float
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity {self.similarity} out of [0, 1]")

    def to_payload(self) -> dict:
        return {
            "members": list(self.coalition.sorted_members),
            "class_dist": list(self.class_dist),
            "similarity": self.similarity,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_payload(cls, data: Mapping) -> "CoalitionRecord":
        return cls(
            coalition=Coalition(frozenset(data["members"])),
            class_dist=tuple(data["class_dist"]),
            similarity=float(data["similarity"]),
            degenerate=bool(data["degenerate"]),
        )


@dataclass(frozen=True)
class AttributionResult:
    """Normalized importance scores plus everything needed to audit them."""

    instance_index: int
    metric: str
    feature_keys: tuple[str, ...]
    phi: np.ndarray
    raw_phi: np.ndarray
    records: tuple[CoalitionRecord, ...]
    full_dist: tuple[float, ...]
    full_degenerate: bool
    uniform_fallback: bool
    seed: int
    config: SamplingConfig

    @property
    def degeneracy_count(self) -> int:
        return sum(1 for r in self.records if r.degenerate) + int(self.full_degenerate)

    def ranking(self) -> tuple[str, ...]:
        """Feature keys most-important first; ties keep instance field order."""
        order = np.argsort(-self.phi, kind="stable")
        return tuple(self.feature_keys[i] for i in order)

    def to_payload(self) -> dict:
        return {
            "instance_index": self.instance_index,
            "metric": self.metric,
            "phi": {k: float(v) for k, v in zip(self.feature_keys, self.phi)},
            "raw_phi": [float(v) for v in self.raw_phi],
            "feature_keys": list(self.feature_keys),
            "full_dist": list(self.full_dist),
            "seed": self.seed,
            "coalition_count": len(self.records),
            "degeneracy_flags": {
                "uniform_phi_fallback": self.uniform_fallback,
                "full_prompt_degenerate": self.full_degenerate,
                "degenerate_coalitions": sum(1 for r in self.records if r.degenerate),
            },
            "config": self.config.to_payload(),
            "records": [r.to_payload() for r in self.records],
        }

    @classmethod
    def from_payload(cls, data: Mapping) -> "AttributionResult":
        keys = tuple(data["feature_keys"])
        flags = data["degeneracy_flags"]
        return cls(
            instance_index=int(data["instance_index"]),
            metric=str(data["metric"]),
            feature_keys=keys,
            phi=np.array([data["phi"][k] for k in keys], dtype=float),
            raw_phi=np.array(data["raw_phi"], dtype=float),
            records=tuple(CoalitionRecord.from_payload(r) for r in data["records"]),
            full_dist=tuple(data["full_dist"]),
            full_degenerate=bool(flags["full_prompt_degenerate"]),
            uniform_fallback=bool(flags["uniform_phi_fallback"]),
            seed=int(data["seed"]),
            config=SamplingConfig.from_payload(data["config"]),
        )


def essential_coalitions(m: int) -> list[Coalition]:
    """The M leave-one-out coalitions; the j-th omits exactly feature j.

    M = 1 is rejected: its only leave-one-out set would be empty, which the
    sampler never evaluates.
    """
    if m < 2:
        raise ValueError(f"leave-one-out coalitions need M >= 2, got {m}")
    everyone = frozenset(range(m))
    return [Coalition(everyone - {j}) for j in range(m)]


def n_extra(m: int, ratio: float, max_coalitions: int) -> int:
    """Number of additional random coalitions beyond the M essential ones."""
    proposed = math.floor(((2**m - 1) - m) * ratio)
    return min(proposed, max(0, max_coalitions - m))


def sample_extra(
    m: int,
    ratio: float,
    max_coalitions: int,
    seed: int,
    essential: Sequence[Coalition],
) -> list[Coalition]:
    """Draw distinct non-empty coalitions uniformly, excluding essential ones.

    The full coalition may be drawn (its similarity is 1 by identity). For
    small powersets the draw enumerates and shuffles; otherwise membership
    coin-flips with rejection keep the draw uniform without materializing
    2^M subsets. Reproducible from ``seed``.
    """
    if m < 2:
        raise ValueError(f"sampling needs M >= 2, got {m}")
    target = n_extra(m, ratio, max_coalitions)
    if target <= 0:
        return []
    rng = np.random.default_rng(seed)
    excluded = {c.members for c in essential}

    if 2**m - 1 <= 4 * max_coalitions:
        masks = np.arange(1, 2**m, dtype=np.int64)
        rng.shuffle(masks)
        chosen: list[Coalition] = []
        for mask in masks:
            members = frozenset(j for j in range(m) if mask >> j & 1)
            if members in excluded:
                continue
            chosen.append(Coalition(members))
            if len(chosen) == target:
                break
        return chosen

    drawn: list[Coalition] = []
    seen: set[frozenset[int]] = set(excluded)
    while len(drawn) < target:
        flips = rng.integers(0, 2, size=m)
        members = frozenset(np.flatnonzero(flips).tolist())
        if not members or members in seen:
            continue
        seen.add(members)
        drawn.append(Coalition(members))
    return drawn


def normalize_phi(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Shift by the minimum and normalize to sum to one.

    An all-equal raw vector would shift to zeros; that degenerates to the
    uniform vector with the fallback flag set instead of dividing by zero.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.size < 2:
        raise ValueError("raw scores must be a vector of length >= 2")
    shifted = raw - raw.min()
    total = shifted.sum()
    if total == 0.0:
        return np.full(raw.size, 1.0 / raw.size), True
    return shifted / total, False


def compute_attributions(
    instance: TabularInstance,
    backend: Backend,
    template: PromptTemplate,
    vmap: VerbalizerMap,
    config: SamplingConfig,
    workers: int = 1,
) -> AttributionResult:
    """Run the full estimator on one instance.

    Evaluates the full prompt once and every sampled coalition once; the
    result is a deterministic function of (instance, backend responses,
    seed, config) regardless of ``workers``.

    Raises:
        ValueError: fewer than 2 features.
        ConfigError: ``max_coalitions`` below the instance's feature count.
        AttributionError: any backend failure; no partial result is kept.
    """
    m = instance.num_features
    if m < 2:
        raise ValueError(f"attribution needs at least 2 features, instance has {m}")
    if config.max_coalitions < m:
        raise ConfigError(
            f"max_coalitions={config.max_coalitions} is below M={m} for instance "
            f"{instance.index}; every essential coalition must fit"
        )

    coalitions = essential_coalitions(m)
    coalitions += sample_extra(m, config.ratio, config.max_coalitions, config.seed, coalitions)
    prompts = [build_prompt(template, instance.fields_at(c.members)) for c in coalitions]
    full_prompt = build_prompt(template, instance.fields)

    try:
        responses = evaluate_prompts(
            backend, [full_prompt] + prompts, config.top_k, workers=workers
        )
    except BackendError as exc:
        raise AttributionError(f"instance {instance.index}: backend failed: {exc}") from exc

    full_dist, full_degenerate = class_distribution(responses[full_prompt], vmap)
    records = []
    for coalition, prompt in zip(coalitions, prompts):
        dist, degenerate = class_distribution(responses[prompt], vmap)
        records.append(
            CoalitionRecord(
                coalition=coalition,
                class_dist=tuple(float(v) for v in dist),
                similarity=similarity(config.metric, full_dist, dist),
                degenerate=degenerate,
            )
        )

    membership = np.zeros((len(records), m), dtype=bool)
    for i, record in enumerate(records):
        membership[i, list(record.coalition.members)] = True
    sims = np.array([r.similarity for r in records])
    # Essential leave-one-out sets guarantee every feature is present in at
    # least one coalition and absent from at least one, so both means exist.
    with_mean = np.array([sims[membership[:, j]].mean() for j in range(m)])
    without_mean = np.array([sims[~membership[:, j]].mean() for j in range(m)])
    raw_phi = with_mean - without_mean
    phi, fallback = normalize_phi(raw_phi)

    return AttributionResult(
        instance_index=instance.index,
        metric=config.metric,
        feature_keys=instance.keys,
        phi=phi,
        raw_phi=raw_phi,
        records=tuple(records),
        full_dist=tuple(float(v) for v in full_dist),
        full_degenerate=full_degenerate,
        uniform_fallback=fallback,
        seed=config.seed,
        config=config,
    )
