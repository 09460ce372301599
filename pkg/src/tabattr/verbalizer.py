"""Class aggregation of top-K token probabilities.

A verbalizer maps each class label to the set of token surface forms that
count as that class. Raw class masses are sums of ``exp(logprob)`` over
matching top-K entries; normalizing over the class subspace yields the
distribution compared by the attribution divergences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .backends import TopKDistribution
from .errors import ConfigError


def canonicalize_token(token: str) -> str:
    """Strip surrounding whitespace and lowercase; no stemming, no reassembly."""
    return token.strip().lower()


@dataclass(frozen=True)
class VerbalizerMap:
    """Ordered class labels plus their (canonicalized, disjoint) surface sets."""

    classes: tuple[str, ...]
    surface_sets: Mapping[str, frozenset[str]]

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("verbalizer needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class labels in verbalizer")
        if set(self.surface_sets) != set(self.classes):
            raise ConfigError("surface_sets must cover exactly the class labels")
        seen: dict[str, str] = {}
        for label in self.classes:
            forms = self.surface_sets[label]
            if not forms:
                raise ConfigError(f"class {label!r} has an empty surface set")
            for form in forms:
                if form != canonicalize_token(form):
                    raise ConfigError(f"surface form {form!r} is not canonical")
                if form in seen:
                    raise ConfigError(
                        f"surface form {form!r} claimed by both {seen[form]!r} and {label!r}"
                    )
                seen[form] = label

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str]]) -> "VerbalizerMap":
        """Build from ``{class: [surface forms...]}``, canonicalizing each form."""
        classes = tuple(mapping)
        surface_sets = {
            label: frozenset(canonicalize_token(f) for f in forms)
            for label, forms in mapping.items()
        }
        return cls(classes=classes, surface_sets=surface_sets)

    @classmethod
    def from_json(cls, path: str | Path) -> "VerbalizerMap":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load verbalizer {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"verbalizer {path} must be a JSON object")
        return cls.from_mapping(data)

    def class_of(self, token: str) -> str | None:
        canon = canonicalize_token(token)
        for label in self.classes:
            if canon in self.surface_sets[label]:
                return label
        return None

    def to_payload(self) -> dict:
        return {label: sorted(self.surface_sets[label]) for label in self.classes}


class NormalizedDistribution(NamedTuple):
    """A class distribution plus the zero-mass degeneracy flag."""

    probs: np.ndarray
    degenerate: bool


def aggregate_raw(topk: TopKDistribution, vmap: VerbalizerMap) -> np.ndarray:
    """Raw class masses: sum exp(logprob) over entries whose canonical token
    belongs to the class; entries matching no class are ignored."""
    index = {label: i for i, label in enumerate(vmap.classes)}
    raw = np.zeros(len(vmap.classes))
    for entry in topk.entries:
        label = vmap.class_of(entry.token)
        if label is not None:
            raw[index[label]] += np.exp(entry.logprob)
    return raw


def normalize_classes(raw: np.ndarray) -> NormalizedDistribution:
    """Normalize raw masses over the class subspace.

    Zero total mass is not fatal: the result falls back to the uniform
    distribution with ``degenerate=True`` so callers can audit the event.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.size == 0:
        raise ValueError("raw masses must be a non-empty 1-D vector")
    if np.any(raw < 0):
        raise ValueError("raw masses must be non-negative")
    total = raw.sum()
    if total > 0:
        return NormalizedDistribution(raw / total, False)
    return NormalizedDistribution(np.full(raw.size, 1.0 / raw.size), True)


def class_distribution(topk: TopKDistribution, vmap: VerbalizerMap) -> NormalizedDistribution:
    """Aggregate then normalize: the full top-K -> class-distribution pipeline."""
    return normalize_classes(aggregate_raw(topk, vmap))
