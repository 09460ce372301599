from __future__ import annotations

import math

import numpy as np
import pytest

from tabattr import (
    Backend,
    FeatureField,
    PromptTemplate,
    SyntheticBackend,
    SyntheticOracleSpec,
    TabularInstance,
    VerbalizerMap,
)
from tabattr.errors import BackendError

ADULT_KEYS = (
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education_num",
    "marital_status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital_gain",
    "capital_loss",
    "hours_per_week",
    "native_country",
)


def make_instance(index: int, keys, values=None, label=None) -> TabularInstance:
    values = values or [str(i + 1) for i in range(len(keys))]
    fields = tuple(
        FeatureField(key=k, value=str(v), raw_value=str(v)) for k, v in zip(keys, values)
    )
    return TabularInstance(index=index, fields=fields, label=label)


def adult_like_instance(index: int, rng: np.random.Generator) -> TabularInstance:
    values = [str(int(rng.integers(0, 1000))) for _ in ADULT_KEYS]
    # exercise values with underscores and an interior colon
    values[1] = "self_emp_not_inc"
    values[5] = "never_married"
    values[13] = "united_states:mainland"
    return make_instance(index, ADULT_KEYS, values)


def logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture
def template() -> PromptTemplate:
    return PromptTemplate()


@pytest.fixture
def yes_no_vmap() -> VerbalizerMap:
    return VerbalizerMap.from_mapping({"yes": ["yes"], "no": ["no"]})


def oracle_backend(weights: dict[str, float], bias: float = 0.0) -> SyntheticBackend:
    spec = SyntheticOracleSpec(classes=("yes", "no"), weights=weights, bias=bias)
    return SyntheticBackend(spec)


class FlakyBackend(Backend):
    """Delegates to an inner backend but fails for prompts containing a marker string."""

    def __init__(self, inner: Backend, poison: str):
        super().__init__()
        self.inner = inner
        self.poison = poison

    def _fetch(self, prompt, k):
        if self.poison in prompt:
            raise BackendError(f"injected failure for {self.poison!r}")
        return self.inner.query(prompt, k)
