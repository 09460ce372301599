"""Tabular ingestion and deterministic key:value prompt serialization.

A row is normalized into an ordered list of ``key:value`` fields and embedded
into a fixed instruction template. Serialization is pure and byte-stable:
the same instance always yields the same prompt, and any subset (coalition)
of its fields yields a prompt that differs from the full one only inside the
input block.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DatasetError, NormalizationError, SerializationError

NUMERIC = "numeric"
CATEGORICAL = "categorical"
LABEL = "label"
COLUMN_KINDS = (NUMERIC, CATEGORICAL, LABEL)

#: Value substituted for cells that are empty after trimming.
MISSING_VALUE = "unknown"

DEFAULT_INSTRUCTION = (
    "Classify the record given below. Answer with a single word naming the class."
)

_WS_RUN = re.compile(r"\s+")


def normalize_key(name: str) -> str:
    """Normalize a column name into a serializable field key.

    Lowercases, collapses whitespace runs to single underscores, and replaces
    colons with underscores so the serialized ``key:value`` token stays
    parseable at its first colon.
    """
    key = _WS_RUN.sub("_", name.strip().lower()).replace(":", "_")
    if not key:
        raise NormalizationError(f"column name {name!r} normalizes to an empty key")
    return key


def normalize_value(raw: str, kind: str, column: str | None = None) -> str:
    """Normalize a raw cell value for serialization.

    Numeric values are rendered as integer text with the fractional part
    truncated toward zero; categorical values are lowercased with every
    whitespace run replaced by a single underscore.

    Raises:
        NormalizationError: if ``raw`` is empty after trimming or a numeric
            cell does not parse, naming ``column`` when given.
    """
    where = f" in column {column!r}" if column else ""
    trimmed = raw.strip()
    if not trimmed:
        raise NormalizationError(f"empty value{where}")
    if kind == NUMERIC:
        try:
            number = float(trimmed)
            return str(int(number))
        except (ValueError, OverflowError) as exc:
            raise NormalizationError(
                f"cannot parse numeric value {raw!r}{where}"
            ) from exc
    if kind == CATEGORICAL:
        return _WS_RUN.sub("_", trimmed.lower())
    raise ValueError(f"unknown column kind {kind!r}")


@dataclass(frozen=True)
class FeatureField:
    """One normalized ``key:value`` field of an instance.

    ``raw_value`` keeps the pre-normalization cell text for reporting.
    """

    key: str
    value: str
    raw_value: str = ""

    def __post_init__(self):
        if not self.key or self.key != self.key.lower():
            raise ValueError(f"field key {self.key!r} must be non-empty lowercase")
        if _WS_RUN.search(self.key) or ":" in self.key:
            raise ValueError(f"field key {self.key!r} may not contain whitespace or ':'")
        if not self.value:
            raise ValueError(f"field {self.key!r} has an empty value")
        if _WS_RUN.search(self.value):
            raise ValueError(f"value {self.value!r} of field {self.key!r} contains whitespace")

    @property
    def serialized(self) -> str:
        return f"{self.key}:{self.value}"


@dataclass(frozen=True)
class TabularInstance:
    """One dataset row: an ordered tuple of fields plus an optional label."""

    index: int
    fields: tuple[FeatureField, ...]
    label: str | None = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("instance index must be non-negative")
        if not self.fields:
            raise ValueError("an instance needs at least one field")
        keys = [f.key for f in self.fields]
        if len(set(keys)) != len(keys):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise ValueError(f"duplicate field keys: {', '.join(dupes)}")

    @property
    def num_features(self) -> int:
        return len(self.fields)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(f.key for f in self.fields)

    def fields_at(self, members: Iterable[int]) -> tuple[FeatureField, ...]:
        """Fields for the given index set, in instance order."""
        picked = sorted(set(members))
        if picked and (picked[0] < 0 or picked[-1] >= len(self.fields)):
            raise ValueError(f"feature indices {picked} out of range for M={len(self.fields)}")
        return tuple(self.fields[i] for i in picked)

    def fields_without_keys(self, removed: Iterable[str]) -> tuple[FeatureField, ...]:
        """Fields remaining after removing the given keys, in instance order."""
        gone = set(removed)
        unknown = gone - set(self.keys)
        if unknown:
            raise ValueError(f"keys not in instance {self.index}: {sorted(unknown)}")
        return tuple(f for f in self.fields if f.key not in gone)


@dataclass(frozen=True)
class PromptTemplate:
    """Fixed framing around the serialized feature string.

    The built prompt is::

        {instruction}\\n\\n{input_marker}\\n{features}\\n\\n{response_marker}{suffix}

    Everything outside the feature string is byte-identical across all
    coalitions of an instance. ``suffix`` makes the bytes after the response
    marker exactly configurable (some deployments end flush at the marker,
    others expect a trailing newline).
    """

    instruction: str = DEFAULT_INSTRUCTION
    input_marker: str = "### Input:"
    response_marker: str = "### Response:"
    suffix: str = "\n"

    def __post_init__(self):
        if not self.input_marker or not self.response_marker:
            raise ValueError("markers must be non-empty")
        if self.input_marker in self.response_marker or self.response_marker in self.input_marker:
            raise ValueError("markers must not contain each other")
        for name, text in (("instruction", self.instruction), ("suffix", self.suffix)):
            if self.input_marker in text or self.response_marker in text:
                raise ValueError(f"{name} must not contain a marker")


def serialize_features(coalition_fields: Sequence[FeatureField]) -> str:
    """Concatenate fields into the space-delimited ``k1:v1 k2:v2 ...`` string.

    Raises:
        SerializationError: on an empty field list; empty coalitions are
            never serialized.
    """
    if not coalition_fields:
        raise SerializationError("cannot serialize an empty coalition")
    return " ".join(f.serialized for f in coalition_fields)


def parse_features(serialized: str) -> list[tuple[str, str]]:
    """Invert :func:`serialize_features`: split on spaces, then at the first colon."""
    pairs = []
    for token in serialized.split(" "):
        key, sep, value = token.partition(":")
        if not sep:
            raise SerializationError(f"token {token!r} has no colon")
        pairs.append((key, value))
    return pairs


def build_prompt(template: PromptTemplate, coalition_fields: Sequence[FeatureField]) -> str:
    """Embed the serialized coalition into the fixed template.

    Absent features leave no residue: no double spaces, no dangling
    separators. Propagates :class:`SerializationError` for empty coalitions.
    """
    features = serialize_features(coalition_fields)
    return (
        f"{template.instruction}\n\n{template.input_marker}\n"
        f"{features}\n\n{template.response_marker}{template.suffix}"
    )


def input_block(template: PromptTemplate, prompt: str) -> str:
    """Extract the feature string between the template markers."""
    start = prompt.index(template.input_marker) + len(template.input_marker)
    end = prompt.index(template.response_marker)
    return prompt[start:end].strip("\n")


def load_schema(path: str | Path) -> dict[str, str]:
    """Load a column-kind schema: JSON mapping column name -> numeric|categorical|label."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read schema {path}: {exc}") from exc
    try:
        schema = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"schema {path} is not valid JSON: {exc}") from exc
    if not isinstance(schema, dict) or not schema:
        raise DatasetError(f"schema {path} must be a non-empty JSON object")
    bad = {c: k for c, k in schema.items() if k not in COLUMN_KINDS}
    if bad:
        raise DatasetError(f"schema {path} has unknown kinds: {bad}")
    labels = [c for c, k in schema.items() if k == LABEL]
    if len(labels) > 1:
        raise DatasetError(f"schema {path} declares multiple label columns: {labels}")
    return dict(schema)


def load_dataset(path: str | Path, schema: Mapping[str, str]) -> list[TabularInstance]:
    """Load a header-rowed CSV into normalized instances.

    Field order is the CSV column order (never sorted); instance index equals
    data-row position. Cells empty after trimming become ``unknown``.

    Raises:
        DatasetError: unreadable file, header/schema mismatch, duplicate
            normalized keys, or row arity mismatch (reported with row number).
    """
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected a header row") from None
        header = [column.strip() for column in header]
        missing = [column for column in schema if column not in header]
        if missing:
            raise DatasetError(f"{path}: schema columns missing from header: {missing}")
        unknown = [column for column in header if column not in schema]
        if unknown:
            raise DatasetError(f"{path}: header columns not in schema: {unknown}")

        feature_columns = [c for c in header if schema[c] != LABEL]
        label_column = next((c for c in header if schema[c] == LABEL), None)
        keys = [normalize_key(c) for c in feature_columns]
        if len(set(keys)) != len(keys):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise DatasetError(f"{path}: columns normalize to duplicate keys: {dupes}")
        positions = {c: header.index(c) for c in header}

        instances: list[TabularInstance] = []
        for row_number, row in enumerate(reader):
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {row_number + 2} has {len(row)} cells, expected {len(header)}"
                )
            fields = []
            for column, key in zip(feature_columns, keys):
                raw = row[positions[column]]
                if not raw.strip():
                    value = MISSING_VALUE
                else:
                    try:
                        value = normalize_value(raw, schema[column], column=column)
                    except NormalizationError as exc:
                        raise DatasetError(f"{path}: row {row_number + 2}: {exc}") from exc
                fields.append(FeatureField(key=key, value=value, raw_value=raw))
            label = None
            if label_column is not None:
                raw_label = row[positions[label_column]]
                if raw_label.strip():
                    label = normalize_value(raw_label, CATEGORICAL)
            instances.append(TabularInstance(index=row_number, fields=tuple(fields), label=label))
    return instances


def load_template(path: str | Path) -> PromptTemplate:
    """Load a prompt template.

    ``.json`` files may set any of ``instruction``, ``input_marker``,
    ``response_marker``, ``suffix``; any other file supplies the instruction
    text verbatim (trailing newline stripped) with default markers.
    """
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise DatasetError(f"template {path} must be a JSON object")
        allowed = {"instruction", "input_marker", "response_marker", "suffix"}
        unknown = set(data) - allowed
        if unknown:
            raise DatasetError(f"template {path} has unknown keys: {sorted(unknown)}")
        return PromptTemplate(**data)
    return PromptTemplate(instruction=text.rstrip("\n"))
