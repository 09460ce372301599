"""Per-metric attribution caches and the shared instance-index manifest.

Ablation runs must score the SAME instances: the first run records its
selected indices in a manifest, and every later run (any metric) is rejected
loudly if it asks for a different index set. Each metric gets its own cache
file stamped with a configuration fingerprint covering everything that
changes prompts or scores; a mismatched fingerprint is an explicit
stale-cache error, never a silent recompute.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ._json_io import atomic_write_json, dump_canonical
from .attribution import AttributionResult, SamplingConfig
from .errors import CacheError, CorruptCacheError, IndexSetError, StaleCacheError
from .tabular import PromptTemplate
from .verbalizer import VerbalizerMap

#: Default cache file names, one per metric.
CACHE_NAMES = {
    "jsd": "tokenshap_validation_cache.json",
    "kl": "kl_validation_cache.json",
    "l1": "l1_validation_cache.json",
}

MANIFEST_NAME = "index_manifest.json"


def default_cache_name(metric: str) -> str:
    return CACHE_NAMES.get(metric, f"{metric}_validation_cache.json")


def config_fingerprint(
    config: SamplingConfig, template: PromptTemplate, vmap: VerbalizerMap
) -> str:
    """Hash of everything that changes prompts or scores."""
    payload = {
        "sampling": config.to_payload(),
        "template": {
            "instruction": template.instruction,
            "input_marker": template.input_marker,
            "response_marker": template.response_marker,
            "suffix": template.suffix,
        },
        "verbalizer": {
            "classes": list(vmap.classes),
            "surface_sets": vmap.to_payload(),
        },
    }
    return hashlib.sha256(dump_canonical(payload).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheManifest:
    """The instance subset shared by every metric's run, plus the seed that chose it."""

    selected_test_indices: tuple[int, ...]
    selection_seed: int | None = None

    @classmethod
    def load(cls, path: str | Path) -> "CacheManifest":
        data = _read_json(Path(path))
        return cls(
            selected_test_indices=tuple(int(i) for i in data["selected_test_indices"]),
            selection_seed=data.get("selection_seed"),
        )

    def save(self, path: str | Path) -> None:
        atomic_write_json(
            Path(path),
            {
                "selected_test_indices": list(self.selected_test_indices),
                "selection_seed": self.selection_seed,
            },
        )


def ensure_manifest(
    path: str | Path,
    indices: Sequence[int],
    selection_seed: int | None = None,
) -> CacheManifest:
    """Record the index selection on first use; afterwards enforce it exactly.

    Raises:
        IndexSetError: a later run requests indices diverging from the
            recorded ``selected_test_indices``.
    """
    path = Path(path)
    if path.exists():
        manifest = CacheManifest.load(path)
        if set(manifest.selected_test_indices) != set(indices):
            recorded = set(manifest.selected_test_indices)
            requested = set(indices)
            raise IndexSetError(
                f"{path}: requested indices diverge from the recorded selection: "
                f"missing={sorted(recorded - requested)} extra={sorted(requested - recorded)}"
            )
        return manifest
    manifest = CacheManifest(
        selected_test_indices=tuple(int(i) for i in indices),
        selection_seed=selection_seed,
    )
    manifest.save(path)
    return manifest


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CacheError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptCacheError(str(path), exc.pos, exc.msg) from exc


def load_or_compute(
    cache_path: str | Path,
    indices: Sequence[int],
    metric: str,
    compute_fn: Callable[[int], AttributionResult],
    fingerprint: str,
    manifest_path: str | Path | None = None,
    selection_seed: int | None = None,
) -> list[AttributionResult]:
    """Return attribution results for ``indices``, computing only cache misses.

    Cached entries are returned verbatim; anything missing is computed via
    ``compute_fn``, appended, and persisted atomically. When ``manifest_path``
    is given, the requested indices are checked against (or recorded as) the
    shared selection so every metric runs on the same instances.

    If ``compute_fn`` raises, entries computed so far are persisted before the
    error propagates, so a rerun resumes instead of repeating work.

    Raises:
        IndexSetError: divergent index request (see :func:`ensure_manifest`).
        StaleCacheError: fingerprint or metric mismatch with the cache file.
        CorruptCacheError: unparseable cache file.
        ValueError: empty or duplicated ``indices``.
    """
    indices = [int(i) for i in indices]
    if not indices:
        raise ValueError("indices must be non-empty")
    if len(set(indices)) != len(indices):
        raise ValueError("indices contain duplicates")

    selected: tuple[int, ...] = tuple(indices)
    if manifest_path is not None:
        manifest = ensure_manifest(manifest_path, indices, selection_seed)
        selected = manifest.selected_test_indices

    cache_path = Path(cache_path)
    entries: dict[str, dict] = {}
    if cache_path.exists():
        payload = _read_json(cache_path)
        if payload.get("fingerprint") != fingerprint:
            raise StaleCacheError(
                f"{cache_path}: cache fingerprint {payload.get('fingerprint')!r} does not "
                f"match the current configuration {fingerprint!r}; refusing to reuse or "
                "silently recompute"
            )
        if payload.get("metric") != metric:
            raise StaleCacheError(
                f"{cache_path}: cache holds metric {payload.get('metric')!r}, not {metric!r}"
            )
        entries = dict(payload["entries"])
        stray = [i for i in entries if int(i) not in set(selected)]
        if stray:
            raise CacheError(
                f"{cache_path}: entries outside selected_test_indices: {sorted(stray)}"
            )

    computed = False
    try:
        for idx in indices:
            if str(idx) in entries:
                continue
            result = compute_fn(idx)
            if result.instance_index != idx:
                raise ValueError(
                    f"compute_fn returned instance {result.instance_index} for index {idx}"
                )
            if result.metric != metric:
                raise ValueError(
                    f"compute_fn returned metric {result.metric!r}, expected {metric!r}"
                )
            entries[str(idx)] = result.to_payload()
            computed = True
    finally:
        if computed:
            atomic_write_json(
                cache_path,
                {
                    "metric": metric,
                    "fingerprint": fingerprint,
                    "selected_test_indices": list(selected),
                    "entries": entries,
                },
            )

    return [AttributionResult.from_payload(entries[str(idx)]) for idx in indices]
