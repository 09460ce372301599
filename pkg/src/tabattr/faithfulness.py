"""Sequential-deletion faithfulness curves.

Features are removed from the prompt in ranked order, most important first,
and the probability mass the (re-normalized) class distribution keeps on the
ORIGINALLY predicted class is tracked per step. A ranking is more faithful
when its curve drops faster, i.e. has a lower area under the curve.

Step t removes the top-t ranked fields; step 0 is the unperturbed prompt, so
every ranking source shares identical step-0 values per instance. The step
axis is reported both as an absolute count and as a fraction of the mean
feature count over evaluated instances.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .backends import Backend, evaluate_prompts
from .errors import BackendError, RankingError
from .tabular import PromptTemplate, TabularInstance, build_prompt
from .verbalizer import VerbalizerMap, class_distribution

RANKING_SOURCES = ("jsd", "kl", "l1", "external", "random")


@dataclass(frozen=True)
class RankingOrder:
    """A removal order for one instance: feature keys, most important first."""

    instance_index: int
    source: str
    keys: tuple[str, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(set(self.keys)) != len(self.keys):
            raise RankingError(f"duplicate keys in ranking for instance {self.instance_index}")
        if not self.keys:
            raise RankingError(f"empty ranking for instance {self.instance_index}")


class PredictedClass(NamedTuple):
    index: int
    tie: bool


def predicted_class(full_dist) -> PredictedClass:
    """Argmax class; exact ties go to the lowest class index and are flagged."""
    dist = np.asarray(full_dist, dtype=float)
    if dist.ndim != 1 or dist.size == 0:
        raise ValueError("distribution must be a non-empty vector")
    top = int(np.argmax(dist))
    tie = int(np.sum(dist == dist[top])) > 1
    return PredictedClass(top, tie)


def random_order(instance: TabularInstance, seed: int) -> RankingOrder:
    """Uniform random permutation of the instance's keys, seed-reproducible."""
    rng = np.random.default_rng(seed)
    keys = tuple(instance.keys[i] for i in rng.permutation(instance.num_features))
    return RankingOrder(instance.index, "random", keys, seed=seed)


@dataclass(frozen=True)
class ExternalRanking:
    """A ranking file: one global order broadcast to all instances, or one per instance."""

    global_keys: tuple[str, ...] | None = None
    per_instance: Mapping[int, tuple[str, ...]] | None = None

    def order_for(self, instance: TabularInstance) -> RankingOrder:
        if self.global_keys is not None:
            keys = self.global_keys
        else:
            assert self.per_instance is not None
            if instance.index not in self.per_instance:
                raise RankingError(f"external ranking has no entry for instance {instance.index}")
            keys = self.per_instance[instance.index]
        unknown = [k for k in keys if k not in instance.keys]
        if unknown:
            raise RankingError(
                f"external ranking names keys absent from instance {instance.index}: {unknown}"
            )
        return RankingOrder(instance.index, "external", keys)


def load_external_ranking(path: str | Path, valid_keys: Sequence[str]) -> ExternalRanking:
    """Load ``{"global": [keys]}`` or ``{"per_instance": {index: [keys]}}``.

    Raises:
        RankingError: unreadable/empty file or any key not in ``valid_keys``.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RankingError(f"cannot load external ranking {path}: {exc}") from exc
    known = set(valid_keys)

    def _check(keys, where: str) -> tuple[str, ...]:
        keys = tuple(str(k) for k in keys)
        if not keys:
            raise RankingError(f"{path}: empty ranking for {where}")
        unknown = [k for k in keys if k not in known]
        if unknown:
            raise RankingError(f"{path}: unknown feature keys for {where}: {unknown}")
        return keys

    if isinstance(data, dict) and "global" in data:
        return ExternalRanking(global_keys=_check(data["global"], "global"))
    if isinstance(data, dict) and "per_instance" in data:
        per = {
            int(idx): _check(keys, f"instance {idx}")
            for idx, keys in data["per_instance"].items()
        }
        if not per:
            raise RankingError(f"{path}: per_instance ranking is empty")
        return ExternalRanking(per_instance=per)
    raise RankingError(f"{path}: expected a 'global' or 'per_instance' ranking object")


@dataclass(frozen=True)
class DeletionCurve:
    """Mean predicted-class probability per deletion step, for one source."""

    source: str
    steps: tuple[int, ...]
    fractions: tuple[float, ...]
    mean_probs: tuple[float, ...]
    counts: tuple[int, ...]
    traces: Mapping[int, tuple[float, ...]]
    n_instances: int

    def to_payload(self) -> dict:
        return {
            "source": self.source,
            "steps": list(self.steps),
            "fractions": list(self.fractions),
            "mean_probs": list(self.mean_probs),
            "counts": list(self.counts),
            "n_instances": self.n_instances,
            "traces": {str(i): list(t) for i, t in sorted(self.traces.items())},
        }


@dataclass(frozen=True)
class DeletionRun:
    """All curves of one run plus the symmetric-drop bookkeeping."""

    curves: Mapping[str, DeletionCurve]
    dropped: tuple[int, ...]
    mean_features: float
    tie_count: int


def curve_auc(curve: DeletionCurve) -> float:
    """Trapezoidal area under mean probability vs. fraction removed.

    Lower is better: a faithful ordering destroys the predicted-class mass
    early.
    """
    if len(curve.steps) < 2:
        raise ValueError("a curve needs at least 2 steps for an area")
    return float(np.trapezoid(curve.mean_probs, curve.fractions))


def run_deletion(
    instances: Sequence[TabularInstance],
    rankings: Mapping[str, Mapping[int, RankingOrder]],
    backend: Backend,
    template: PromptTemplate,
    vmap: VerbalizerMap,
    max_removals: int = 10,
    top_k: int = 10,
    workers: int = 1,
) -> DeletionRun:
    """Run the deletion protocol for every source over the same instances.

    Per instance: the full prompt fixes the predicted class; then for
    t = 1..min(max_removals, M - 1) the top-t ranked features are omitted
    and the new distribution's mass on that original class is recorded.
    The final feature is never deleted (prompts never go empty).

    An instance whose backend calls fail is dropped from ALL sources
    symmetrically and counted in the run metadata.

    Raises:
        RankingError: a source misses an instance or names unknown keys.
        ValueError: ``max_removals`` < 1 or no instances.
    """
    if max_removals < 1:
        raise ValueError("max_removals must be >= 1")
    if not instances:
        raise ValueError("no instances to evaluate")
    for source, per_instance in rankings.items():
        for instance in instances:
            if instance.index not in per_instance:
                raise RankingError(f"source {source!r} has no ranking for instance {instance.index}")

    # traces[source][index] -> [p0, p1, ...]; built per instance so a failure
    # can drop the instance everywhere before anything is recorded.
    traces: dict[str, dict[int, tuple[float, ...]]] = {s: {} for s in rankings}
    dropped: list[int] = []
    tie_count = 0

    for instance in instances:
        plan: dict[str, list[str]] = {}
        for source, per_instance in rankings.items():
            order = per_instance[instance.index]
            unknown = [k for k in order.keys if k not in instance.keys]
            if unknown:
                raise RankingError(
                    f"source {source!r} ranking names keys absent from instance "
                    f"{instance.index}: {unknown}"
                )
            plan[source] = list(order.keys)

        full_prompt = build_prompt(template, instance.fields)
        prompts = [full_prompt]
        for source, order_keys in plan.items():
            t_max = min(max_removals, instance.num_features - 1, len(order_keys))
            for t in range(1, t_max + 1):
                fields = instance.fields_without_keys(order_keys[:t])
                prompts.append(build_prompt(template, fields))
        try:
            responses = evaluate_prompts(backend, prompts, top_k, workers=workers)
        except BackendError:
            dropped.append(instance.index)
            continue

        full_dist, _ = class_distribution(responses[full_prompt], vmap)
        target = predicted_class(full_dist)
        tie_count += int(target.tie)
        for source, order_keys in plan.items():
            t_max = min(max_removals, instance.num_features - 1, len(order_keys))
            trace = [float(full_dist[target.index])]
            for t in range(1, t_max + 1):
                fields = instance.fields_without_keys(order_keys[:t])
                dist, _ = class_distribution(responses[build_prompt(template, fields)], vmap)
                trace.append(float(dist[target.index]))
            traces[source][instance.index] = tuple(trace)

    kept = [i for i in instances if i.index not in set(dropped)]
    if not kept:
        raise BackendError(f"all {len(instances)} instances failed; no curves to report")
    mean_features = float(np.mean([i.num_features for i in kept]))

    curves = {}
    for source, per_instance_traces in traces.items():
        longest = max(len(t) for t in per_instance_traces.values())
        steps = tuple(range(longest))
        mean_probs = []
        counts = []
        for t in steps:
            at_t = [trace[t] for trace in per_instance_traces.values() if len(trace) > t]
            counts.append(len(at_t))
            mean_probs.append(float(np.mean(at_t)))
        curves[source] = DeletionCurve(
            source=source,
            steps=steps,
            fractions=tuple(t / mean_features for t in steps),
            mean_probs=tuple(mean_probs),
            counts=tuple(counts),
            traces=dict(sorted(per_instance_traces.items())),
            n_instances=len(kept),
        )
    return DeletionRun(
        curves=curves,
        dropped=tuple(dropped),
        mean_features=mean_features,
        tie_count=tie_count,
    )


def write_curves_csv(run: DeletionRun, path: str | Path) -> None:
    """One row per (source, step): source, step, fraction_removed, mean_prob, n_instances."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["source", "step", "fraction_removed", "mean_prob", "n_instances"])
        for source in run.curves:
            curve = run.curves[source]
            for t, frac, prob, count in zip(
                curve.steps, curve.fractions, curve.mean_probs, curve.counts
            ):
                writer.writerow([source, t, repr(frac), repr(prob), count])


def write_curves_json(run: DeletionRun, path: str | Path) -> None:
    """Full run dump including per-instance traces and the drop bookkeeping."""
    payload = {
        "mean_features": run.mean_features,
        "dropped_instances": list(run.dropped),
        "tie_count": run.tie_count,
        "curves": {source: curve.to_payload() for source, curve in run.curves.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
