from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from tabattr import (
    Coalition,
    PromptTemplate,
    SamplingConfig,
    compute_attributions,
    essential_coalitions,
    n_extra,
    normalize_phi,
    sample_extra,
)
from tabattr.attribution import AttributionResult
from tabattr.errors import AttributionError, ConfigError
from conftest import FlakyBackend, logistic, make_instance, oracle_backend


class TestCoalition:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Coalition(frozenset())

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            Coalition(frozenset({-1, 2}))

    def test_membership_and_order(self):
        c = Coalition(frozenset({3, 1}))
        assert 1 in c and 2 not in c
        assert c.sorted_members == (1, 3)


class TestSamplingConfig:
    def test_defaults_match_published_settings(self):
        config = SamplingConfig()
        assert (config.ratio, config.max_coalitions, config.top_k) == (0.4, 800, 10)

    @pytest.mark.parametrize("bad", [{"ratio": 0.0}, {"ratio": 1.2}, {"top_k": 0}, {"metric": "x"}])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigError):
            SamplingConfig(**bad)


class TestEssentialCoalitions:
    def test_m3_leave_one_out(self):
        members = [c.sorted_members for c in essential_coalitions(3)]
        assert members == [(1, 2), (0, 2), (0, 1)]

    def test_m1_rejected(self):
        with pytest.raises(ValueError):
            essential_coalitions(1)

    def test_m14_cardinality(self):
        coalitions = essential_coalitions(14)
        assert len(coalitions) == 14
        assert all(len(c.members) == 13 for c in coalitions)


class TestNExtra:
    def test_published_configuration_arithmetic(self):
        assert n_extra(14, 0.4, 800) == 786
        assert n_extra(13, 0.4, 800) == 787

    def test_small_m_full_ratio(self):
        assert n_extra(3, 1.0, 800) == 4

    def test_cap_floor_at_zero(self):
        assert n_extra(10, 0.5, 5) == 0


class TestSampleExtra:
    def test_m3_full_ratio_recovers_powerset(self):
        essential = essential_coalitions(3)
        extra = sample_extra(3, 1.0, 800, seed=1, essential=essential)
        everything = {c.members for c in essential} | {c.members for c in extra}
        expected = {
            frozenset(s)
            for r in range(1, 4)
            for s in itertools.combinations(range(3), r)
        }
        assert everything == expected
        assert len(extra) == 4

    def test_distinct_nonempty_and_disjoint_from_essential(self):
        essential = essential_coalitions(14)
        extra = sample_extra(14, 0.4, 800, seed=9, essential=essential)
        assert len(extra) == 786
        members = [c.members for c in extra]
        assert len(set(members)) == len(members)
        assert all(m for m in members)
        assert not (set(members) & {c.members for c in essential})

    def test_seed_reproducible(self):
        essential = essential_coalitions(12)
        a = sample_extra(12, 0.3, 400, seed=42, essential=essential)
        b = sample_extra(12, 0.3, 400, seed=42, essential=essential)
        assert [c.members for c in a] == [c.members for c in b]
        c = sample_extra(12, 0.3, 400, seed=43, essential=essential)
        assert [x.members for x in a] != [x.members for x in c]

    def test_rejection_branch_at_large_m(self):
        # 2^26 - 1 >> 4 * 120 forces the coin-flip path
        essential = essential_coalitions(26)
        extra = sample_extra(26, 0.4, 120, seed=5, essential=essential)
        assert len(extra) == 120 - 26
        members = [c.members for c in extra]
        assert len(set(members)) == len(members)
        assert all(0 < len(m) <= 26 for m in members)


class TestNormalizePhi:
    def test_shift_and_scale(self):
        phi, fallback = normalize_phi(np.array([0.2, -0.1]))
        assert phi == pytest.approx([1.0, 0.0], abs=1e-12)
        assert not fallback

    def test_all_equal_falls_back_to_uniform(self):
        phi, fallback = normalize_phi(np.array([0.3, 0.3, 0.3]))
        assert phi == pytest.approx([1 / 3, 1 / 3, 1 / 3], abs=1e-12)
        assert fallback

    def test_three_way_example(self):
        phi, _ = normalize_phi(np.array([0.3, 0.1, 0.0]))
        assert phi == pytest.approx([0.75, 0.25, 0.0], abs=1e-12)

    def test_short_vector_rejected(self):
        with pytest.raises(ValueError):
            normalize_phi(np.array([1.0]))


@pytest.fixture
def dominant_setup(template, yes_no_vmap):
    # P(yes) = 0.9 iff feature 0 is present, else 0.5
    backend = oracle_backend({"a": math.log(9.0)})
    instance = make_instance(0, ["a", "b"])
    return backend, instance, template, yes_no_vmap


class TestComputeAttributions:
    def test_worked_two_feature_example(self, dominant_setup):
        backend, instance, template, vmap = dominant_setup
        config = SamplingConfig(ratio=1.0, seed=3, metric="jsd")
        result = compute_attributions(instance, backend, template, vmap, config)
        assert result.raw_phi == pytest.approx([0.146793, -0.073397], abs=1e-5)
        assert result.phi == pytest.approx([1.0, 0.0], abs=1e-9)
        assert len(result.records) == 3
        assert result.feature_keys == ("a", "b")

    def test_constant_oracle_gives_uniform_fallback(self, template, yes_no_vmap):
        backend = oracle_backend({}, bias=0.7)
        instance = make_instance(0, ["a", "b", "c"])
        result = compute_attributions(
            instance, backend, template, yes_no_vmap, SamplingConfig(ratio=1.0)
        )
        assert result.raw_phi == pytest.approx([0.0, 0.0, 0.0], abs=1e-15)
        assert result.uniform_fallback
        assert result.phi == pytest.approx([1 / 3] * 3, abs=1e-12)

    def test_seed_determinism_bit_identical(self, dominant_setup):
        backend, instance, template, vmap = dominant_setup
        config = SamplingConfig(ratio=1.0, seed=11)
        a = compute_attributions(instance, backend, template, vmap, config)
        b = compute_attributions(instance, backend, template, vmap, config)
        assert a.to_payload() == b.to_payload()

    def test_workers_do_not_change_the_result(self, template, yes_no_vmap):
        backend = oracle_backend({f"f{i}": 0.2 * i for i in range(6)}, bias=-0.5)
        instance = make_instance(0, [f"f{i}" for i in range(6)])
        config = SamplingConfig(ratio=0.5, seed=2)
        serial = compute_attributions(instance, backend, template, yes_no_vmap, config)
        threaded = compute_attributions(
            instance, backend, template, yes_no_vmap, config, workers=4
        )
        assert serial.to_payload() == threaded.to_payload()

    def test_permuting_fields_permutes_phi(self, template, yes_no_vmap):
        weights = {"a": 1.4, "b": -0.6, "c": 0.3, "d": 2.0, "e": 0.05}
        backend = oracle_backend(weights, bias=-0.8)
        keys = list(weights)
        instance = make_instance(0, keys)
        permutation = [3, 0, 4, 1, 2]
        permuted = make_instance(0, [keys[i] for i in permutation])
        config = SamplingConfig(ratio=1.0, seed=6)  # exhaustive: sampler-order free
        base = compute_attributions(instance, backend, template, yes_no_vmap, config)
        moved = compute_attributions(permuted, backend, template, yes_no_vmap, config)
        by_key_base = dict(zip(base.feature_keys, base.phi))
        by_key_moved = dict(zip(moved.feature_keys, moved.phi))
        for key in keys:
            assert by_key_moved[key] == pytest.approx(by_key_base[key], abs=1e-12)

    def test_single_feature_rejected(self, template, yes_no_vmap):
        backend = oracle_backend({"a": 1.0})
        with pytest.raises(ValueError, match="at least 2"):
            compute_attributions(
                make_instance(0, ["a"]), backend, template, yes_no_vmap, SamplingConfig()
            )

    def test_cap_below_m_rejected(self, template, yes_no_vmap):
        backend = oracle_backend({"a": 1.0})
        instance = make_instance(0, [f"f{i}" for i in range(5)])
        with pytest.raises(ConfigError, match="max_coalitions"):
            compute_attributions(
                instance, backend, template, yes_no_vmap, SamplingConfig(max_coalitions=4)
            )

    def test_backend_failure_aborts_instance(self, template, yes_no_vmap):
        inner = oracle_backend({"a": 1.0})
        backend = FlakyBackend(inner, poison="b:2")
        instance = make_instance(0, ["a", "b"])
        with pytest.raises(AttributionError, match="instance 0"):
            compute_attributions(
                instance, backend, template, yes_no_vmap, SamplingConfig(ratio=1.0)
            )

    def test_payload_round_trip(self, dominant_setup):
        backend, instance, template, vmap = dominant_setup
        result = compute_attributions(
            instance, backend, template, vmap, SamplingConfig(ratio=1.0, seed=5)
        )
        again = AttributionResult.from_payload(result.to_payload())
        assert again.to_payload() == result.to_payload()
        assert again.config == result.config
        assert np.array_equal(again.phi, result.phi)

    def test_ranking_orders_by_phi(self, template, yes_no_vmap):
        backend = oracle_backend({"weak": 0.1, "strong": 2.5, "mid": 0.8}, bias=-1.0)
        instance = make_instance(0, ["weak", "strong", "mid"])
        result = compute_attributions(
            instance, backend, template, yes_no_vmap, SamplingConfig(ratio=1.0, seed=1)
        )
        assert result.ranking() == ("strong", "mid", "weak")


def _brute_force_raw_phi(instance, backend, template, vmap, metric="jsd"):
    """Independent enumeration of every non-empty coalition, plain loops."""
    from tabattr import build_prompt, class_distribution
    from tabattr.divergence import similarity

    m = instance.num_features
    full_prompt = build_prompt(template, instance.fields)
    full_dist, _ = class_distribution(backend.query(full_prompt, 10), vmap)
    sims = {}
    for r in range(1, m + 1):
        for subset in itertools.combinations(range(m), r):
            prompt = build_prompt(template, instance.fields_at(subset))
            dist, _ = class_distribution(backend.query(prompt, 10), vmap)
            sims[frozenset(subset)] = similarity(metric, full_dist, dist)
    raw = []
    for j in range(m):
        with_j = [v for s, v in sims.items() if j in s]
        without_j = [v for s, v in sims.items() if j not in s]
        raw.append(sum(with_j) / len(with_j) - sum(without_j) / len(without_j))
    return np.array(raw)


class TestExhaustiveEquivalence:
    def test_matches_brute_force_enumeration(self, template, yes_no_vmap):
        rng = np.random.default_rng(0)
        for m in (2, 3, 5):
            weights = {f"f{i}": float(rng.normal()) for i in range(m)}
            backend = oracle_backend(weights, bias=float(rng.normal()) / 2)
            instance = make_instance(0, list(weights))
            config = SamplingConfig(ratio=1.0, max_coalitions=2**m, seed=int(rng.integers(1e6)))
            result = compute_attributions(instance, backend, template, yes_no_vmap, config)
            expected = _brute_force_raw_phi(instance, backend, template, yes_no_vmap)
            assert result.raw_phi == pytest.approx(expected, abs=1e-12)
            assert len(result.records) == 2**m - 1
