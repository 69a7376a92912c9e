import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unicr.errors import ConfigError, InvalidSignal, MissingSignal
from unicr.evidence import (DEGENERATE_EVIDENCE, FeatureConfig, agreement_rate, assemble_features,
                            available_families, length_normalized_loglik, mean_token_entropy,
                            predictive_entropy, rag_features, rank_normalized_logprob, semantic_dispersion,
                            verifier_consistency)
from unicr.records import ClaimScore, RawSignalsRecord, SampleRecord

from conftest import FULL, record, samples


def test_loglik_and_entropy():
    assert length_normalized_loglik([-1.0, -3.0]) == -2.0
    assert length_normalized_loglik([0.0, 0.0, 0.0]) == 0.0
    assert length_normalized_loglik([-2.3]) == -2.3
    assert mean_token_entropy([math.log(4)] * 3) == pytest.approx(1.3863, abs=1e-4)
    assert mean_token_entropy([0, 0]) == 0
    assert mean_token_entropy([1.0, 3.0]) == 2.0
    for f in (length_normalized_loglik, mean_token_entropy):
        with pytest.raises(MissingSignal):
            f([])


def test_rank_normalized_logprob():
    assert rank_normalized_logprob(-1, [-3, -2, -1, 0]) == 0.625
    assert rank_normalized_logprob(-9, [-3, -2]) == 0.0
    assert rank_normalized_logprob(1, [-3, -2]) == 1.0
    with pytest.raises(MissingSignal):
        rank_normalized_logprob(0, [])


def test_agreement_and_entropy():
    assert agreement_rate(samples("AAABB")) == 0.6
    assert agreement_rate(samples("AAA")) == 1.0
    assert agreement_rate(samples("ABC")) == pytest.approx(1 / 3)
    assert predictive_entropy(samples("AAA")) == 0
    assert predictive_entropy(samples("AB")) == pytest.approx(math.log(2))
    assert predictive_entropy(samples("AABBCC")) == pytest.approx(math.log(3))
    with pytest.raises(MissingSignal):
        agreement_rate([])


@given(st.lists(st.sampled_from("ABCD"), min_size=1, max_size=10), st.randoms())
def test_self_consistency_properties(keys, rnd):
    s = samples(keys)
    k = len(keys)
    a, h = agreement_rate(s), predictive_entropy(s)
    assert 1 / k - 1e-12 <= a <= 1
    assert -1e-12 <= h <= math.log(k) + 1e-12
    assert (a == 1) == (h == 0)
    shuffled = list(s)
    rnd.shuffle(shuffled)
    assert agreement_rate(shuffled) == a
    assert predictive_entropy(shuffled) == pytest.approx(h, abs=1e-12)
    assert semantic_dispersion(shuffled) == semantic_dispersion(s)


def test_verifier_consistency():
    assert verifier_consistency(samples("AAAA", [True, True, False, False])) == 0.5
    assert verifier_consistency(samples("AA", [True, True])) == 1.0
    assert verifier_consistency(samples("AA", [False, False])) == 0.0
    with pytest.raises(MissingSignal):
        verifier_consistency(samples("AA", [True, None]))


def test_semantic_dispersion_examples():
    assert semantic_dispersion(samples("A", sim=[[1.0]]))[0] == 1.0
    one = [SampleRecord("A", (1.0,), (1.0,))]
    assert semantic_dispersion(one) == (1.0, 0.0)
    eye = np.eye(4)
    assert semantic_dispersion(samples("ABCD", sim=eye)).largest_cluster_mass == 0.25
    ent = np.full((3, 3), 0.8)
    np.fill_diagonal(ent, 1.0)
    s = [SampleRecord(k, (1.0,) * 3, tuple(ent[i])) for i, k in enumerate("ABC")]
    d = semantic_dispersion(s)
    assert d.largest_cluster_mass == 1.0
    assert d.avg_pairwise_entailment == pytest.approx(0.8)


def test_semantic_dispersion_rejects_asymmetry():
    sim = [[1.0, 0.9], [0.2, 1.0]]
    with pytest.raises(InvalidSignal):
        semantic_dispersion(samples("AB", sim=sim))


@st.composite
def similarity(draw):
    k = draw(st.integers(1, 7))
    vals = draw(st.lists(st.floats(0, 1), min_size=k * k, max_size=k * k))
    m = np.array(vals).reshape(k, k)
    m = np.triu(m, 1)
    m = m + m.T
    np.fill_diagonal(m, 1.0)
    return m


@given(similarity(), st.floats(0, 1), st.floats(0, 1))
def test_cluster_mass_non_increasing_in_threshold(sim, t1, t2):
    lo, hi = sorted((t1, t2))
    s = samples("x" * len(sim), sim=sim)
    assert semantic_dispersion(s, hi).largest_cluster_mass <= semantic_dispersion(s, lo).largest_cluster_mass


def test_rag_features():
    cl = [ClaimScore(0.9, False, True, 0.9, 0.0), ClaimScore(0.2, True, True, 0.2, 0.8)]
    rag = rag_features(cl, 0.5, 0.5)
    assert rag[:3] == pytest.approx((0.5, 0.55, 0.5))
    full = rag_features([ClaimScore(1.0, max_passage_entailment=e) for e in (0.7, 0.9)])
    assert full[:3] == pytest.approx((1.0, 0.8, 0.0))
    none = rag_features([ClaimScore(1.0, salient=False, max_passage_entailment=1.0)])
    assert none == (0.0, 0.0, 0.0, True)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10),
       st.floats(0, 1), st.floats(0, 1))
def test_rag_monotone_in_thresholds(pairs, t1, t2):
    cl = [ClaimScore(e, False, True, e, c) for e, c in pairs]
    lo, hi = sorted((t1, t2))
    a, b = rag_features(cl, lo, lo), rag_features(cl, hi, hi)
    assert b.coverage <= a.coverage and b.conflict <= a.conflict


def test_assemble_seq_and_sc_with_pool():
    cfg = FeatureConfig(seq=True, sc=True, reference_pool=(-3.0, -2.0, -1.0, 0.0))
    z = assemble_features(record(logprobs=(-1.0,), keys="AAB"), cfg)
    assert z.schema == ("bar_ell", "rank_pct", "agree", "h_sc", "cluster_mass")
    assert z.d == 5
    assert z.values[:3] == pytest.approx((-1.0, 0.625, 2 / 3))


def test_assemble_errors_and_api_only():
    with pytest.raises(ConfigError):
        assemble_features(record(), FeatureConfig(seq=False, sc=False))
    api = FeatureConfig(seq=True, entropy=True, sc=True, rag=True, verifier=True, api_only=True)
    z = assemble_features(record(logprobs=None), api)
    assert "bar_ell" not in z.schema and "rank_pct" not in z.schema and "mean_entropy" not in z.schema
    assert {"cluster_mass", "coverage", "consis_ver"} <= set(z.schema)
    with pytest.raises(MissingSignal) as err:
        assemble_features(record(logprobs=None), FeatureConfig(seq=True, sc=True))
    assert err.value.family == "seq"


def test_assemble_is_pure_and_flags_degenerate_rag():
    rec = record(support=())
    cfg = FeatureConfig(seq=True, sc=True, rag=True)
    z1, z2 = assemble_features(rec, cfg), assemble_features(rec, cfg)
    assert z1 == z2 and z1.values == z2.values
    assert DEGENERATE_EVIDENCE in z1.flags


def test_missing_family_shrinks_schema():
    recs = [record(), record(flags=None, tool_diag=None)]
    cfg = available_families(recs, FeatureConfig(seq=True, sc=True, rag=True, verifier=True, tool=True))
    assert not cfg.tool and cfg.rag
    assert "tool_pass" not in cfg.schema


def test_schema_hash_tracks_config():
    assert FULL.schema_hash() == FeatureConfig.from_dict(FULL.to_dict()).schema_hash()
    assert FULL.schema_hash() != FeatureConfig().schema_hash()
    with pytest.raises(ConfigError):
        FeatureConfig.from_dict({"colour": True})
