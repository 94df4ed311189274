import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrflow.data import AMINO_ACIDS
from cdrflow.exceptions import AlphabetError, ContractError, DomainError
from cdrflow.geometry import VALIDITY_PRESETS, distance_matrix, random_rotation, rmsd
from cdrflow.metrics import (EvalReport, NGramLM, UniformLM, diversity, evaluate, lcs_length, perplexity,
                             rmsd_protocol, similarity, validity_rate)

H3 = VALIDITY_PRESETS["H3"]
seq_strategy = st.text(alphabet=AMINO_ACIDS, min_size=1, max_size=12)


# -- language models -----------------------------------------------------------
def test_uniform_perplexity_is_twenty():
    lm = UniformLM().fit()
    for s in ("A", "ACDEFG", "WWWWWWWWWW"):
        assert perplexity(lm, s) == 20.0


def test_deterministic_lm_has_perplexity_one():
    lm = NGramLM(order=3, alpha=0.0).fit(["ACDEFGH"])
    assert perplexity(lm, "ACDEFGH") == pytest.approx(1.0, abs=1e-12)


def test_bigram_matches_hand_counts():
    corpus = ["AC", "AA", "CA"]
    lm = NGramLM(order=2, alpha=0.5).fit(corpus)
    k = 21  # residues plus end marker
    # counts by context: ^ -> A x2, C x1; A -> C, A, $, $ ; C -> $, A
    assert lm.prob("^", "A") == pytest.approx((2 + 0.5) / (3 + 0.5 * k))
    assert lm.prob("A", "$") == pytest.approx((2 + 0.5) / (4 + 0.5 * k))
    assert lm.prob("C", "A") == pytest.approx((1 + 0.5) / (2 + 0.5 * k))
    assert lm.prob("W", "A") == pytest.approx(1 / k)
    logp = math.log(lm.prob("^", "C")) + math.log(lm.prob("C", "A")) + math.log(lm.prob("A", "$"))
    assert perplexity(lm, "CA") == pytest.approx(math.exp(-logp / 3))


def test_conditionals_sum_to_one():
    lm = NGramLM().fit(["ACDEF", "ACDFF", "GHIKL", "AC"])
    for context in ("^^", "^A", "AC", "CD", "ZZ"):
        total = sum(lm.prob(context, s) for s in lm.symbols)
        assert abs(total - 1.0) < 1e-12


def test_zero_smoothing_unseen_symbol():
    lm = NGramLM(order=2, alpha=0.0).fit(["AC"])
    with pytest.raises(DomainError):
        perplexity(lm, "AW")


def test_lm_input_checks():
    lm = NGramLM().fit(["AC"])
    with pytest.raises(AlphabetError):
        perplexity(lm, "AXB")
    with pytest.raises(ContractError):
        perplexity(lm, "")
    with pytest.raises(ContractError):
        NGramLM(order=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(seq_strategy, min_size=1, max_size=5), seq_strategy)
def test_perplexity_at_least_one(corpus, query):
    assert perplexity(NGramLM().fit(corpus), query) >= 1.0 - 1e-12


# -- RMSD protocol -------------------------------------------------------------
def brute_protocol(generated, test):
    best = [min(rmsd(t, g) for g in generated if len(g) == len(t)) for t in test]
    return np.mean(best), np.std(best)


def test_rmsd_protocol_brute_force(rng):
    test = [rng.normal(size=(6, 3)) * 3 for _ in range(3)]
    generated = [rng.normal(size=(6, 3)) * 3 for _ in range(5)]
    summary = rmsd_protocol(generated, test)
    mean, std = brute_protocol(generated, test)
    assert summary.mean == pytest.approx(mean, abs=1e-12) and summary.std == pytest.approx(std, abs=1e-12)
    assert summary.matched == 3 and summary.unmatched == 0


def test_rmsd_protocol_exact_copies_and_singletons(rng):
    test = [rng.normal(size=(n, 3)) for n in (5, 7)]
    copies = [t @ random_rotation(rng).T + 4 for t in test]
    assert rmsd_protocol(copies, test).mean < 1e-9
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert rmsd_protocol([a], [b]).mean == pytest.approx(rmsd(b, a))


def test_rmsd_protocol_unmatched(rng):
    summary = rmsd_protocol([rng.normal(size=(5, 3))], [rng.normal(size=(5, 3)), rng.normal(size=(6, 3))])
    assert summary.matched == 1 and summary.unmatched == 1
    none = rmsd_protocol([rng.normal(size=(4, 3))], [rng.normal(size=(6, 3))])
    assert none.matched == 0 and math.isnan(none.mean)
    with pytest.raises(ContractError):
        rmsd_protocol([], [rng.normal(size=(4, 3))])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_generated_never_raises_mean(seed):
    rng = np.random.default_rng(seed)
    test = [rng.normal(size=(5, 3)) for _ in range(3)]
    generated = [rng.normal(size=(5, 3)) for _ in range(3)]
    before = rmsd_protocol(generated, test).mean
    after = rmsd_protocol(generated + [rng.normal(size=(5, 3))], test).mean
    assert after <= before + 1e-12


# -- validity, similarity, diversity -------------------------------------------
def chain(n, bond=3.8, end=7.0):
    d = np.zeros((n, n))
    for i in range(n - 1):
        d[i, i + 1] = d[i + 1, i] = bond
    d[0, -1] = d[-1, 0] = end
    return d


def test_validity_rate_cases():
    good, bad = chain(5), chain(5, bond=4.5)
    assert validity_rate([good, good], H3) == 1.0
    assert validity_rate([good, bad, good, bad], H3) == 0.5
    with pytest.raises(ContractError):
        validity_rate([], H3)


def test_similarity_examples():
    assert similarity("VTDAFMI", "VTDAFDI") == pytest.approx(6 / 7)
    assert similarity("ACD", "ACD") == 1.0
    assert similarity("AAA", "CCCC") == 0.0
    assert lcs_length("AGGTAB", "GXTXAYB") == 4
    with pytest.raises(ContractError):
        similarity("", "A")


def lcs_brute(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = {"".join(c) for c in itertools.combinations(a, k)}
        if any("".join(c) in subs for c in itertools.combinations(b, k)):
            return k
    return 0


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="ACD", min_size=1, max_size=7), st.text(alphabet="ACD", min_size=1, max_size=7))
def test_similarity_properties(a, b):
    assert lcs_length(a, b) == lcs_brute(a, b)
    assert similarity(a, b) == similarity(b, a)
    assert 0.0 <= similarity(a, b) <= 1.0 and similarity(a, a) == 1.0


def test_diversity_cases():
    assert diversity(["ACD", "ACD", "ACD"]) == 0.0
    assert diversity(["AAA", "CCC"]) == 1.0
    seqs = ["ACDEF", "ACDFF", "WYV", "ACD"]
    ordered = [similarity(a, b) for i, a in enumerate(seqs) for j, b in enumerate(seqs) if i != j]
    assert diversity(seqs) == pytest.approx(1 - np.mean(ordered), abs=1e-12)
    with pytest.raises(ContractError):
        diversity(["A"])


@settings(max_examples=30, deadline=None)
@given(st.lists(seq_strategy, min_size=2, max_size=6), st.randoms())
def test_diversity_permutation_invariant(seqs, rnd):
    shuffled = list(seqs)
    rnd.shuffle(shuffled)
    assert diversity(seqs) == pytest.approx(diversity(shuffled), abs=1e-12)


# -- report ---------------------------------------------------------------------
def test_report_range_checks():
    with pytest.raises(ContractError):
        EvalReport(sample_count=1, validity_rate=1.5, diversity=None)
    with pytest.raises(ContractError):
        EvalReport(sample_count=1, validity_rate=0.5, diversity=2.0)


def test_evaluate_assembles_everything(rng):
    loops = [rng.normal(size=(5, 3)) * 3 for _ in range(3)]
    seqs = ["ACDEF", "ACDEG", "WYVWY"]
    lm = NGramLM().fit(["ACDEF"])
    report = evaluate(seqs, [distance_matrix(g) for g in loops], H3, lm=lm,
                      generated_coords=loops, test_coords=loops[:2])
    assert report.sample_count == 3 and report.rmsd_mean < 1e-9 and report.rmsd_unmatched == 0
    assert report.language_model == "ngram(order=3, alpha=0.1)"
    assert report.ppl_mean == pytest.approx(np.mean([perplexity(lm, s) for s in seqs]))
    assert json.loads(report.to_json())["diversity"] == pytest.approx(diversity(seqs))
    text = report.to_text()
    assert "validity rate" in text and "unmatched test loops: 0" in text
    bare = evaluate(["ACD"], [chain(3)], H3)
    assert bare.diversity is None and bare.ppl_mean is None and "n/a" in bare.to_text()
