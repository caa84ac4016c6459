import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laylora.data import DEFAULT_STYLES, PairedSample, SynthSpec, StyleSpec, synth_corpus
from laylora.errors import ConfigurationError, ContractError, DegenerateSubspaceError
from laylora.metrics import (DcrsWeights, JudgeStub, aggregate, avg_word_count, bleu, bleu_detail,
                             conceptual_component, cross_correlation, dcrs, discourse_component,
                             heterogeneity_report, lcs_length, lexical_component, quantiles, rouge_l, rouge_n,
                             rows_to_tsv, score_pair, semantic_subspace, syntactic_component, word_count_stats)
from oracles import bleu_oracle, lcs_exhaustive, random_pairs, rouge_l_oracle, rouge_n_oracle

words = st.lists(st.sampled_from(list("abcde")), min_size=1, max_size=10)


# -------------------------------------------------------------------- ROUGE


def test_rouge_examples():
    assert rouge_n("the cat sat", "the cat sat", 1).f1 == 1.0
    assert rouge_n("the cat sat", "the cat ran", 1).f1 == pytest.approx(2 / 3, abs=1e-15)
    assert rouge_n("the cat sat", "the cat ran", 2).f1 == pytest.approx(1 / 2, abs=1e-15)
    assert rouge_n("a b c", "d e f", 1).f1 == 0.0
    assert rouge_l("the cat sat", "the cat ran").f1 == pytest.approx(2 / 3, abs=1e-15)
    assert rouge_l("x y z", "x y z").f1 == 1.0
    assert lcs_length(list("abcde"), list("edcba")) == 1


def test_rouge_empty_inputs_are_flagged():
    s = rouge_n("", "the cat", 1)
    assert s.empty and s.f1 == 0.0
    assert rouge_l("a", "").empty
    with pytest.raises(ConfigurationError):
        rouge_n("a", "a", 0)


def test_rouge_against_brute_force():
    rng = np.random.default_rng(0)
    for cand, ref in random_pairs(rng):
        for n in (1, 2):
            assert abs(rouge_n(cand, ref, n).f1 - rouge_n_oracle(cand, ref, n)) < 1e-9
        assert lcs_length(cand, ref) == lcs_exhaustive(cand, ref)
        assert abs(rouge_l(cand, ref).f1 - rouge_l_oracle(cand, ref)) < 1e-9


@given(words, words)
def test_rouge_role_swap_symmetry(c, r):
    a, b = rouge_n(c, r, 1), rouge_n(r, c, 1)
    assert a.precision == b.recall and a.recall == b.precision and a.f1 == pytest.approx(b.f1)
    la, lb = rouge_l(c, r), rouge_l(r, c)
    assert la.precision == lb.recall and 0 <= la.f1 <= 1


@given(words, words)
def test_lcs_at_least_longest_common_run(c, r):
    run = max((k for k in range(1, min(len(c), len(r)) + 1)
               for i in range(len(c) - k + 1) if any(c[i:i + k] == r[j:j + k] for j in range(len(r) - k + 1))),
              default=0)
    assert lcs_length(c, r) >= run


# --------------------------------------------------------------------- BLEU


def test_bleu_identical_is_one():
    for text in ("a", "a b", "the cat sat on the mat", "x y z w v"):
        assert bleu(text, text) == 1.0


def test_bleu_brevity_penalty_closed_form():
    ref = "a b c d e f g h i j".split()
    d = bleu_detail(ref[:5], ref)
    assert d.brevity_penalty == pytest.approx(math.exp(-1), abs=1e-15)
    assert d.score == pytest.approx(0.367879, abs=1e-6)
    assert bleu_detail(ref + ["k"], ref).brevity_penalty == 1.0


def test_bleu_against_direct_formula():
    rng = np.random.default_rng(1)
    for cand, ref in random_pairs(rng):
        assert abs(bleu(cand, ref) - bleu_oracle(cand, ref)) < 1e-9


@given(words, words)
def test_bleu_bounds(c, r):
    d = bleu_detail(c, r)
    assert 0 <= d.score <= 1 and d.brevity_penalty <= 1
    w = 1 / d.orders_used
    assert d.score <= min(p ** w for p in d.precisions) + 1e-12


def test_bleu_strict_and_errors():
    assert bleu("a b", "c d", smoothing="strict") == 0.0
    assert bleu_detail("", "a").empty
    with pytest.raises(ConfigurationError):
        bleu("a", "a", weights=[0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ConfigurationError):
        bleu("a", "a", smoothing="laplace")


def test_score_pair_and_aggregate():
    s = score_pair("the cat sat", "the cat sat")
    assert s == {"rouge1": 1.0, "rouge2": 1.0, "rougeL": 1.0, "bleu": 1.0}
    agg = aggregate([s, {"rouge1": 0.0, "rouge2": 0.5, "rougeL": 0.0, "bleu": 0.0}])
    assert agg == {"rouge1": 0.5, "rouge2": 0.75, "rougeL": 0.5, "bleu": 0.5}


# --------------------------------------------------------------- readability


def test_word_count_examples():
    assert avg_word_count("Hello world. Foo bar baz.") == 2.5
    assert avg_word_count("word") == 1.0
    assert word_count_stats("word").undefined_ratio
    twenty = " ".join(["one two three four five."] * 4)
    assert avg_word_count(twenty) == 5.0
    assert avg_word_count("Dose was low. It's fine!") == 2.5


def test_dcrs_examples():
    zeros = [lambda t: 0.0] * 4
    assert dcrs("anything", scorers=zeros) == 0.0
    fixed = [lambda t, v=v: v for v in (0.2, 0.4, 0.6, 0.8)]
    assert dcrs("x", DcrsWeights(), fixed) == pytest.approx(0.5, abs=1e-15)
    text = "The hypertension was treated. It helped."
    assert dcrs(text, DcrsWeights(1, 0, 0, 0)) == lexical_component(text)
    with pytest.raises(ConfigurationError):
        DcrsWeights(0.5, 0.5, 0.5, 0.0)
    with pytest.raises(ContractError):
        dcrs("x", scorers=[lambda t: 2.0] * 4)


@given(st.text(max_size=80))
def test_dcrs_components_bounded(text):
    for f in (lexical_component, syntactic_component, conceptual_component, discourse_component):
        assert 0.0 <= f(text) <= 1.0


def test_judge_stub_records():
    judge = JudgeStub(score=4.0)
    assert judge("text a") == 4.0 and judge("text b") == 4.0
    assert judge.queries == ["text a", "text b"]


# ------------------------------------------------------------ heterogeneity


def sort_and_index_quantile(values, q):
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def test_quantiles_vs_sorting_oracle():
    rng = np.random.default_rng(2)
    for n in (1, 2, 5, 8, 13):
        vals = list(rng.integers(0, 50, size=n).astype(float))
        got = quantiles(vals)
        for q, g in zip((0, 0.25, 0.5, 0.75, 1.0), got):
            assert g == sort_and_index_quantile(vals, q)


def test_identical_sources_identical_rows():
    base = synth_corpus(SynthSpec(samples_per_style=5, seed=1))
    twin = [PairedSample("twin-" + s.id, s.expert, s.lay, "twin-" + s.style) for s in base]
    rows = heterogeneity_report(base + twin)
    by_key = {(r["source"], r["side"], r["metric"]): r for r in rows}
    for style in {s.style for s in base}:
        for side in ("expert", "lay"):
            for metric in ("word_count", "dcrs"):
                a, b = by_key[(style, side, metric)], by_key[("twin-" + style, side, metric)]
                assert {k: v for k, v in a.items() if k != "source"} == {k: v for k, v in b.items() if k != "source"}


def test_truncation_lowers_lay_word_count():
    corpus = []
    for s in synth_corpus(SynthSpec(samples_per_style=10)):
        words = s.expert.rstrip(".").split()
        corpus.append(PairedSample(s.id, s.expert, " ".join(words[:3]) + ".", s.style))
    for style in {s.style for s in corpus}:
        rows = {(r["side"], r["metric"]): r for r in heterogeneity_report(corpus) if r["source"] == style}
        assert rows[("lay", "word_count")]["median"] < rows[("expert", "word_count")]["median"]


def test_expansion_lengthens_lay_text():
    corpus = synth_corpus(SynthSpec(styles=DEFAULT_STYLES, samples_per_style=20))
    explain = [s for s in corpus if s.style == "explain"]
    mean_words = lambda side: np.mean([word_count_stats(getattr(s, side)).words for s in explain])
    assert mean_words("lay") > mean_words("expert")


def test_missing_source_is_omitted(caplog):
    corpus = synth_corpus(SynthSpec(samples_per_style=2))
    rows = heterogeneity_report(corpus, sources=["concise", "nowhere"])
    assert {r["source"] for r in rows} == {"concise"}
    assert "nowhere" in caplog.text


def test_rows_to_tsv():
    text = rows_to_tsv([{"a": 1, "b": 0.1 + 0.2}])
    assert text == "a\tb\n1\t0.3\n"


# ------------------------------------------------------------------ subspace


def principal_angles_sin(U, V):
    s = np.linalg.svd(U @ V.T, compute_uv=False)
    return np.sqrt(np.maximum(0.0, 1 - s**2))


def test_planted_plane_recovered():
    rng = np.random.default_rng(3)
    basis = np.linalg.qr(rng.normal(size=(12, 2)))[0].T
    E = rng.normal(size=(40, 2)) * [3.0, 1.0] @ basis + 5.0
    L = rng.normal(size=(40, 2)) * [3.0, 1.0] @ basis + 5.0
    proj = semantic_subspace(E, L)
    assert np.abs(proj.directions @ proj.directions.T - np.eye(2)).max() < 1e-9
    assert principal_angles_sin(proj.directions, basis).max() < 1e-6
    inside = proj.center + np.array([0.7, -1.3]) @ proj.directions
    coords = proj.project(inside[None])[0]
    assert np.abs(proj.center + coords @ proj.directions - inside).max() < 1e-9


def test_subspace_identical_clouds():
    rng = np.random.default_rng(4)
    E = rng.normal(size=(20, 6))
    proj = semantic_subspace(E, E.copy())
    np.testing.assert_array_equal(proj.expert_points, proj.lay_points)


def test_subspace_degenerate():
    line = np.outer(np.arange(10.0), np.ones(4))
    with pytest.raises(DegenerateSubspaceError):
        semantic_subspace(line, line + 1.0)
    with pytest.raises(ContractError):
        semantic_subspace(np.ones((1, 3)), np.ones((1, 3)))


# --------------------------------------------------------- cross-correlation


def test_cross_correlation_cases():
    rng = np.random.default_rng(5)
    E = rng.normal(size=(200, 4))
    assert np.abs(np.diag(cross_correlation(E, E)) - 1).max() < 1e-12
    perm = [2, 0, 3, 1]
    C = cross_correlation(E, E[:, perm])
    pattern = np.zeros((4, 4))
    for b, a in enumerate(perm):
        pattern[a, b] = 1.0
    assert np.abs(C[pattern == 1] - 1).max() < 1e-12
    big = cross_correlation(rng.normal(size=(1000, 4)), rng.normal(size=(1000, 4)))
    assert np.abs(big).max() < 0.15


def test_cross_correlation_matches_pearson_and_flags_dead_dims(caplog):
    rng = np.random.default_rng(6)
    E, L = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    C = cross_correlation(E, L)
    for a in range(3):
        for b in range(3):
            assert abs(C[a, b] - np.corrcoef(E[:, a], L[:, b])[0, 1]) < 1e-12
    L[:, 1] = 2.0
    C = cross_correlation(E, L)
    assert np.all(C[:, 1] == 0) and "zero-variance" in caplog.text
