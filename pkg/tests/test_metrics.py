"""Lexical metric and F1 convention tests, pinned against the frozen
fixture file and the brute-force reference implementations."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from ehrqa.errors import EmptyText
from ehrqa.evaluation import (
    PRF,
    bleu,
    lcs_positions,
    pooled_prf,
    rouge_l,
    rouge_lsum,
    sari,
    tokenize,
)

from .oracles import textmetrics_oracle as oracle

FIXTURES = json.loads(
    (Path(__file__).parent / "data" / "metric_fixtures.json").read_text()
)["fixtures"]

METRICS = {
    "rouge_l": lambda f: rouge_l(f["candidate"], f["references"][0]),
    "rouge_lsum": lambda f: rouge_lsum(f["candidate"], f["references"][0]),
    "bleu": lambda f: bleu(f["candidate"], f["references"]),
    "sari": lambda f: sari(f["source"], f["candidate"], f["references"]),
}


class TestFrozenFixtures:
    @pytest.mark.parametrize("fixture", FIXTURES, ids=[f["id"] for f in FIXTURES])
    def test_all_metrics_match(self, fixture):
        for name, compute in METRICS.items():
            got = compute(fixture)
            want = fixture["expected"][name]
            assert got == pytest.approx(want, abs=1e-9), name

    def test_identity_scores_are_exact_ones(self):
        fixture = next(f for f in FIXTURES if f["id"] == "identity")
        for name, compute in METRICS.items():
            assert compute(fixture) == 1.0, name

    def test_disjoint_overlap_scores_are_exact_zeros(self):
        fixture = next(f for f in FIXTURES if f["id"] == "disjoint")
        for name in ("rouge_l", "rouge_lsum", "bleu"):
            assert METRICS[name](fixture) == 0.0, name


class TestTokenize:
    def test_punctuation_drops_in_place(self):
        assert tokenize("Don't stop at 2.5mg!") == ["dont", "stop", "at", "25mg"]

    def test_whitespace_splits(self):
        assert tokenize("a\tb\nc") == ["a", "b", "c"]

    def test_empty(self):
        assert tokenize("...") == []

    @given(st.text(max_size=80))
    def test_matches_oracle(self, text):
        assert tokenize(text) == oracle.tokenize(text)


TOKENS = st.lists(st.sampled_from("abcd"), max_size=8)


class TestLcs:
    def test_leftmost_choice(self):
        # both ["a" at 0] and ["a" at 2] are maximal; canonical is position 0
        assert lcs_positions(["a", "b", "a"], ["a"]) == [0]

    @given(TOKENS, TOKENS)
    def test_matches_oracle(self, a, b):
        assert lcs_positions(a, b) == oracle.lcs_positions_smallest(a, b)

    @given(TOKENS, TOKENS)
    def test_positions_form_a_common_subsequence(self, a, b):
        positions = lcs_positions(a, b)
        assert positions == sorted(set(positions))
        picked = [a[i] for i in positions]
        assert oracle.is_subsequence(picked, b)
        assert len(positions) == oracle.lcs_length(a, b)


class TestRougeL:
    def test_fmeasure_by_hand(self):
        # LCS 5 over lengths 6 and 6: F1 = 2*5/12
        assert rouge_l("a b c d e f", "a b c d e g") == pytest.approx(5 / 6)

    def test_blank_raises(self):
        with pytest.raises(EmptyText):
            rouge_l("  ", "ref")
        with pytest.raises(EmptyText):
            rouge_l("cand", "  ")

    def test_punctuation_only_scores_zero(self):
        assert rouge_l("?!", "the reference") == 0.0

    @given(st.text(min_size=1, max_size=60), st.text(min_size=1, max_size=60))
    def test_matches_oracle(self, candidate, reference):
        if not candidate.strip() or not reference.strip():
            return
        assert rouge_l(candidate, reference) == pytest.approx(
            oracle.rouge_l(candidate, reference), abs=1e-12
        )


class TestRougeLsum:
    def test_sentence_union_beats_whole_text_on_reordered_sentences(self):
        candidate = "The dose was doubled. Swelling should improve."
        reference = "Swelling should improve. The dose was doubled."
        assert rouge_lsum(candidate, reference) == pytest.approx(1.0)
        assert rouge_l(candidate, reference) < 1.0

    def test_clipping_blocks_double_counting(self):
        # "the" appears once in the candidate but could match both
        # reference sentences; the budget allows only one hit
        candidate = "the plan."
        reference = "the dose. the timing."
        score = rouge_lsum(candidate, reference)
        assert score == pytest.approx(oracle.rouge_lsum(candidate, reference), abs=1e-12)

    def test_punctuation_only_scores_zero(self):
        assert rouge_lsum("?!", "the reference.") == 0.0

    @given(st.text(min_size=1, max_size=60), st.text(min_size=1, max_size=60))
    def test_matches_oracle(self, candidate, reference):
        if not candidate.strip() or not reference.strip():
            return
        assert rouge_lsum(candidate, reference) == pytest.approx(
            oracle.rouge_lsum(candidate, reference), abs=1e-12
        )


class TestBleu:
    def test_zero_unigram_overlap_is_exactly_zero(self):
        assert bleu("alpha beta", ["gamma delta"]) == 0.0

    def test_identity_is_exactly_one(self):
        assert bleu("take the tablet daily", ["take the tablet daily"]) == 1.0

    def test_brevity_tie_prefers_shorter_reference(self):
        # reference lengths 2 and 4 are equally far from the 3-token
        # candidate; choosing the shorter one lifts the brevity penalty
        tied = bleu("a b c", ["a b", "a b c d"])
        longer_only = bleu("a b c", ["a b c d"])
        assert tied == 1.0
        assert longer_only == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)

    def test_no_references_raises(self):
        with pytest.raises(EmptyText):
            bleu("text", [])
        with pytest.raises(EmptyText):
            bleu("text", ["ok", " "])

    @given(
        st.lists(st.sampled_from("abcde"), min_size=1, max_size=10),
        st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=10),
                 min_size=1, max_size=3),
    )
    def test_matches_oracle(self, cand_tokens, ref_token_lists):
        candidate = " ".join(cand_tokens)
        references = [" ".join(toks) for toks in ref_token_lists]
        assert bleu(candidate, references) == pytest.approx(
            oracle.bleu(candidate, references), abs=1e-12
        )


class TestSari:
    def test_perfect_rewrite_scores_one(self):
        text = "take one tablet each morning"
        assert sari(text, text, [text]) == 1.0

    def test_good_simplification_beats_no_edit(self):
        source = "the patient should continue administration of the diuretic"
        reference = "keep taking the water pill"
        candidate = "keep taking the water pill"
        unedited = sari(source, source, [reference])
        perfect = sari(source, candidate, [reference])
        assert perfect > unedited

    def test_empty_inputs_raise(self):
        with pytest.raises(EmptyText):
            sari(" ", "cand", ["ref"])
        with pytest.raises(EmptyText):
            sari("src", "cand", [])

    @given(
        st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
        st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
        st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
                 min_size=1, max_size=2),
    )
    def test_matches_oracle(self, src, cand, refs):
        source = " ".join(src)
        candidate = " ".join(cand)
        references = [" ".join(r) for r in refs]
        assert sari(source, candidate, references) == pytest.approx(
            oracle.sari(source, candidate, references), abs=1e-12
        )


class TestPrfConventions:
    def test_all_zero_counts_mean_perfect(self):
        prf = PRF.from_counts(0, 0, 0)
        assert (prf.precision, prf.recall, prf.f1) == (1.0, 1.0, 1.0)

    def test_single_zero_denominator(self):
        assert PRF.from_counts(0, 0, 5).precision == 0.0
        assert PRF.from_counts(0, 5, 0).recall == 0.0
        assert PRF.from_counts(0, 5, 5).f1 == 0.0

    def test_hand_fixtures(self):
        assert PRF.from_counts(1, 1, 1).f1 == pytest.approx(0.5)
        assert PRF.from_counts(2, 0, 1).f1 == pytest.approx(0.8)

    def test_pooling_is_micro_not_macro(self):
        preds = {"c1": [1, 2], "c2": []}
        gold = {"c1": [1, 2], "c2": [3, 4]}
        prf = pooled_prf(preds, gold)
        # pooled: tp=2, fp=0, fn=2; a macro average would give 0.5
        assert prf.f1 == pytest.approx(2 * 1.0 * 0.5 / 1.5)

    def test_none_prediction_counts_nothing(self):
        prf = pooled_prf({"c1": None}, {"c1": [1, 2]})
        assert (prf.tp, prf.fp, prf.fn) == (0, 0, 2)
