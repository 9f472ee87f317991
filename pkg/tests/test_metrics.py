from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mira.metrics import (
    Accuracy,
    EvalPair,
    GeneratorJudge,
    bleu,
    bleu_details,
    correctness_split,
    evaluate,
    exact_match,
    lcs_length,
    load_corpus,
    parse_corpus,
    parse_judge_score,
    rouge_l,
    rouge_l_details,
    tokenize,
)

from .conftest import DATA


def test_tokenize():
    assert tokenize("No acute, cardiopulmonary process.") == ["no", "acute", "cardiopulmonary", "process"]
    assert tokenize("  ...  ") == []


def test_bleu_identity():
    toks = "the heart size is normal".split()
    for n in range(1, 5):
        assert bleu(toks, [toks], n) == 1.0


def test_bleu_zero_overlap():
    assert bleu(["a", "b"], [["c", "d"]], 1) == 0.0


def test_bleu_hand_value():
    # p1 = 3/3, c = 3, r = 4, BP = exp(1 - 4/3)
    got = bleu("the cat sat".split(), ["the cat sat down".split()], 1)
    assert got == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)
    assert got == pytest.approx(0.7165, abs=1e-4)


def test_bleu_multi_reference_clipping():
    # "the the the" vs refs with at most two "the": p1 = 2/3
    d = bleu_details("the the the".split(), ["the cat the".split(), "a the".split()], 1)
    assert d.precisions == (pytest.approx(2 / 3),)
    assert d.brevity_penalty == 1.0


def test_bleu_closest_reference_length_prefers_shorter_on_tie():
    # c = 3, refs of length 2 and 4 are equally close; the shorter one gives BP = 1
    d = bleu_details("a b c".split(), ["a b".split(), "a b c d".split()], 1)
    assert d.brevity_penalty == 1.0


def test_bleu_edge_cases():
    assert bleu([], [["a"]], 1) == 0.0
    assert bleu(["a"], [["a"]], 2) == 0.0  # no bigrams in the candidate
    with pytest.raises(ValueError):
        bleu(["a"], [["a"]], 5)
    with pytest.raises(ValueError):
        bleu(["a"], [], 1)


words = st.lists(st.sampled_from(list("abcdefg")), min_size=0, max_size=12)


@settings(max_examples=200, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=3), st.integers(1, 4))
def test_bleu_components_in_range(cand, refs, n):
    d = bleu_details(cand, refs, n)
    assert all(0.0 <= p <= 1.0 for p in d.precisions)
    assert 0.0 <= d.score <= 1.0
    if cand:
        assert 0.0 < d.brevity_penalty <= 1.0


@settings(max_examples=100, deadline=None)
@given(words.filter(bool))
def test_bleu_self_is_one(toks):
    for n in range(1, min(4, len(toks)) + 1):
        assert bleu(toks, [toks], n) == pytest.approx(1.0, abs=1e-12)


def test_lcs():
    assert lcs_length("a b c".split(), "a c d".split()) == 2
    assert lcs_length([], ["a"]) == 0


def test_rouge_hand_value():
    d = rouge_l_details("a b c".split(), ["a c d".split()])
    assert (d.precision, d.recall) == (pytest.approx(2 / 3), pytest.approx(2 / 3))
    assert d.f == pytest.approx(2 / 3, abs=1e-12)


def test_rouge_identity_and_disjoint():
    assert rouge_l(["x", "y"], [["x", "y"]]) == pytest.approx(1.0)
    assert rouge_l(["x"], [["y"]]) == 0.0
    assert rouge_l([], [["y"]]) == 0.0


def test_rouge_takes_best_reference():
    assert rouge_l(["a", "b"], [["z"], ["a", "b"]]) == pytest.approx(1.0)


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_rouge_components_swap(a, b):
    ab, ba = rouge_l_details(a, [b]), rouge_l_details(b, [a])
    if ab.f > 0:
        assert ab.precision == pytest.approx(ba.recall)
        assert ab.recall == pytest.approx(ba.precision)
    assert 0.0 <= ab.f <= 1.0


@pytest.mark.parametrize(
    "cand,ref,want",
    [("Yes", "yes.", 1), ("Yes", "No", 0), (" true  ", "true", 1), ("left  lung", "Left lung!", 1)],
)
def test_exact_match(cand, ref, want):
    assert exact_match(cand, ref) == want


def test_exact_match_raw():
    assert exact_match("Yes", "yes.", normalize=False) == 0


def test_correctness_split_counts():
    conv = [EvalPair("vqa_conv", c, (r,)) for c, r in [("yes", "yes"), ("no", "no"), ("a", "a"), ("x", "y")]]
    detail = [EvalPair("vqa_detail", "c", ("r",), 0.6), EvalPair("vqa_detail", "c", ("r",), 0.4)]
    c, d = correctness_split(conv + detail, 0.5)
    assert str(c) == "0.75(3)" and str(d) == "0.50(1)"
    assert c == Accuracy(0.75, 3, 4)


def test_detail_threshold_is_strict():
    _, d = correctness_split([EvalPair("vqa_detail", "c", ("r",), 0.5)], 0.5)
    assert d.count == 0


def test_detail_without_score_is_an_error():
    with pytest.raises(ValueError):
        correctness_split([EvalPair("vqa_detail", "c", ("r",))])


def test_pair_validation():
    with pytest.raises(ValueError):
        EvalPair("caption", "c", ("r",))
    with pytest.raises(ValueError):
        EvalPair("report", "c", ())
    with pytest.raises(ValueError):
        EvalPair("vqa_detail", "c", ("r",), 1.5)


def test_fixture_corpus_hand_tally():
    pairs = load_corpus(DATA / "pairs.tsv")
    assert [p.kind for p in pairs].count("report") == 3
    rep = evaluate(pairs, 0.5)
    b1 = (math.exp(1 - 4 / 3) + 1.0 + 0.0) / 3
    assert rep.bleu[0] == pytest.approx(b1, abs=1e-6)
    # pair 1: P = 1, R = 3/4; pair 2: 1; pair 3: 0
    p, r = 1.0, 0.75
    f1 = (1 + 1.44) * p * r / (r + 1.44 * p)
    assert rep.rouge_l == pytest.approx((f1 + 1.0) / 3, abs=1e-6)
    assert str(rep.conv) == "0.75(3)" and str(rep.detail) == "0.50(1)"
    text = rep.render()
    assert "BLEU1" in text and "ROUGE_L" in text and "0.75(3)" in text and "0.50(1)" in text


def test_parse_corpus_errors():
    with pytest.raises(ValueError, match="line 1"):
        parse_corpus("report\tonly two")
    with pytest.raises(ValueError, match="line 2"):
        parse_corpus("# c\nbogus\tc\tr\n")


def test_judge_score_parsing():
    assert parse_judge_score("0.8") == 0.8
    assert parse_judge_score("Score: 1.7") == 1.0
    with pytest.raises(ValueError):
        parse_judge_score("no idea")


class FakeGen:
    def __init__(self):
        self.prompts = []

    def generate(self, prompt, images=()):
        self.prompts.append(prompt)
        return "0.9"


def test_generator_judge_fills_missing_scores():
    gen = FakeGen()
    pairs = [EvalPair("vqa_detail", "benign", ("benign lesion",))]
    rep = evaluate(pairs, 0.5, judge=GeneratorJudge(gen))
    assert str(rep.detail) == "1.00(1)"
    assert gen.prompts[0].startswith("### stage: judge")
