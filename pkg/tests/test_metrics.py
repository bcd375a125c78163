import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comic_kit.metrics import bleu, caption_stats, evaluate, ngrams


def _oracle_bleu(hyps, refs, max_n=4):
    """Corpus BLEU with explicit loops and exact fractions for the precisions."""
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, rs in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            grams = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            for g in set(grams):
                best = max(sum(tuple(r[i : i + n]) == g for i in range(len(r) - n + 1)) for r in rs)
                matched[n - 1] += min(grams.count(g), best)
            total[n - 1] += len(grams)
    out = []
    for n in range(1, max_n + 1):
        ps = [Fraction(matched[i], total[i]) if total[i] else Fraction(0) for i in range(n)]
        if hyp_len == 0 or min(ps) == 0:
            out.append(0.0)
            continue
        bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
        out.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


def test_identity_is_one():
    corpus = [["a", "red", "circle", "above", "a", "blue", "star"], ["the", "cat", "sat", "on", "the", "mat"]]
    assert bleu(corpus, [[c] for c in corpus]) == [1.0, 1.0, 1.0, 1.0]


def test_short_hypothesis_brevity_penalty():
    b = bleu([["the", "cat"]], [[["the", "cat", "sat"]]])
    assert abs(b[0] - math.exp(-0.5)) <= 1e-9
    assert abs(b[1] - math.exp(-0.5)) <= 1e-9
    assert b[2] == 0.0 and b[3] == 0.0


def test_zero_overlap():
    assert bleu([["x", "y", "z"]], [[["a", "b", "c"]]]) == [0.0] * 4


def test_clipping():
    b = bleu([["the"] * 7], [[["the", "cat", "is", "on", "the", "mat", "now"]]], max_n=1)
    assert b[0] == pytest.approx(2 / 7)


def test_closest_reference_length_prefers_shorter_on_tie():
    # hypothesis length 4; refs of length 3 and 5 are equally close, so 3 is used and no penalty applies
    hyp = ["a", "b", "c", "d"]
    b = bleu([hyp], [[["a", "b", "c"], ["a", "b", "c", "d", "e"]]], max_n=1)
    assert b[0] == 1.0


def test_argument_errors():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [[]])


def test_ngrams():
    assert ngrams(["a", "b", "a", "b"], 2) == {("a", "b"): 2, ("b", "a"): 1}
    assert ngrams(["a"], 2) == {}


WORDS = st.lists(st.sampled_from("abcde"), min_size=0, max_size=8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(WORDS, st.lists(WORDS, min_size=1, max_size=3)), min_size=1, max_size=5))
def test_matches_oracle(pairs):
    hyps = [h for h, _ in pairs]
    refs = [rs for _, rs in pairs]
    got = bleu(hyps, refs)
    for g, want in zip(got, _oracle_bleu(hyps, refs)):
        assert g == pytest.approx(want, abs=1e-12)
        assert 0.0 <= g <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(WORDS, st.lists(WORDS, min_size=1, max_size=3)), min_size=1, max_size=5), st.randoms())
def test_corpus_order_does_not_matter(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = bleu([h for h, _ in pairs], [r for _, r in pairs])
    b = bleu([h for h, _ in shuffled], [r for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-12)


def test_caption_stats():
    unique, avg = caption_stats(["A red circle", "a blue star", "new one here now"], ["a red  circle", "other"])
    assert unique == pytest.approx(200 / 3)
    assert avg == pytest.approx(10 / 3)
    with pytest.raises(ValueError):
        caption_stats([], [])


def test_evaluate_report():
    rep = evaluate(["a red circle"], [["a red circle"]], ["a red circle"])
    assert rep.bleu[0] == 1.0 and rep.unique_pct == 0.0 and rep.avg_len == 3.0 and rep.n == 1
    assert '"n": 1' in rep.to_json()
