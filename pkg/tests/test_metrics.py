import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmexplain.metrics import (
    bleu4,
    cider,
    cider_scores,
    iou,
    lcs_length,
    meteor,
    meteor_alignment,
    multi_ref_average,
    rouge_l,
    score_corpus,
    vqa_accuracy,
)
from oracles import bleu4_oracle, cider_oracle, lcs_oracle, meteor_oracle, rouge_l_oracle

WORDS = ["the", "cat", "cats", "sat", "on", "mat", "a", "red", "sign", "says", "running", "run"]
words = st.lists(st.sampled_from(WORDS), min_size=1, max_size=7)


def rand_sent(rng, lo=1, hi=7):
    return [rng.choice(WORDS) for _ in range(rng.randint(lo, hi))]


def j(ws):
    return " ".join(ws)


def test_bleu_identical_is_one():
    assert bleu4("a b c d e", ["a b c d e"]) == pytest.approx(1.0)


def test_bleu_short_hypothesis_is_zero():
    assert bleu4("a b c", ["a b c"]) == 0.0


def test_bleu_brevity_penalty():
    # every n-gram matches, hypothesis shorter than reference
    got = bleu4("a b c d", ["a b c d e f"])
    assert got == pytest.approx(math.exp(1 - 6 / 4))


def test_bleu_clipping():
    assert bleu4("the the the the the", ["the cat"]) == 0.0


@settings(max_examples=150, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=3))
def test_bleu_matches_oracle(h, refs):
    assert abs(bleu4(j(h), [j(r) for r in refs]) - bleu4_oracle(h, refs)) < 1e-12


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_lcs_matches_oracle(a, b):
    assert lcs_length(a, b) == lcs_oracle(a, b)


@settings(max_examples=100, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=3))
def test_rouge_matches_oracle(h, refs):
    assert abs(rouge_l(j(h), [j(r) for r in refs]) - rouge_l_oracle(h, refs)) < 1e-12


def test_rouge_identical_is_one():
    assert rouge_l("a b c", ["a b c"]) == pytest.approx(1.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=5), st.lists(words.filter(lambda r: len(r) <= 5), min_size=1, max_size=2))
def test_meteor_matches_oracle(h, refs):
    assert abs(meteor(j(h), [j(r) for r in refs]) - meteor_oracle(h, refs)) < 1e-12


def test_meteor_stem_match():
    # "running" and "run" share a stem
    assert len(meteor_alignment(["running"], ["run"])) == 1
    assert meteor("cats", ["cat"]) > 0


def test_meteor_prefers_fewer_chunks():
    # the second "a" should align so that "a b" stays one chunk
    al = meteor_alignment(["a", "b"], ["a", "x", "a", "b"])
    assert al == [(0, 2), (1, 3)]


def test_meteor_synonyms_extend_alignment():
    assert meteor("big dog", ["large dog"]) < meteor("big dog", ["large dog"], synonyms={"big": {"large"}})


def test_meteor_perfect_single_chunk():
    h = "a b c d"
    m = 4
    fmean = 1.0
    assert meteor(h, [h]) == pytest.approx(fmean * (1 - 0.5 * (1 / m) ** 3))


def test_cider_matches_oracle_random():
    rng = random.Random(5)
    for _ in range(30):
        n = rng.randint(1, 4)
        hyps = [rand_sent(rng) for _ in range(n)]
        refs = [[rand_sent(rng) for _ in range(rng.randint(1, 3))] for _ in range(n)]
        got = cider_scores([j(h) for h in hyps], [[j(r) for r in rs] for rs in refs])
        want = cider_oracle(hyps, refs)
        assert np.max(np.abs(got - np.array(want))) < 1e-9


def test_cider_single_image_is_zero():
    # log(N) - log(df) = 0 for every n-gram when N = 1
    assert cider(["a b c"], [["a b c"]]) == 0.0


def test_multi_ref_average():
    assert multi_ref_average(bleu4, "a b c d", ["a b c d", "w x y z"]) == pytest.approx(0.5)


def test_iou_cases():
    a = np.zeros((4, 4), bool)
    assert iou(a, a) == 1.0
    b = a.copy()
    b[:2] = True
    c = a.copy()
    c[1:3] = True
    assert iou(b, c) == pytest.approx(4 / 12)
    with pytest.raises(ValueError):
        iou(a, np.zeros((3, 3)))


def test_vqa_accuracy():
    ans = ["stop"] * 2 + ["go"] * 8
    assert vqa_accuracy("Stop!", ans) == pytest.approx(2 / 3)
    assert vqa_accuracy("go", ans) == 1.0
    assert vqa_accuracy("x", ans) == 0.0
    with pytest.raises(ValueError):
        vqa_accuracy("go", ["go"])


@settings(max_examples=50, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=3))
def test_scores_bounded(h, refs):
    r = [j(x) for x in refs]
    for f in (bleu4, rouge_l, meteor):
        assert 0.0 <= f(j(h), r) <= 1.0 + 1e-12


def test_score_corpus_groups_and_policy():
    hyps = ["a b c d e", "x y"]
    refs = [["a b c d e", "q r s t"], ["x y z"]]
    avg = score_corpus(hyps, refs, policy="average")
    nat = score_corpus(hyps, refs, policy="native")
    assert avg.vqa_accuracy is None and avg.iou is None
    assert nat.bleu4 >= avg.bleu4
    with pytest.raises(ValueError):
        score_corpus(hyps, refs, policy="bogus")
    rep = score_corpus(None, None, pred_masks=[np.ones((2, 2))], gt_masks=[np.ones((2, 2))])
    assert rep.iou == 1.0 and rep.bleu4 is None
    assert rep.percent()["iou"] == 100.0
