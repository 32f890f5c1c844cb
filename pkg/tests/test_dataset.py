import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fixtures import FIVE_STATS, five_samples
from mmexplain.core import BoundingBox
from mmexplain.dataset import (
    AnnotationBundle,
    DatasetError,
    InsufficientSentences,
    aggregate_masks,
    dataset_stats,
    filter_bad_actors,
    load_dataset,
    pseudo_appearance,
    save_dataset,
    self_bleu4,
    split_dataset,
)
from mmexplain.synthetic import generate_synthetic
from oracles import aggregate_oracle


def _bundle(votes, n):
    """One-pixel masks where the first ``votes`` of ``n`` annotators mark it."""
    masks = [np.array([[1.0 if k < votes else 0.0]]) for k in range(n)]
    return AnnotationBundle("q", masks, ["x y z"] * n)


@pytest.mark.parametrize("votes,n,expected", [(3, 5, 1), (2, 5, 0), (1, 2, 1), (0, 1, 0), (1, 1, 1)])
def test_aggregation_truth_table(votes, n, expected):
    m = aggregate_masks(_bundle(votes, n))
    assert m.values[0, 0] == expected and m.provenance == "ground_truth"


def test_aggregation_shape_mismatch_names_index():
    b = AnnotationBundle("q", [np.zeros((2, 2)), np.zeros((2, 3))], ["a", "b"])
    with pytest.raises(ValueError, match="mask 1"):
        aggregate_masks(b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**16), st.randoms())
def test_aggregation_permutation_invariant_and_matches_oracle(n, seed, rnd):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((4, 4)) > 0.5).astype(float) for _ in range(n)]
    perm = list(range(n))
    rnd.shuffle(perm)
    a = aggregate_masks(AnnotationBundle("q", masks, ["e"] * n)).values
    b = aggregate_masks(AnnotationBundle("q", [masks[i] for i in perm], ["e"] * n)).values
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, aggregate_oracle(masks))


def test_self_bleu_examples():
    assert self_bleu4(["a b c d e", "a b c d e"]) == pytest.approx(1.0)
    assert self_bleu4(["a b c d", "e f g h"]) == 0.0
    with pytest.raises(InsufficientSentences):
        self_bleu4(["only one"])


def test_filter_bad_actors():
    masks = [np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2))]
    b = AnnotationBundle("q", masks, ["the sign says stop now", "ok", "the sign says stop here"])
    out = filter_bad_actors(b)
    assert out.explanations == ["the sign says stop now", "the sign says stop here"]
    assert len(out.masks) == 2 and not any(m.any() for m in out.masks)
    # short but overlapping explanations are kept
    b2 = AnnotationBundle("q", masks[:2], ["stop", "stop"])
    assert filter_bad_actors(b2).explanations == ["stop", "stop"]


def test_bundle_validation():
    with pytest.raises(ValueError):
        AnnotationBundle("q", [], [])
    with pytest.raises(ValueError):
        AnnotationBundle("q", [np.zeros((1, 1))], ["a", "b"])


def test_stats_five_sample_fixture():
    stats = dataset_stats(five_samples()).as_dict()
    assert stats == FIVE_STATS


def test_stats_small_examples():
    s = five_samples()[1]
    from dataclasses import replace

    one = replace(s, text_explanations=("a b c", "d e f"))
    st_ = dataset_stats([one])
    assert st_.avg_expl_per_q == 2.0 and st_.avg_words_per_expl == 3.0
    two = [replace(s, question_id="x"), replace(s, question_id="y")]
    assert dataset_stats(two).n_unique_questions == 1
    with pytest.raises(ValueError):
        dataset_stats([])


def test_split_grouped_and_deterministic():
    samples = generate_synthetic(10, seed=1, image_size=32, app_dim=4)
    tr, te = split_dataset(samples, 0.8, seed=5)
    assert (len(tr), len(te)) == (8, 2)
    tr2, te2 = split_dataset(samples, 0.8, seed=5)
    assert [s.question_id for s in tr] == [s.question_id for s in tr2]
    shared = five_samples()
    same = [s for s in shared if s.image_id == "img1"]
    a, b = split_dataset(same, 0.8, 0)
    assert len(a) == 0 or len(b) == 0
    with pytest.raises(ValueError):
        split_dataset(samples, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=20), st.floats(0.05, 0.95), st.integers(0, 100))
def test_split_partition_property(image_ids, ratio, seed):
    base = five_samples()[0]
    from dataclasses import replace

    samples = [replace(base, image_id=f"i{k}", question_id=f"q{n}") for n, k in enumerate(image_ids)]
    tr, te = split_dataset(samples, ratio, seed)
    assert sorted(s.question_id for s in tr + te) == sorted(s.question_id for s in samples)
    assert not {s.image_id for s in tr} & {s.image_id for s in te}


def test_save_load_roundtrip(tmp_path):
    samples = generate_synthetic(4, seed=2, image_size=32, app_dim=8)
    path = save_dataset(samples, tmp_path)
    back = load_dataset(path, app_dim=8)
    assert len(back) == 4
    for a, b in zip(samples, back):
        assert a.question_id == b.question_id and a.text_explanations == b.text_explanations
        assert a.answers == b.answers
        np.testing.assert_allclose(a.image, b.image, atol=1 / 255)
        np.testing.assert_array_equal(a.visual_explanation.values, b.visual_explanation.values)
        assert [t.text for t in a.ocr] == [t.text for t in b.ocr]
        np.testing.assert_array_equal(a.ocr[0].appearance, b.ocr[0].appearance)
        assert [o.box for o in a.objects] == [o.box for o in b.objects]


def _write_record(tmp_path, **overrides):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "im.png")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "m.png")
    rec = {
        "image_id": "i0",
        "question_id": "q0",
        "image_path": "im.png",
        "question": "what?",
        "answers": ["a"],
        "ocr": [{"text": f"w{k}", "box": [0, 0, 2, 2], "appearance_path": None, "confidence": 0.9} for k in range(105)],
        "objects": [{"box": [0, 0, 4, 4], "appearance_path": None, "score": k / 40} for k in range(40)],
        "explanations": ["e1", "e2", "e3", "e4", "e5", "e6"],
        "mask_path": "m.png",
    }
    rec.update(overrides)
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    return p


def test_load_truncates_and_pads(tmp_path):
    (s,) = load_dataset(_write_record(tmp_path), app_dim=6)
    assert len(s.ocr) == 100 and len(s.objects) == 36 and len(s.text_explanations) == 5
    assert s.objects[0].score == pytest.approx(39 / 40)
    assert s.answers == ("a",) * 10
    assert s.ocr[0].appearance.shape == (6,)


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError, match="explanations"):
        load_dataset(_write_record(tmp_path, explanations=[]), 4)
    with pytest.raises(DatasetError, match="nope.png"):
        load_dataset(_write_record(tmp_path, mask_path="nope.png"), 4)
    with pytest.raises(DatasetError, match="q0.*question"):
        rec = _write_record(tmp_path)
        data = json.loads(rec.read_text())
        del data["question"]
        rec.write_text(json.dumps(data))
        load_dataset(rec, 4)
    with pytest.raises(DatasetError, match="box"):
        load_dataset(_write_record(tmp_path, objects=[{"box": [3, 3, 1, 1]}]), 4)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing.jsonl")


def test_pseudo_appearance_deterministic():
    img = np.random.default_rng(0).random((10, 10, 3))
    b = BoundingBox(1, 1, 5, 5)
    np.testing.assert_array_equal(pseudo_appearance(img, b, 7), pseudo_appearance(img, b, 7))
    assert not np.array_equal(pseudo_appearance(img, b, 7), pseudo_appearance(img, BoundingBox(2, 1, 5, 5), 7))
