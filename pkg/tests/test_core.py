import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmexplain.core import (
    DESK_CONFIG,
    SPECIALS,
    BoundingBox,
    ModelConfig,
    OcrToken,
    Sample,
    SegmentationMask,
    Vocabulary,
    build_vocabulary,
    join_tokens,
    load_config,
    normalize_text,
    pad_answers,
    save_config,
)


@pytest.mark.parametrize(
    "text,expected",
    [
        ("What is the bus number?", ["what", "is", "the", "bus", "number"]),
        ("", []),
        ("Dollar Tree!", ["dollar", "tree"]),
        ("It's a well-known sign", ["it's", "a", "well-known", "sign"]),
        ("  -- 'quoted' --  ", ["quoted"]),
    ],
)
def test_normalize_text(text, expected):
    assert normalize_text(text) == expected


@given(st.text())
def test_normalize_idempotent(s):
    toks = normalize_text(s)
    assert normalize_text(join_tokens(toks)) == toks


def test_build_vocabulary_tie_break():
    v = build_vocabulary(["a b", "a c"], 6)
    assert v.tokens == SPECIALS + ("a", "b")


def test_build_vocabulary_empty():
    assert build_vocabulary([], 4).tokens == SPECIALS


def test_build_vocabulary_rejects_tiny():
    with pytest.raises(ValueError):
        build_vocabulary(["a"], 3)


@given(st.lists(st.text(max_size=20), max_size=10), st.integers(4, 30))
def test_vocabulary_size_and_roundtrip(corpus, size):
    v = build_vocabulary(corpus, size)
    distinct = {t for s in corpus for t in normalize_text(s)} - set(SPECIALS)
    assert len(v) == min(size, 4 + len(distinct))
    assert all(v.index[t] == i for i, t in enumerate(v.tokens))


def test_vocabulary_specials_and_lookup():
    v = build_vocabulary(["x"], 10)
    assert (v.pad_id, v.begin_id, v.end_id, v.unk_id) == (0, 1, 2, 3)
    assert v.lookup("zzz") == v.unk_id
    with pytest.raises(ValueError):
        Vocabulary(("a", "a"))


def test_bounding_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 5, 1)
    with pytest.raises(ValueError):
        BoundingBox(-1, 0, 2, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, float("nan"), 1)
    b = BoundingBox.from_list([0, 0, 10, 10])
    assert b.area == 100 and b.contains(BoundingBox(2, 2, 5, 5)) and b.contains(b)


def test_ocr_token_validation():
    with pytest.raises(ValueError):
        OcrToken("", BoundingBox(0, 0, 1, 1), np.zeros(4))
    with pytest.raises(ValueError):
        OcrToken("a", BoundingBox(0, 0, 1, 1), np.zeros(4), confidence=1.5)


def _sample(**kw):
    args = dict(
        image_id="img",
        image=np.zeros((4, 5, 3)),
        question="q?",
        answers=pad_answers(["x"]),
        ocr=(),
        objects=(),
        text_explanations=("because",),
        visual_explanation=SegmentationMask(np.zeros((4, 5)), provenance="ground_truth"),
    )
    args.update(kw)
    return Sample(**args)


def test_sample_invariants():
    s = _sample()
    assert s.question_id == "img" and s.image_dims == (5, 4)
    with pytest.raises(ValueError):
        _sample(answers=("x",) * 9)
    with pytest.raises(ValueError):
        _sample(text_explanations=())
    with pytest.raises(ValueError):
        _sample(visual_explanation=SegmentationMask(np.zeros((5, 4))))


def test_pad_answers_repeats_most_frequent():
    assert pad_answers(["a", "b", "b"]) == ("a", "b", "b") + ("b",) * 7
    assert len(pad_answers(["a"] * 12)) == 10


def test_mask_validation():
    with pytest.raises(ValueError):
        SegmentationMask(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        SegmentationMask(np.zeros(3))
    with pytest.raises(ValueError):
        SegmentationMask(np.zeros((2, 2)), provenance="guess")


def test_default_config_layout():
    cfg = ModelConfig()
    assert cfg.seq_len == 184
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.max_question_len) == (768, 4, 12, 20)
    seg = cfg.segments()
    assert [(s.start, s.stop) for s in seg.values()] == [(0, 20), (20, 56), (56, 156), (156, 172), (172, 184)]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=0)
    with pytest.raises(ValueError):
        ModelConfig(d_model=100, n_heads=12)


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "c.json"
    save_config(DESK_CONFIG, p)
    assert load_config(p) == DESK_CONFIG
    p.write_text(json.dumps({**DESK_CONFIG.to_dict(), "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        load_config(p)
