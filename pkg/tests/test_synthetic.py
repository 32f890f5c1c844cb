from collections import Counter

import numpy as np
import pytest

from mmexplain.synthetic import ALPHABET, COLORS, GLYPHS, generate_synthetic, target_color


def test_deterministic():
    a = generate_synthetic(1, seed=7, image_size=32, app_dim=16)[0]
    b = generate_synthetic(1, seed=7, image_size=32, app_dim=16)[0]
    assert a.image.tobytes() == b.image.tobytes()
    assert a.question == b.question and a.text_explanations == b.text_explanations
    assert [t.appearance.tobytes() for t in a.ocr] == [t.appearance.tobytes() for t in b.ocr]
    assert a.visual_explanation.values.tobytes() == b.visual_explanation.values.tobytes()


def test_sample_contract():
    for s in generate_synthetic(60, seed=4, image_size=48, app_dim=8):
        assert 2 <= len(s.objects) <= 6 and 2 <= len(s.ocr) <= 3
        assert s.answers[0] in [t.text for t in s.ocr]
        assert len(s.text_explanations) == 3
        assert all(s.answers[0] in e for e in s.text_explanations)
        m = s.visual_explanation.values
        assert m.shape == s.image.shape[:2] and m.sum() > 0
        # mask is the answer token's box
        tok = next(t for t in s.ocr if t.text == s.answers[0])
        b = tok.box
        assert m[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)].all()
        assert m.sum() == (b.x_max - b.x_min) * (b.y_max - b.y_min)


def test_colors_balanced():
    counts = Counter(target_color(s) for s in generate_synthetic(500, seed=11, image_size=64, app_dim=8))
    expected = 500 / len(COLORS)
    assert set(counts) == set(COLORS)
    assert all(abs(c - expected) <= 0.1 * expected for c in counts.values())


def test_glyphs_distinct():
    assert len(GLYPHS) == 26 == len(ALPHABET)
    assert len({g.tobytes() for g in GLYPHS.values()}) == 26
    assert all(g.shape == (5, 3) for g in GLYPHS.values())


def test_appearance_encodes_color_and_shape():
    samples = generate_synthetic(40, seed=2, image_size=32, app_dim=64, noise=0.0)
    groups = {}
    for s in samples:
        for o in s.objects:
            x0, y0 = int(o.box.x_min), int(o.box.y_min)
            px = tuple(np.round(s.image[y0, x0] * 255).astype(int))
            square = (o.box.x_max - o.box.x_min) == (o.box.y_max - o.box.y_min)
            groups.setdefault((px, square), []).append(o.appearance)
    # without noise, one (color, shape) pair maps to one vector
    assert len(groups) > 4
    for vecs in groups.values():
        assert all(np.array_equal(v, vecs[0]) for v in vecs)
    assert len({v[0].tobytes() for v in groups.values()}) == len(groups)


def test_argument_validation():
    with pytest.raises(ValueError):
        generate_synthetic(0)
    with pytest.raises(ValueError):
        generate_synthetic(1, image_size=16)


def test_questions_share_scene_with_distinct_targets():
    samples = generate_synthetic(9, seed=6, image_size=48, app_dim=8)
    assert len(samples) == 9
    by_image = {}
    for s in samples:
        by_image.setdefault(s.image_id, []).append(s)
    assert sorted(len(v) for v in by_image.values()) == [1, 2, 2, 2, 2]
    for group in by_image.values():
        assert len({s.answers[0] for s in group}) == len(group)
        assert len({target_color(s) for s in group}) == len(group)
        assert len({s.question_id for s in group}) == len(group)
    single = generate_synthetic(5, seed=6, image_size=48, app_dim=8, questions_per_image=1)
    assert len({s.image_id for s in single}) == 5
    with pytest.raises(ValueError):
        generate_synthetic(5, questions_per_image=4)
