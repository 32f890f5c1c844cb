"""Reproducible synthetic text-in-image scenes for desk-scale training.

Each scene holds 2-6 colored rectangles on a gray background; 1-3 of them
carry a short word drawn in a 3x5 pixel font. A question asks what is
written on one rectangle (identified by color and shape) and the answer is
that rectangle's word. Scenes carry several questions, one per target
rectangle, so words cannot be told apart by anything but the question.
"""

from __future__ import annotations

import numpy as np

from .core import BoundingBox, ObjectRegion, OcrToken, Sample, SegmentationMask

_FONT = {
    "a": (".#.", "#.#", "###", "#.#", "#.#"),
    "b": ("##.", "#.#", "##.", "#.#", "##."),
    "c": (".##", "#..", "#..", "#..", ".##"),
    "d": ("##.", "#.#", "#.#", "#.#", "##."),
    "e": ("###", "#..", "##.", "#..", "###"),
    "f": ("###", "#..", "##.", "#..", "#.."),
    "g": (".##", "#..", "#.#", "#.#", ".##"),
    "h": ("#.#", "#.#", "###", "#.#", "#.#"),
    "i": ("###", ".#.", ".#.", ".#.", "###"),
    "j": ("..#", "..#", "..#", "#.#", ".#."),
    "k": ("#.#", "#.#", "##.", "#.#", "#.#"),
    "l": ("#..", "#..", "#..", "#..", "###"),
    "m": ("#.#", "###", "###", "#.#", "#.#"),
    "n": ("##.", "#.#", "#.#", "#.#", "#.#"),
    "o": (".#.", "#.#", "#.#", "#.#", ".#."),
    "p": ("##.", "#.#", "##.", "#..", "#.."),
    "q": (".#.", "#.#", "#.#", "##.", ".##"),
    "r": ("##.", "#.#", "##.", "##.", "#.#"),
    "s": (".##", "#..", ".#.", "..#", "##."),
    "t": ("###", ".#.", ".#.", ".#.", ".#."),
    "u": ("#.#", "#.#", "#.#", "#.#", "###"),
    "v": ("#.#", "#.#", "#.#", "#.#", ".#."),
    "w": ("#.#", "#.#", "###", "###", "#.#"),
    "x": ("#.#", "#.#", ".#.", "#.#", "#.#"),
    "y": ("#.#", "#.#", ".#.", ".#.", ".#."),
    "z": ("###", "..#", ".#.", "#..", "###"),
}
GLYPHS = {c: np.array([[ch == "#" for ch in row] for row in rows]) for c, rows in _FONT.items()}
ALPHABET = tuple(sorted(GLYPHS))

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 50),
    "purple": (150, 60, 190),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "white": (245, 245, 245),
}
COLOR_NAMES = tuple(COLORS)
SHAPES = ("square", "banner")
BACKGROUND = (110, 110, 110)

QUESTION_TEMPLATES = (
    "what is written on the {color} {shape}?",
    "what does the {color} {shape} say?",
    "what word is on the {color} {shape}?",
)
EXPLANATION_TEMPLATES = (
    "the word {answer} is written on the {color} {shape}",
    "{answer} appears on the {color} {shape}",
    "the {color} {shape} has the text {answer}",
)

_GRID_ROWS, _GRID_COLS = 3, 2
_CODE_SEED = 20240611


def _codebook(names, dim, salt):
    rng = np.random.default_rng([_CODE_SEED, salt, dim])
    return {n: rng.standard_normal(dim).astype(np.float32) for n in names}


def word_width(n_letters: int) -> int:
    return 4 * n_letters - 1


def draw_word(image: np.ndarray, word: str, x: int, y: int, ink=(0, 0, 0)) -> None:
    for k, ch in enumerate(word):
        g = GLYPHS[ch]
        region = image[y : y + 5, x + 4 * k : x + 4 * k + 3]
        region[g] = ink


def _balanced_colors(n, rng):
    """Target colors in full shuffled cycles: per-color counts differ by <= 1."""
    full, rest = divmod(n, len(COLOR_NAMES))
    seq = list(COLOR_NAMES) * full + list(rng.choice(COLOR_NAMES, size=rest, replace=False))
    return [seq[k] for k in rng.permutation(len(seq))]


def _group_targets(seq, group):
    """Chunk ``seq`` into groups of ``group`` distinct colors, swapping
    duplicates with later entries (counts are unchanged)."""
    seq = list(seq)
    for start in range(0, len(seq), group):
        for k in range(start, min(start + group, len(seq))):
            taken = seq[start:k]
            if seq[k] not in taken:
                continue
            for j in range(start + group, len(seq)):
                if seq[j] not in taken:
                    seq[k], seq[j] = seq[j], seq[k]
                    break
            else:
                # nothing later to swap with: take an unused color
                seq[k] = next(c for c in COLOR_NAMES if c not in taken)
    return [seq[k : k + group] for k in range(0, len(seq), group)]


def generate_synthetic(
    n: int,
    seed: int = 0,
    image_size: int = 64,
    app_dim: int = 2048,
    noise: float = 0.3,
    questions_per_image: int = 2,
) -> list[Sample]:
    """Generate ``n`` question samples; identical arguments give identical samples.

    Each scene carries ``questions_per_image`` questions about different
    text-bearing rectangles (the last scene may carry fewer), so every
    scene word is the answer to one question and a distractor for another.
    Object appearance vectors encode color and shape identity; OCR
    appearance vectors encode the word's letters plus the color of the
    surface it is printed on. Both carry Gaussian noise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if not 1 <= questions_per_image <= 3:
        raise ValueError("questions_per_image must lie in [1, 3]")
    rng = np.random.default_rng(seed)
    color_code = _codebook(COLOR_NAMES, app_dim, 1)
    shape_code = _codebook(SHAPES, app_dim, 2)
    letter_code = _codebook(ALPHABET, app_dim, 3)
    cell_w, cell_h = image_size // _GRID_COLS, image_size // _GRID_ROWS
    groups = _group_targets(_balanced_colors(n, rng), questions_per_image)
    out = []
    for i, targets in enumerate(groups):
        nq = len(targets)
        image = np.empty((image_size, image_size, 3), np.uint8)
        image[:] = BACKGROUND
        n_obj = int(rng.integers(max(2, nq), 7))
        colors = targets + list(
            rng.choice([c for c in COLOR_NAMES if c not in targets], size=n_obj - nq, replace=False)
        )
        cells = rng.choice(_GRID_ROWS * _GRID_COLS, size=n_obj, replace=False)
        n_text = int(rng.integers(nq, min(3, n_obj) + 1))
        has_text = [True] * nq + [False] * (n_obj - nq)
        for k in rng.choice(np.arange(nq, n_obj), size=n_text - nq, replace=False):
            has_text[k] = True

        objects, ocr, used_words = [], [], set()
        planted = {}
        for k in range(n_obj):
            row, col = divmod(int(cells[k]), _GRID_COLS)
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            if shape == "square":
                side = int(rng.integers(max(8, cell_h - 4), cell_h + 1))
                w = h = min(side, cell_w)
            else:
                w = int(rng.integers(max(10, cell_w - 6), cell_w + 1))
                h = int(rng.integers(7, max(8, min(10, w // 2))))
            x0 = col * cell_w + int(rng.integers(0, cell_w - w + 1))
            y0 = row * cell_h + int(rng.integers(0, cell_h - h + 1))
            image[y0 : y0 + h, x0 : x0 + w] = COLORS[colors[k]]
            box = BoundingBox(x0, y0, x0 + w, y0 + h)
            app = color_code[colors[k]] + shape_code[shape] + noise * rng.standard_normal(app_dim)
            objects.append(ObjectRegion(box, app.astype(np.float32), float(rng.uniform(0.5, 1.0))))
            if not has_text[k]:
                continue
            max_letters = max(1, (w - 1) // 4)
            lo, hi = min(3, max_letters), min(4, max_letters)
            while True:
                length = int(rng.integers(lo, hi + 1))
                word = "".join(rng.choice(ALPHABET, size=length))
                if word not in used_words:
                    used_words.add(word)
                    break
            ww = word_width(len(word))
            wx = x0 + 1 + int(rng.integers(0, max(1, w - ww - 1)))
            wy = y0 + 1 + int(rng.integers(0, max(1, h - 5 - 1)))
            draw_word(image, word, wx, wy)
            tbox = BoundingBox(wx, wy, min(wx + ww, x0 + w), min(wy + 5, y0 + h))
            # a text crop shows its glyphs on the rectangle's surface color
            tapp = np.mean([letter_code[c] for c in word], axis=0) + color_code[colors[k]]
            tapp = tapp + noise * rng.standard_normal(app_dim)
            ocr.append(OcrToken(word, tbox, tapp.astype(np.float32), float(rng.uniform(0.8, 1.0))))
            if k < nq:
                planted[k] = (shape, word, tbox)

        objects.sort(key=lambda o: -o.score)
        order = rng.permutation(len(ocr))
        ocr = tuple(ocr[k] for k in order)
        objects = tuple(objects)
        pixels = image.astype(np.float32) / 255.0
        for k in range(nq):
            shape, word, b = planted[k]
            mask = np.zeros((image_size, image_size), np.float32)
            mask[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)] = 1.0
            q = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
            fmt = dict(color=targets[k], shape=shape, answer=word)
            out.append(
                Sample(
                    image_id=f"synth{seed}_{i:05d}",
                    question_id=f"synth{seed}_{i:05d}_q{k}",
                    image=pixels,
                    question=q.format(**fmt),
                    answers=(word,) * 10,
                    ocr=ocr,
                    objects=objects,
                    text_explanations=tuple(t.format(**fmt) for t in EXPLANATION_TEMPLATES),
                    visual_explanation=SegmentationMask(mask, provenance="ground_truth"),
                )
            )
    return out


def target_color(sample: Sample) -> str:
    for c in COLOR_NAMES:
        if f" {c} " in f" {sample.question} ":
            return c
    raise ValueError(f"no color in question {sample.question!r}")
