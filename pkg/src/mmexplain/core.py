"""Domain types, tokenization, vocabulary and model configuration."""

from __future__ import annotations

import dataclasses
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BEGIN, END, UNK = "<pad>", "<begin>", "<end>", "<unk>"
SPECIALS = (PAD, BEGIN, END, UNK)

# Word characters (minus underscore) optionally joined by intra-word ' or -.
_TOKEN_RE = re.compile(r"[^\W_]+(?:['\-][^\W_]+)*")


def normalize_text(s: str) -> list[str]:
    """Lowercase, strip punctuation (keeping intra-word apostrophes and
    hyphens) and split on whitespace."""
    return _TOKEN_RE.findall(s.lower())


def join_tokens(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"box coordinates must be finite and >= 0, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "BoundingBox":
        if len(xs) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, other: "BoundingBox") -> bool:
        """Inclusive containment of ``other`` inside ``self``."""
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
            and other.area <= self.area
        )


@dataclass(frozen=True, eq=False)
class OcrToken:
    text: str
    box: BoundingBox
    appearance: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if not self.text:
            raise ValueError("OCR token text must be nonempty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class ObjectRegion:
    box: BoundingBox
    appearance: np.ndarray
    score: float = 1.0


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """2D relevance map; predictions are continuous, ground truth binary."""

    values: np.ndarray
    threshold: float = 0.5
    provenance: str = "predicted"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if self.provenance not in ("predicted", "ground_truth"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.asarray(self.values).shape)


@dataclass(frozen=True, eq=False)
class Sample:
    image_id: str
    image: np.ndarray  # H x W x 3, float in [0, 1]
    question: str
    answers: tuple[str, ...]
    ocr: tuple[OcrToken, ...]
    objects: tuple[ObjectRegion, ...]
    text_explanations: tuple[str, ...]
    visual_explanation: SegmentationMask
    question_id: str = ""

    def __post_init__(self):
        if len(self.answers) != 10:
            raise ValueError(f"{self.image_id}: expected 10 answers, got {len(self.answers)}")
        if not self.text_explanations:
            raise ValueError(f"{self.image_id}: at least one textual explanation required")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.image_id}: image must be HxWx3, got {self.image.shape}")
        if self.visual_explanation.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.image_id}: mask shape {self.visual_explanation.shape} "
                f"!= image shape {self.image.shape[:2]}"
            )
        if not self.question_id:
            object.__setattr__(self, "question_id", self.image_id)

    @property
    def image_dims(self) -> tuple[int, int]:
        """(W, H) in pixels."""
        h, w = self.image.shape[:2]
        return w, h

    @property
    def majority_answer(self) -> str:
        return Counter(self.answers).most_common(1)[0][0]


def pad_answers(answers: Sequence[str], n: int = 10) -> tuple[str, ...]:
    """Pad to ``n`` answers by repeating the most frequent one."""
    if not answers:
        raise ValueError("at least one answer required")
    answers = list(answers)[:n]
    top = Counter(answers).most_common(1)[0][0]
    return tuple(answers + [top] * (n - len(answers)))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def begin_id(self):
        return self.index[BEGIN]

    @property
    def end_id(self):
        return self.index[END]

    @property
    def unk_id(self):
        return self.index[UNK]


def build_vocabulary(corpus: Iterable[str], size: int) -> Vocabulary:
    """Keep the ``size - 4`` most frequent normalized tokens; frequency ties
    are broken lexicographically."""
    if size < len(SPECIALS):
        raise ValueError(f"vocabulary size must be >= {len(SPECIALS)}")
    counts = Counter(tok for s in corpus for tok in normalize_text(s))
    for sp in SPECIALS:
        counts.pop(sp, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(SPECIALS + tuple(t for t, _ in ranked[: size - len(SPECIALS)]))


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 12
    max_question_len: int = 20
    max_objects: int = 36
    max_ocr: int = 100
    max_expl_len: int = 16
    max_answer_len: int = 12
    vocab_size: int = 5000
    seg_input_size: int = 320
    phoc_dim: int = 604
    fasttext_dim: int = 300
    app_dim: int = 2048
    gat_layers: int = 2
    gat_heads: int = 4
    gat_slope: float = 0.2
    seg_channels: int = 32
    ffn_mult: int = 4
    gat_enabled: bool = True
    multiref_enabled: bool = True
    text_expl_enabled: bool = True
    vis_expl_enabled: bool = True

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not v > 0 and f.name != "gat_layers":
                raise ValueError(f"{f.name} must be > 0, got {v}")
        if self.gat_layers < 0:
            raise ValueError("gat_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % self.gat_heads:
            raise ValueError("d_model must be divisible by gat_heads")

    @property
    def seq_len(self) -> int:
        return (
            self.max_question_len
            + self.max_objects
            + self.max_ocr
            + self.max_expl_len
            + self.max_answer_len
        )

    def segments(self) -> dict[str, slice]:
        """Slot ranges of each role in the joint sequence."""
        out, start = {}, 0
        for role, n in (
            ("question", self.max_question_len),
            ("object", self.max_objects),
            ("ocr", self.max_ocr),
            ("expl_slot", self.max_expl_len),
            ("ans_slot", self.max_answer_len),
        ):
            out[role] = slice(start, start + n)
            start += n
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# The full-size preset is the dataclass default; this one trains on one CPU core.
DESK_CONFIG = ModelConfig(
    d_model=64,
    n_layers=2,
    n_heads=4,
    max_question_len=12,
    max_objects=8,
    max_ocr=8,
    max_expl_len=16,
    max_answer_len=4,
    seg_input_size=64,
    app_dim=64,
    seg_channels=16,
)


def load_config(path: str | Path) -> ModelConfig:
    """Read a JSON mapping of ModelConfig fields; unknown keys are rejected."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return ModelConfig.from_dict(data)


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
