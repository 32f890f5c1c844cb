"""Dataset ingestion, annotator-mask aggregation, statistics and splits.

On-disk format: one JSON object per line::

    {"image_id", "question_id"?, "image_path", "question", "answers": [...],
     "ocr": [{"text", "box": [x0, y0, x1, y1], "appearance_path" | null, "confidence"}],
     "objects": [{"box", "appearance_path" | null, "score"}],
     "explanations": [...], "mask_path"}

Paths are resolved relative to the dataset file. Masks are 8-bit
single-channel images (0/255); appearance vectors are little-endian float32
flat binaries.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import (
    BoundingBox,
    ObjectRegion,
    OcrToken,
    Sample,
    SegmentationMask,
    build_vocabulary,
    join_tokens,
    normalize_text,
    pad_answers,
)
from .metrics import bleu4

log = logging.getLogger(__name__)

MAX_OCR = 100
MAX_OBJECTS = 36
MAX_EXPLANATIONS = 5


class DatasetError(ValueError):
    pass


class InsufficientSentences(ValueError):
    """Self-BLEU needs at least two sentences."""


@dataclass
class AnnotationBundle:
    question_id: str
    masks: list[np.ndarray]
    explanations: list[str]

    def __post_init__(self):
        if not self.masks:
            raise ValueError(f"{self.question_id}: no annotator masks")
        if len(self.masks) != len(self.explanations):
            raise ValueError(
                f"{self.question_id}: {len(self.masks)} masks but "
                f"{len(self.explanations)} explanations"
            )


def aggregate_masks(bundle: AnnotationBundle) -> SegmentationMask:
    """Average annotator masks and keep pixels whose mean is >= 0.5."""
    shape = np.asarray(bundle.masks[0]).shape
    for k, m in enumerate(bundle.masks):
        if np.asarray(m).shape != shape:
            raise ValueError(
                f"{bundle.question_id}: mask {k} has shape {np.asarray(m).shape}, expected {shape}"
            )
    votes = np.sum([np.asarray(m) > 0 for m in bundle.masks], axis=0)
    # mean >= 0.5  <=>  2 * votes >= count, kept in integers
    binary = (2 * votes >= len(bundle.masks)).astype(np.float32)
    return SegmentationMask(binary, threshold=0.5, provenance="ground_truth")


def self_bleu4(sentences: Sequence[str]) -> float:
    if len(sentences) < 2:
        raise InsufficientSentences(f"need >= 2 sentences, got {len(sentences)}")
    total = 0.0
    for i, s in enumerate(sentences):
        total += bleu4(s, list(sentences[:i]) + list(sentences[i + 1 :]))
    return total / len(sentences)


def filter_bad_actors(bundle: AnnotationBundle) -> AnnotationBundle:
    """Drop annotators whose explanation is shorter than 3 tokens and shares
    no BLEU-4 evidence with any co-annotator."""
    n = len(bundle.explanations)
    if n < 2:
        return bundle
    keep = []
    for i, s in enumerate(bundle.explanations):
        others = bundle.explanations[:i] + bundle.explanations[i + 1 :]
        if len(normalize_text(s)) < 3 and bleu4(s, others) == 0.0:
            continue
        keep.append(i)
    if not keep:
        return bundle
    return AnnotationBundle(
        bundle.question_id,
        [bundle.masks[i] for i in keep],
        [bundle.explanations[i] for i in keep],
    )


def pseudo_appearance(image: np.ndarray, box: BoundingBox, dim: int) -> np.ndarray:
    """Deterministic stand-in feature seeded by the box and its pixel crop."""
    h, w = image.shape[:2]
    x0, y0 = int(min(box.x_min, w - 1)), int(min(box.y_min, h - 1))
    x1, y1 = max(x0 + 1, int(np.ceil(box.x_max))), max(y0 + 1, int(np.ceil(box.y_max)))
    crop = np.round(np.clip(image[y0:y1, x0:x1], 0, 1) * 255).astype(np.uint8)
    digest = hashlib.blake2b(
        crop.tobytes() + np.asarray(box.as_list(), "<f8").tobytes(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim).astype(np.float32)


def _require(rec, key, rid, types):
    if key not in rec:
        raise DatasetError(f"record {rid}: missing field {key!r}")
    if not isinstance(rec[key], types):
        raise DatasetError(f"record {rid}: field {key!r} has wrong type {type(rec[key]).__name__}")
    return rec[key]


def _box(raw, rid, field):
    try:
        return BoundingBox.from_list(raw)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"record {rid}: field {field!r}: {exc}") from None


def _load_appearance(path, base, rid, field, app_dim):
    p = base / path
    if not p.exists():
        raise DatasetError(f"record {rid}: missing appearance file {p}")
    vec = np.fromfile(p, dtype="<f4")
    if vec.size != app_dim:
        raise DatasetError(f"record {rid}: field {field!r}: appearance length {vec.size} != {app_dim}")
    return vec.astype(np.float32)


def _load_image(p: Path, rid) -> np.ndarray:
    if not p.exists():
        raise DatasetError(f"record {rid}: missing image file {p}")
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _load_mask(p: Path, rid) -> np.ndarray:
    if not p.exists():
        raise DatasetError(f"record {rid}: missing mask file {p}")
    with Image.open(p) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)


def parse_record(rec: dict, base: Path, app_dim: int = 2048) -> Sample:
    rid = rec.get("question_id") or rec.get("image_id") or "<unknown>"
    image_id = str(_require(rec, "image_id", rid, (str, int)))
    question = _require(rec, "question", rid, str)
    answers = _require(rec, "answers", rid, list)
    if not answers or not all(isinstance(a, str) for a in answers):
        raise DatasetError(f"record {rid}: field 'answers' must be a nonempty list of strings")
    expl = _require(rec, "explanations", rid, list)
    if not expl:
        raise DatasetError(f"record {rid}: field 'explanations' is empty")
    if not all(isinstance(e, str) and e.strip() for e in expl):
        raise DatasetError(f"record {rid}: field 'explanations' must hold nonempty strings")
    image = _load_image(base / _require(rec, "image_path", rid, str), rid)
    mask = _load_mask(base / _require(rec, "mask_path", rid, str), rid)
    if mask.shape != image.shape[:2]:
        raise DatasetError(f"record {rid}: field 'mask_path': mask shape {mask.shape} != image {image.shape[:2]}")

    ocr = []
    for k, o in enumerate(_require(rec, "ocr", rid, list)[:MAX_OCR]):
        field = f"ocr[{k}]"
        if not isinstance(o, dict) or not isinstance(o.get("text"), str) or not o["text"]:
            raise DatasetError(f"record {rid}: field {field!r} needs nonempty 'text'")
        box = _box(o.get("box"), rid, field + ".box")
        ap = o.get("appearance_path")
        app = (
            _load_appearance(ap, base, rid, field, app_dim)
            if ap is not None
            else pseudo_appearance(image, box, app_dim)
        )
        ocr.append(OcrToken(o["text"], box, app, float(o.get("confidence", 1.0))))

    objs = []
    raw_objs = _require(rec, "objects", rid, list)
    order = sorted(range(len(raw_objs)), key=lambda k: -float(raw_objs[k].get("score", 1.0)))
    for k in order[:MAX_OBJECTS]:
        o = raw_objs[k]
        field = f"objects[{k}]"
        box = _box(o.get("box"), rid, field + ".box")
        ap = o.get("appearance_path")
        app = (
            _load_appearance(ap, base, rid, field, app_dim)
            if ap is not None
            else pseudo_appearance(image, box, app_dim)
        )
        objs.append(ObjectRegion(box, app, float(o.get("score", 1.0))))

    try:
        return Sample(
            image_id=image_id,
            image=image,
            question=question,
            answers=pad_answers(answers),
            ocr=tuple(ocr),
            objects=tuple(objs),
            text_explanations=tuple(expl[:MAX_EXPLANATIONS]),
            visual_explanation=SegmentationMask(mask, provenance="ground_truth"),
            question_id=str(rec.get("question_id") or ""),
        )
    except ValueError as exc:
        raise DatasetError(f"record {rid}: {exc}") from None


def load_dataset(path: str | Path, app_dim: int = 2048) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file {path} not found")
    base = path.parent
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: record must be an object")
            samples.append(parse_record(rec, base, app_dim))
    return samples


def _write_png(arr: np.ndarray, p: Path):
    Image.fromarray(arr).save(p)


def save_dataset(samples: Iterable[Sample], out_dir: str | Path, name: str = "data.jsonl") -> Path:
    """Write samples (with their appearance vectors) in the on-disk format."""
    out = Path(out_dir)
    for sub in ("images", "masks", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w") as fh:
        for s in samples:
            qid = s.question_id
            img_rel = f"images/{s.image_id}.png"
            if not (out / img_rel).exists():
                _write_png(np.round(s.image * 255).astype(np.uint8), out / img_rel)
            mask_rel = f"masks/{qid}.png"
            _write_png((np.asarray(s.visual_explanation.values) > 0).astype(np.uint8) * 255, out / mask_rel)
            ocr = []
            for k, t in enumerate(s.ocr):
                rel = f"features/{qid}_ocr{k}.bin"
                np.asarray(t.appearance, "<f4").tofile(out / rel)
                ocr.append({"text": t.text, "box": t.box.as_list(), "appearance_path": rel, "confidence": t.confidence})
            objs = []
            for k, o in enumerate(s.objects):
                rel = f"features/{qid}_obj{k}.bin"
                np.asarray(o.appearance, "<f4").tofile(out / rel)
                objs.append({"box": o.box.as_list(), "appearance_path": rel, "score": o.score})
            rec = {
                "image_id": s.image_id,
                "question_id": qid,
                "image_path": img_rel,
                "question": s.question,
                "answers": list(s.answers),
                "ocr": ocr,
                "objects": objs,
                "explanations": list(s.text_explanations),
                "mask_path": mask_rel,
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def split_dataset(samples: Sequence[Sample], ratio: float = 0.8, seed: int = 0):
    """Random train/test split grouped by image so no image straddles both."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    images = sorted({s.image_id for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_train = int(round(ratio * len(images)))
    train_ids = {images[k] for k in order[:n_train]}
    train = [s for s in samples if s.image_id in train_ids]
    test = [s for s in samples if s.image_id not in train_ids]
    return train, test


@dataclass
class DatasetStats:
    n_images: int
    n_questions: int
    n_unique_questions: int
    n_text_expl: int
    n_unique_text_expl: int
    n_vis_expl: int
    avg_expl_per_q: float
    avg_words_per_expl: float
    avg_chars_per_expl: float
    vocab_size: int

    def as_dict(self):
        return dict(self.__dict__)


def dataset_stats(samples: Sequence[Sample]) -> DatasetStats:
    if not samples:
        raise ValueError("dataset_stats needs at least one sample")
    expl = [e for s in samples for e in s.text_explanations]
    words = [len(normalize_text(e)) for e in expl]
    vocab = build_vocabulary(expl, size=10**9)
    return DatasetStats(
        n_images=len({s.image_id for s in samples}),
        n_questions=len(samples),
        n_unique_questions=len({join_tokens(normalize_text(s.question)) for s in samples}),
        n_text_expl=len(expl),
        n_unique_text_expl=len({join_tokens(normalize_text(e)) for e in expl}),
        n_vis_expl=sum(1 for s in samples if s.visual_explanation is not None),
        avg_expl_per_q=len(expl) / len(samples),
        avg_words_per_expl=float(np.mean(words)) if expl else 0.0,
        avg_chars_per_expl=float(np.mean([len(e.strip()) for e in expl])) if expl else 0.0,
        vocab_size=len(vocab) - 4,
    )
