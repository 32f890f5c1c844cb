"""Token features and their projection into the shared d_model space."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import BoundingBox, ModelConfig, ObjectRegion, OcrToken, normalize_text

PHOC_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
PHOC_LEVELS = (2, 3, 4, 5)
PHOC_BIGRAM_LEVELS = (2,)
# The 50 most frequent English bigrams, in the order used by word-spotting PHOC.
PHOC_BIGRAMS = (
    "th", "he", "in", "er", "an", "re", "es", "on", "st", "nt",
    "en", "at", "ed", "nd", "to", "or", "ea", "ti", "ar", "te",
    "ng", "al", "it", "as", "is", "ha", "et", "se", "ou", "of",
    "le", "sa", "ve", "ro", "ra", "ri", "hi", "ne", "me", "de",
    "co", "ta", "ec", "si", "ll", "so", "na", "li", "la", "el",
)  # fmt: skip
PHOC_DIM = len(PHOC_ALPHABET) * sum(PHOC_LEVELS) + len(PHOC_BIGRAMS) * sum(PHOC_BIGRAM_LEVELS)

ROLES = ("question", "object", "ocr", "expl_slot", "ans_slot")


def relative_location(box: BoundingBox, w_im: float, h_im: float) -> np.ndarray:
    """[x_min/W, y_min/H, x_max/W, y_max/H], clamped to the image."""
    if w_im <= 0 or h_im <= 0:
        raise ValueError("image dimensions must be positive")
    raw = np.array([box.x_min / w_im, box.y_min / h_im, box.x_max / w_im, box.y_max / h_im])
    out = np.clip(raw, 0.0, 1.0)
    if not np.array_equal(raw, out):
        warnings.warn(f"box {box.as_list()} exceeds {w_im}x{h_im} image; clamped", stacklevel=2)
    return out.astype(np.float32)


def _occupies(k: int, n: int, r: int, levels: int, span: int = 1) -> bool:
    # Unit k..k+span of an n-unit word vs region r of `levels`; scaled by n*levels
    # so the half-overlap test stays in integers.
    lo = max(k * levels, r * n)
    hi = min((k + span) * levels, (r + 1) * n)
    return 2 * (hi - lo) >= span * levels


@lru_cache(maxsize=65536)
def _phoc_cached(word: str) -> bytes:
    w = "".join(c for c in word.lower() if c in PHOC_ALPHABET)
    vec = np.zeros(PHOC_DIM, np.uint8)
    if not w:
        warnings.warn(f"word {word!r} has no PHOC characters; zero vector", stacklevel=3)
        return vec.tobytes()
    n = len(w)
    A = len(PHOC_ALPHABET)
    offset = 0
    for L in PHOC_LEVELS:
        for k, ch in enumerate(w):
            c = PHOC_ALPHABET.index(ch)
            for r in range(L):
                if _occupies(k, n, r, L):
                    vec[offset + r * A + c] = 1
        offset += L * A
    B = len(PHOC_BIGRAMS)
    for L in PHOC_BIGRAM_LEVELS:
        for k in range(n - 1):
            bg = w[k : k + 2]
            if bg not in PHOC_BIGRAMS:
                continue
            b = PHOC_BIGRAMS.index(bg)
            for r in range(L):
                if _occupies(k, n, r, L, span=2):
                    vec[offset + r * B + b] = 1
        offset += L * B
    return vec.tobytes()


def phoc_encode(word: str) -> np.ndarray:
    """Binary pyramidal histogram of characters (604 bits)."""
    return np.frombuffer(_phoc_cached(word), np.uint8).copy()


def _char_ngrams(word: str, lo: int = 3, hi: int = 5) -> list[str]:
    w = f"<{word}>"
    grams = [w]
    for n in range(lo, hi + 1):
        grams.extend(w[i : i + n] for i in range(len(w) - n + 1))
    return grams


@lru_cache(maxsize=200000)
def _hash_unit(gram: str, dim: int) -> bytes:
    seed = int.from_bytes(hashlib.blake2b(gram.encode(), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32).tobytes()


class SubwordEmbedder:
    """Character n-gram hashing embedder with an optional pretrained table."""

    def __init__(self, dim: int = 300, table: dict | None = None):
        self.dim = dim
        self.table = table or {}

    @classmethod
    def from_file(cls, path: str | Path, dim: int = 300) -> "SubwordEmbedder":
        return cls(dim, load_vector_table(path, dim))

    @lru_cache(maxsize=100000)
    def __call__(self, word: str) -> np.ndarray:
        if word in self.table:
            return self.table[word]
        grams = _char_ngrams(word)
        acc = np.zeros(self.dim, np.float32)
        for g in grams:
            acc += np.frombuffer(_hash_unit(g, self.dim), np.float32)
        # unit expected norm, the scale of normalized pretrained vectors
        return acc / math.sqrt(len(grams))


def subword_embed(word: str, dim: int = 300) -> np.ndarray:
    return _default_embedder(dim)(word)


@lru_cache(maxsize=8)
def _default_embedder(dim):
    return SubwordEmbedder(dim)


def load_vector_table(path: str | Path, dim: int = 300) -> dict[str, np.ndarray]:
    """Read ``token f1 ... f_dim`` lines into a dict."""
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) == 2 and lineno == 1:
                continue  # fastText header: count, dim
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} floats, got {len(parts) - 1}")
            table[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
    return table


@dataclass
class TokenEmbedding:
    vector: np.ndarray
    role: str
    position: int

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding is not finite")


class FeatureEncoder(nn.Module):
    """Projects question words, objects and OCR tokens into d_model."""

    def __init__(self, cfg: ModelConfig, embedder: SubwordEmbedder | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embedder = embedder or _default_embedder(cfg.fasttext_dim)
        self.text_proj = nn.Linear(cfg.fasttext_dim, d)
        self.pos_emb = nn.Embedding(max(cfg.max_question_len, cfg.max_expl_len, cfg.max_answer_len), d)
        self.role_emb = nn.Embedding(len(ROLES), d)
        self.text_ln = nn.LayerNorm(d)
        # small init so word content is not drowned out before training
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        nn.init.normal_(self.role_emb.weight, std=0.02)

        self.obj_feat = nn.Linear(cfg.app_dim, d)
        self.obj_feat_ln = nn.LayerNorm(d)
        self.obj_loc = nn.Linear(4, d)
        self.obj_loc_ln = nn.LayerNorm(d)

        self.ocr_feat = nn.Linear(cfg.fasttext_dim + cfg.app_dim, d)
        self.ocr_feat_ln = nn.LayerNorm(d)
        self.ocr_geo = nn.Linear(cfg.phoc_dim + 4, d)
        self.ocr_geo_ln = nn.LayerNorm(d)

    # batched paths ------------------------------------------------------
    def text(self, vecs: torch.Tensor, role: str) -> torch.Tensor:
        """(B, T, fasttext_dim) word vectors -> (B, T, d)."""
        T = vecs.shape[1]
        pos = self.pos_emb(torch.arange(T, device=vecs.device))
        role_vec = self.role_emb.weight[ROLES.index(role)]
        return self.text_ln(self.text_proj(vecs) + pos + role_vec)

    def objects(self, app: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
        return self.obj_feat_ln(self.obj_feat(app)) + self.obj_loc_ln(self.obj_loc(loc))

    def ocr(self, ft: torch.Tensor, app: torch.Tensor, phoc: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
        a = self.ocr_feat_ln(self.ocr_feat(torch.cat([ft, app], -1)))
        b = self.ocr_geo_ln(self.ocr_geo(torch.cat([phoc, loc], -1)))
        return a + b

    # single-item paths --------------------------------------------------
    def _check_app(self, app):
        if len(app) != self.cfg.app_dim:
            raise ValueError(f"appearance length {len(app)} != configured {self.cfg.app_dim}")

    @torch.no_grad()
    def embed_ocr(self, token: OcrToken, image_dims, position: int = 0) -> TokenEmbedding:
        self._check_app(token.appearance)
        ft = torch.from_numpy(ocr_word_vector(token.text, self.embedder))[None, None]
        app = torch.as_tensor(np.asarray(token.appearance, np.float32))[None, None]
        phoc = torch.from_numpy(phoc_encode(token.text).astype(np.float32))[None, None]
        loc = torch.from_numpy(relative_location(token.box, *image_dims))[None, None]
        v = self.ocr(ft, app, phoc, loc)[0, 0].numpy()
        return TokenEmbedding(v, "ocr", position)

    @torch.no_grad()
    def embed_object(self, region: ObjectRegion, image_dims, position: int = 0) -> TokenEmbedding:
        self._check_app(region.appearance)
        app = torch.as_tensor(np.asarray(region.appearance, np.float32))[None, None]
        loc = torch.from_numpy(relative_location(region.box, *image_dims))[None, None]
        return TokenEmbedding(self.objects(app, loc)[0, 0].numpy(), "object", position)

    @torch.no_grad()
    def embed_text_tokens(self, tokens: list[str], role: str = "question") -> list[TokenEmbedding]:
        cap = {
            "question": self.cfg.max_question_len,
            "expl_slot": self.cfg.max_expl_len,
            "ans_slot": self.cfg.max_answer_len,
        }[role]
        if len(tokens) > cap:
            warnings.warn(f"{len(tokens)} {role} tokens exceed cap {cap}; truncated", stacklevel=2)
            tokens = tokens[:cap]
        if not tokens:
            return []
        vecs = torch.from_numpy(np.stack([self.embedder(t) for t in tokens]))[None]
        out = self.text(vecs, role)[0].numpy()
        return [TokenEmbedding(v, role, p) for p, v in enumerate(out)]


def ocr_word_vector(text: str, embedder: SubwordEmbedder) -> np.ndarray:
    """Word vector of an OCR string (mean over its normalized words)."""
    words = normalize_text(text) or [text.lower()]
    return np.mean([embedder(w) for w in words], axis=0).astype(np.float32)
