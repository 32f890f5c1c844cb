"""Joint-sequence transformer with a dynamic pointer head.

Slot layout: [question | objects | OCR | explanation decode | answer decode].
Encoder slots attend to each other bidirectionally; decode slots see every
encoder slot and earlier slots of their own stream. Whether one decode
stream may read the other depends on the decoding order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ModelConfig

ORDERINGS = ("ans_then_text", "text_then_ans", "independent")
ANS_THEN_TEXT, TEXT_THEN_ANS, INDEPENDENT = range(3)
MASK_FILL = -1e9


def slot_roles(cfg: ModelConfig) -> list[str]:
    roles = []
    for role, sl in cfg.segments().items():
        roles += [role] * (sl.stop - sl.start)
    return roles


def build_attention_mask(presence: torch.Tensor, cfg: ModelConfig, ordering: torch.Tensor) -> torch.Tensor:
    """allowed[b, q, k]: may slot q read slot k.

    presence: (B, L) bool. ordering: (B,) long, one of ORDERINGS' indices.
    """
    B, L = presence.shape
    seg = cfg.segments()
    dev = presence.device
    enc = torch.zeros(L, dtype=torch.bool, device=dev)
    enc[: seg["expl_slot"].start] = True
    expl = torch.zeros(L, dtype=torch.bool, device=dev)
    expl[seg["expl_slot"]] = True
    ans = torch.zeros(L, dtype=torch.bool, device=dev)
    ans[seg["ans_slot"]] = True
    idx = torch.arange(L, device=dev)
    causal = idx[None, :] <= idx[:, None]

    base = enc[None, :] & (enc | expl | ans)[:, None]  # everyone reads encoder slots
    base = base | (expl[:, None] & expl[None, :] & causal) | (ans[:, None] & ans[None, :] & causal)
    base = base.expand(B, L, L).clone()
    o = ordering.view(B, 1, 1)
    base |= (o == ANS_THEN_TEXT) & (expl[:, None] & ans[None, :])
    base |= (o == TEXT_THEN_ANS) & (ans[:, None] & expl[None, :])
    return base & presence[:, :, None] & presence[:, None, :]


@dataclass
class MultimodalSequence:
    embeddings: torch.Tensor  # L x d
    roles: list[str]
    presence: torch.Tensor  # L bool
    attention: torch.Tensor  # L x L bool

    def __post_init__(self):
        L = self.embeddings.shape[0]
        if len(self.roles) != L or self.presence.shape != (L,) or self.attention.shape != (L, L):
            raise ValueError("inconsistent sequence shapes")


def assemble_sequence(
    cfg: ModelConfig,
    question: torch.Tensor,
    objects: torch.Tensor,
    ocr: torch.Tensor,
    expl_prefix: torch.Tensor | None = None,
    ans_prefix: torch.Tensor | None = None,
    ordering: str = "ans_then_text",
) -> MultimodalSequence:
    """Place per-role embeddings (n_i x d) into their fixed slot ranges.

    Prefixes are the decode-slot inputs already known (the <begin> embedding
    at step 0). Anything beyond a role's cap is dropped with a warning.
    """
    seg = cfg.segments()
    d = cfg.d_model
    emb = torch.zeros(cfg.seq_len, d)
    presence = torch.zeros(cfg.seq_len, dtype=torch.bool)
    parts = {"question": question, "object": objects, "ocr": ocr, "expl_slot": expl_prefix, "ans_slot": ans_prefix}
    for role, x in parts.items():
        if x is None:
            continue
        sl = seg[role]
        cap = sl.stop - sl.start
        if x.shape[0] > cap:
            warnings.warn(f"{x.shape[0]} {role} entries exceed cap {cap}; truncated", stacklevel=2)
            x = x[:cap]
        emb[sl.start : sl.start + x.shape[0]] = x
        presence[sl.start : sl.start + x.shape[0]] = True
    mask = build_attention_mask(presence[None], cfg, torch.tensor([ORDERINGS.index(ordering)]))[0]
    return MultimodalSequence(emb, slot_roles(cfg), presence, mask)


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads, self.hd = heads, d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.hd).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.hd)
        scores = scores.masked_fill(~allowed[:, None], MASK_FILL)
        # rows with nothing to read get zero attention instead of a uniform one
        probs = torch.softmax(scores, -1) * allowed.any(-1)[:, None, :, None]
        return self.out((probs @ v).transpose(1, 2).reshape(B, L, d))


class TransformerLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.attn = SelfAttention(d, heads)
        self.ln1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x, allowed):
        x = self.ln1(x + self.attn(x, allowed))
        return self.ln2(x + self.ffn(x))


class MultimodalTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers)
        )

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        """x: (B, L, d); allowed: (B, L, L) bool."""
        for layer in self.layers:
            x = layer(x, allowed)
        return x

    def forward_sequence(self, seq: MultimodalSequence) -> torch.Tensor:
        return self(seq.embeddings[None], seq.attention[None])[0]


class PointerHead(nn.Module):
    """Scores a fixed vocabulary linearly and each OCR slot bilinearly."""

    def __init__(self, d: int, vocab_size: int):
        super().__init__()
        self.vocab = nn.Linear(d, vocab_size)
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)

    def forward(self, z: torch.Tensor, ocr_out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z: (B, T, d) decode outputs; ocr_out: (B, N, d). Returns raw
        vocab (B, T, V) and OCR (B, T, N) logits, unmasked."""
        return self.vocab(z), self.query(z) @ self.key(ocr_out).transpose(-1, -2)


@dataclass
class PointerScores:
    vocab_scores: np.ndarray
    ocr_scores: np.ndarray  # -inf at absent OCR slots

    def combined(self) -> np.ndarray:
        return np.concatenate([self.vocab_scores, self.ocr_scores])


def pointer_scores(head: PointerHead, z: torch.Tensor, ocr_out: torch.Tensor, ocr_present: torch.Tensor) -> PointerScores:
    """Single-step scores for one decode output ``z`` (d,) against the OCR
    outputs (N, d)."""
    with torch.no_grad():
        v, o = head(z[None, None], ocr_out[None])
    o = o[0, 0].masked_fill(~ocr_present, float("-inf"))
    return PointerScores(v[0, 0].numpy().astype(np.float64), o.numpy().astype(np.float64))


@dataclass
class DecodingState:
    stream: str
    cap: int
    step: int = 0
    emitted: list[tuple[str, int]] = field(default_factory=list)
    teacher_forcing: bool = False
    finished: bool = False

    def __post_init__(self):
        if self.stream not in ("answer", "explanation"):
            raise ValueError(f"unknown stream {self.stream!r}")

    @property
    def done(self) -> bool:
        return self.finished or self.step >= self.cap


def decode_step(
    state: DecodingState,
    scores: PointerScores,
    end_id: int,
    ground_truth: tuple[str, int] | None = None,
) -> DecodingState:
    """Emit one token: the ground truth under teacher forcing, else the
    argmax over [vocab | OCR] with ties going to the lowest index."""
    if state.done:
        raise ValueError("decoding already finished")
    if state.teacher_forcing:
        if ground_truth is None:
            raise ValueError("teacher forcing needs a ground-truth token")
        tok = ground_truth
    else:
        combined = scores.combined()
        best = int(np.argmax(combined))
        V = len(scores.vocab_scores)
        tok = ("vocab", best) if best < V else ("ocr", best - V)
    if tok == ("vocab", end_id):
        return DecodingState(state.stream, state.cap, state.step, list(state.emitted), state.teacher_forcing, True)
    return DecodingState(
        state.stream, state.cap, state.step + 1, state.emitted + [tok], state.teacher_forcing, False
    )


def tokens_to_text(emitted: Sequence[tuple[str, int]], vocab_tokens: Sequence[str], ocr_texts: Sequence[str]) -> str:
    words = [vocab_tokens[i] if src == "vocab" else ocr_texts[i] for src, i in emitted]
    return " ".join(words)
