"""End-to-end network: features -> containment GAT -> joint transformer ->
pointer decoding for answer and explanation, plus the segmentation head."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import END, SPECIALS, ModelConfig, Sample, Vocabulary, build_vocabulary, join_tokens, normalize_text
from .features import FeatureEncoder, SubwordEmbedder, ocr_word_vector, phoc_encode, relative_location
from .graph import GAT, containment_edges
from .mmt import (
    ORDERINGS,
    TEXT_THEN_ANS,
    DecodingState,
    MultimodalTransformer,
    PointerHead,
    PointerScores,
    build_attention_mask,
    decode_step,
    tokens_to_text,
)
from .seghead import SegHead, dice_loss_tensor, pack_embedding_channels, resize_image, resize_mask

STREAMS = ("answer", "explanation")
TASKS = ("ans", "text", "vis")


@dataclass
class TokenSeq:
    inputs: np.ndarray  # (n,) combined ids fed to decode slots
    targets: np.ndarray  # (n, V + max_ocr) multi-hot
    length: int


@dataclass
class Prepared:
    sample: Sample
    q_vec: np.ndarray
    obj_app: np.ndarray
    obj_loc: np.ndarray
    ocr_ft: np.ndarray
    ocr_app: np.ndarray
    ocr_phoc: np.ndarray
    ocr_loc: np.ndarray
    ocr_norm: list[str]
    adj: np.ndarray
    image: np.ndarray
    gt_mask: np.ndarray
    answer_seq: TokenSeq
    expl_seqs: list[TokenSeq]


def encode_target(text: str, cap: int, vocab: Vocabulary, ocr_norm: Sequence[str], max_ocr: int) -> TokenSeq:
    """Multi-hot targets over [vocab | OCR] for each decode step.

    A word found both in the vocabulary and among the OCR tokens sets both
    bits; the slot input prefers the OCR copy. Words found nowhere map to
    <unk>.
    """
    V = len(vocab)
    words = normalize_text(text)[:cap]
    if len(words) < cap:
        words.append(END)
    targets = np.zeros((len(words), V + max_ocr), np.float32)
    inputs = [vocab.begin_id]
    for t, w in enumerate(words):
        choice = None
        if w == END:
            targets[t, vocab.end_id] = 1
            choice = vocab.end_id
        else:
            hits = [n for n, o in enumerate(ocr_norm[:max_ocr]) if o == w]
            for n in hits:
                targets[t, V + n] = 1
            if w in vocab and w not in SPECIALS:
                targets[t, vocab.index[w]] = 1
                choice = vocab.index[w]
            if hits:
                choice = V + hits[0]
            if choice is None:
                targets[t, vocab.unk_id] = 1
                choice = vocab.unk_id
        inputs.append(choice)
    return TokenSeq(np.array(inputs[: len(words)], np.int64), targets, len(words))


def prepare_sample(sample: Sample, cfg: ModelConfig, vocab: Vocabulary, embedder: SubwordEmbedder) -> Prepared:
    W, H = sample.image_dims
    q_words = normalize_text(sample.question)
    if len(q_words) > cfg.max_question_len:
        warnings.warn(f"{sample.question_id}: question truncated to {cfg.max_question_len} tokens", stacklevel=2)
    q_words = q_words[: cfg.max_question_len]
    F_ = cfg.fasttext_dim
    q_vec = np.stack([embedder(w) for w in q_words]) if q_words else np.zeros((0, F_), np.float32)

    objs = sample.objects[: cfg.max_objects]
    ocr = sample.ocr[: cfg.max_ocr]
    for item in list(objs) + list(ocr):
        if len(item.appearance) != cfg.app_dim:
            raise ValueError(f"{sample.question_id}: appearance length {len(item.appearance)} != {cfg.app_dim}")
    A = cfg.app_dim
    obj_app = np.stack([o.appearance for o in objs]).astype(np.float32) if objs else np.zeros((0, A), np.float32)
    obj_loc = np.stack([relative_location(o.box, W, H) for o in objs]) if objs else np.zeros((0, 4), np.float32)
    ocr_ft = np.stack([ocr_word_vector(t.text, embedder) for t in ocr]) if ocr else np.zeros((0, F_), np.float32)
    ocr_app = np.stack([t.appearance for t in ocr]).astype(np.float32) if ocr else np.zeros((0, A), np.float32)
    ocr_phoc = (
        np.stack([phoc_encode(t.text) for t in ocr]).astype(np.float32) if ocr else np.zeros((0, cfg.phoc_dim), np.float32)
    )
    ocr_loc = np.stack([relative_location(t.box, W, H) for t in ocr]) if ocr else np.zeros((0, 4), np.float32)
    ocr_norm = [join_tokens(normalize_text(t.text)) for t in ocr]

    N = cfg.max_objects + cfg.max_ocr
    adj = np.zeros((N, N), bool)
    node_pos = list(range(len(objs))) + [cfg.max_objects + k for k in range(len(ocr))]
    for s, d in containment_edges([o.box for o in objs] + [t.box for t in ocr]):
        adj[node_pos[s], node_pos[d]] = True

    S = cfg.seg_input_size
    gt = np.asarray(sample.visual_explanation.values, np.float32)
    return Prepared(
        sample=sample,
        q_vec=q_vec.astype(np.float32),
        obj_app=obj_app,
        obj_loc=obj_loc,
        ocr_ft=ocr_ft,
        ocr_app=ocr_app,
        ocr_phoc=ocr_phoc,
        ocr_loc=ocr_loc,
        ocr_norm=ocr_norm,
        adj=adj,
        image=resize_image(sample.image, S),
        gt_mask=(resize_mask(gt, S) >= 0.5).astype(np.float32),
        answer_seq=encode_target(sample.majority_answer, cfg.max_answer_len, vocab, ocr_norm, cfg.max_ocr),
        expl_seqs=[
            encode_target(e, cfg.max_expl_len, vocab, ocr_norm, cfg.max_ocr) for e in sample.text_explanations
        ],
    )


def prepare_all(samples, cfg, vocab, embedder, workers: int | None = None) -> list[Prepared]:
    """Prepare samples, optionally across MTX_NUM_WORKERS threads; output
    order always follows input order."""
    workers = workers or int(os.environ.get("MTX_NUM_WORKERS", "1"))
    if workers <= 1:
        return [prepare_sample(s, cfg, vocab, embedder) for s in samples]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda s: prepare_sample(s, cfg, vocab, embedder), samples))


@dataclass
class Batch:
    q: torch.Tensor
    q_mask: torch.Tensor
    obj_app: torch.Tensor
    obj_loc: torch.Tensor
    obj_mask: torch.Tensor
    ocr_ft: torch.Tensor
    ocr_app: torch.Tensor
    ocr_phoc: torch.Tensor
    ocr_loc: torch.Tensor
    ocr_mask: torch.Tensor
    adj: torch.Tensor
    image: torch.Tensor
    gt_mask: torch.Tensor
    ans_in: torch.Tensor
    ans_tgt: torch.Tensor
    ans_len: torch.Tensor
    expl_in: torch.Tensor
    expl_tgt: torch.Tensor
    expl_len: torch.Tensor
    items: list[Prepared]

    def __len__(self):
        return len(self.items)


def _pad(arrs, n, tail_shape, dtype=np.float32):
    out = np.zeros((len(arrs), n) + tail_shape, dtype)
    for b, a in enumerate(arrs):
        out[b, : len(a)] = a[:n]
    return torch.from_numpy(out)


def _lengths_mask(lengths, n):
    return torch.arange(n)[None, :] < torch.as_tensor(lengths)[:, None]


def collate(items: Sequence[Prepared], cfg: ModelConfig, vocab_size: int, expl_choice: Sequence[int] | None = None) -> Batch:
    C = vocab_size + cfg.max_ocr
    expl_choice = expl_choice or [0] * len(items)
    expl = [p.expl_seqs[k] for p, k in zip(items, expl_choice)]
    ans = [p.answer_seq for p in items]
    return Batch(
        q=_pad([p.q_vec for p in items], cfg.max_question_len, (cfg.fasttext_dim,)),
        q_mask=_lengths_mask([len(p.q_vec) for p in items], cfg.max_question_len),
        obj_app=_pad([p.obj_app for p in items], cfg.max_objects, (cfg.app_dim,)),
        obj_loc=_pad([p.obj_loc for p in items], cfg.max_objects, (4,)),
        obj_mask=_lengths_mask([len(p.obj_app) for p in items], cfg.max_objects),
        ocr_ft=_pad([p.ocr_ft for p in items], cfg.max_ocr, (cfg.fasttext_dim,)),
        ocr_app=_pad([p.ocr_app for p in items], cfg.max_ocr, (cfg.app_dim,)),
        ocr_phoc=_pad([p.ocr_phoc for p in items], cfg.max_ocr, (cfg.phoc_dim,)),
        ocr_loc=_pad([p.ocr_loc for p in items], cfg.max_ocr, (4,)),
        ocr_mask=_lengths_mask([len(p.ocr_app) for p in items], cfg.max_ocr),
        adj=torch.from_numpy(np.stack([p.adj for p in items])),
        image=torch.from_numpy(np.stack([p.image for p in items])),
        gt_mask=torch.from_numpy(np.stack([p.gt_mask for p in items])),
        ans_in=_pad([s.inputs for s in ans], cfg.max_answer_len, (), np.int64),
        ans_tgt=_pad([s.targets for s in ans], cfg.max_answer_len, (C,)),
        ans_len=torch.tensor([s.length for s in ans]),
        expl_in=_pad([s.inputs for s in expl], cfg.max_expl_len, (), np.int64),
        expl_tgt=_pad([s.targets for s in expl], cfg.max_expl_len, (C,)),
        expl_len=torch.tensor([s.length for s in expl]),
        items=list(items),
    )


class DecodeEmbedding(nn.Module):
    """Embeds previously emitted tokens fed back into decode slots: vocab
    tokens through a learned table plus their projected word vector, OCR
    tokens through their own input embedding."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        d = cfg.d_model
        self.vocab_size = vocab_size
        self.token = nn.Embedding(vocab_size, d)
        self.pos = nn.Embedding(max(cfg.max_expl_len, cfg.max_answer_len), d)
        self.stream = nn.Embedding(len(STREAMS), d)
        self.ln_vocab = nn.LayerNorm(d)
        self.ln_ocr = nn.LayerNorm(d)
        self.ln_pos = nn.LayerNorm(d)

    def forward(self, ids, vocab_text, ocr_emb, stream: int):
        """ids: (B, T) combined ids; vocab_text: (V, d) projected word
        vectors of the vocabulary; ocr_emb: (B, N, d)."""
        V = self.vocab_size
        is_ocr = ids >= V
        vid = ids.clamp(max=V - 1)
        voc = self.ln_vocab(self.token(vid) + vocab_text[vid])
        oid = (ids - V).clamp(min=0, max=ocr_emb.shape[1] - 1)
        ocr = self.ln_ocr(torch.gather(ocr_emb, 1, oid[..., None].expand(-1, -1, ocr_emb.shape[-1])))
        tok = torch.where(is_ocr[..., None], ocr, voc)
        T = ids.shape[1]
        extra = self.ln_pos(self.pos(torch.arange(T)) + self.stream.weight[stream])
        return tok + extra


class ExplainNet(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, embedder: SubwordEmbedder | None = None):
        super().__init__()
        if len(vocab) > cfg.vocab_size:
            raise ValueError(f"vocabulary of {len(vocab)} exceeds vocab_size {cfg.vocab_size}")
        if cfg.vis_expl_enabled and cfg.seq_len * cfg.d_model > 2 * cfg.seg_input_size**2:
            raise ValueError(
                f"{cfg.seq_len}x{cfg.d_model} outputs do not fit 2x{cfg.seg_input_size}^2 channels"
            )
        self.cfg, self.vocab = cfg, vocab
        self.features = FeatureEncoder(cfg, embedder)
        self.embedder = self.features.embedder
        self.gat = (
            GAT(cfg.d_model, cfg.gat_layers, cfg.gat_heads, cfg.gat_slope)
            if cfg.gat_enabled and cfg.gat_layers > 0
            else None
        )
        self.dec_emb = DecodeEmbedding(cfg, len(vocab))
        self.mmt = MultimodalTransformer(cfg)
        self.pointer = PointerHead(cfg.d_model, len(vocab))
        self.seg = SegHead(cfg) if cfg.vis_expl_enabled else None
        self.task_weights = nn.ParameterDict({f"w_{t}": nn.Parameter(torch.zeros(())) for t in self.tasks})
        vecs = np.stack([self.embedder(t) for t in vocab.tokens]).astype(np.float32)
        self.register_buffer("vocab_vecs", torch.from_numpy(vecs), persistent=False)

    @property
    def tasks(self) -> tuple[str, ...]:
        on = {"ans": True, "text": self.cfg.text_expl_enabled, "vis": self.cfg.vis_expl_enabled}
        return tuple(t for t in TASKS if on[t])

    # ------------------------------------------------------------------
    def encode(self, b: Batch):
        """Question, object and OCR slot embeddings (GAT-augmented)."""
        q = self.features.text(b.q, "question")
        obj = self.features.objects(b.obj_app, b.obj_loc)
        ocr = self.features.ocr(b.ocr_ft, b.ocr_app, b.ocr_phoc, b.ocr_loc)
        if self.gat is not None:
            nodes = torch.cat([obj, ocr], 1)
            nodes = nodes + self.gat(nodes, b.adj)
            obj, ocr = nodes[:, : obj.shape[1]], nodes[:, obj.shape[1] :]
        return q, obj, ocr

    def run(self, b: Batch, enc, expl_in, expl_len, ans_in, ans_len, ordering: torch.Tensor):
        """One transformer pass. Returns (outputs, presence, logits per stream)."""
        cfg = self.cfg
        q, obj, ocr = enc
        vocab_text = self.features.text_proj(self.vocab_vecs)
        e_emb = self.dec_emb(expl_in, vocab_text, ocr, 1)
        a_emb = self.dec_emb(ans_in, vocab_text, ocr, 0)
        x = torch.cat([q, obj, ocr, e_emb, a_emb], 1)
        e_mask = _lengths_mask(expl_len, cfg.max_expl_len)
        if not cfg.text_expl_enabled:
            e_mask = torch.zeros_like(e_mask)
        presence = torch.cat(
            [b.q_mask, b.obj_mask, b.ocr_mask, e_mask, _lengths_mask(ans_len, cfg.max_answer_len)], 1
        )
        out = self.mmt(x, build_attention_mask(presence, cfg, ordering))
        seg = cfg.segments()
        ocr_out = out[:, seg["ocr"]]
        logits = {}
        for name in ("expl_slot", "ans_slot"):
            v, o = self.pointer(out[:, seg[name]], ocr_out)
            logits[name] = torch.cat([v, o], -1)
        return out, presence, logits

    def seg_logits(self, b: Batch, out: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
        packed = pack_embedding_channels(out * presence[..., None], self.cfg.seg_input_size)
        return self.seg(b.image, packed)

    def losses(self, b: Batch, ordering: torch.Tensor) -> dict[str, torch.Tensor]:
        """Teacher-forced task losses for one batch."""
        enc = self.encode(b)
        out, presence, logits = self.run(b, enc, b.expl_in, b.expl_len, b.ans_in, b.ans_len, ordering)
        res = {"ans": self._bce(logits["ans_slot"], b.ans_tgt, b.ans_len, b.ocr_mask)}
        if self.cfg.text_expl_enabled:
            res["text"] = self._bce(logits["expl_slot"], b.expl_tgt, b.expl_len, b.ocr_mask)
        if self.seg is not None:
            prob = torch.sigmoid(self.seg_logits(b, out, presence))
            res["vis"] = dice_loss_tensor(prob, b.gt_mask)
        return res

    def _bce(self, logits, targets, lengths, ocr_mask):
        V = len(self.vocab)
        col = torch.cat([torch.ones(ocr_mask.shape[0], V, dtype=torch.bool), ocr_mask], 1)
        step = _lengths_mask(lengths, logits.shape[1])
        valid = (step[..., None] & col[:, None, :]).float()
        loss = F.binary_cross_entropy_with_logits(logits, targets, reduction="none") * valid
        return loss.sum() / step.sum().clamp(min=1)

    # ------------------------------------------------------------------
    @torch.no_grad()
    def generate(
        self, b: Batch, ordering: str = "ans_then_text", streams=("answer", "explanation"), max_len: int | None = None
    ):
        """Greedy decoding of both streams, then the visual explanation.

        ``max_len`` further limits both stream caps. Returns per-sample
        dicts with emitted tokens, decoded strings and the continuous mask
        (None when the segmentation head is disabled).
        """
        cfg, V = self.cfg, len(self.vocab)
        if not cfg.text_expl_enabled:
            streams = tuple(s for s in streams if s != "explanation")
        order_id = ORDERINGS.index(ordering)
        if order_id == TEXT_THEN_ANS:
            streams = tuple(reversed(streams))
        B = len(b)
        ord_t = torch.full((B,), order_id, dtype=torch.long)
        enc = self.encode(b)
        caps = {"answer": cfg.max_answer_len, "explanation": cfg.max_expl_len}
        limit = dict(caps) if max_len is None else {k: max(0, min(v, max_len)) for k, v in caps.items()}
        states = {s: [DecodingState(s, limit[s]) for _ in range(B)] for s in STREAMS}
        # streams not decoded yet stay padded; finished ones become context
        context = {"answer": False, "explanation": False}

        def inputs_for(stream, live):
            ids = torch.full((B, caps[stream]), self.vocab.pad_id, dtype=torch.long)
            lens = torch.zeros(B, dtype=torch.long)
            for k, st in enumerate(states[stream]):
                seq = [self.vocab.begin_id] + [i if s == "vocab" else V + i for s, i in st.emitted]
                if live:
                    n = min(st.step + 1, caps[stream])
                elif context[stream]:
                    n = min(len(st.emitted) + 1, caps[stream])
                else:
                    n = 0
                seq = seq[:n]
                ids[k, : len(seq)] = torch.tensor(seq, dtype=torch.long)
                lens[k] = len(seq)
            return ids, lens

        for stream in streams:
            other = "explanation" if stream == "answer" else "answer"
            slot = "ans_slot" if stream == "answer" else "expl_slot"
            for t in range(caps[stream]):
                live = [k for k in range(B) if not states[stream][k].done]
                if not live:
                    break
                s_ids, s_len = inputs_for(stream, True)
                o_ids, o_len = inputs_for(other, False)
                if stream == "answer":
                    _, _, logits = self.run(b, enc, o_ids, o_len, s_ids, s_len, ord_t)
                else:
                    _, _, logits = self.run(b, enc, s_ids, s_len, o_ids, o_len, ord_t)
                lg = logits[slot][:, t].double()
                for k in live:
                    n_ocr = int(b.ocr_mask[k].sum())
                    ocr_scores = lg[k, V:].clone()
                    ocr_scores[n_ocr:] = float("-inf")
                    scores = PointerScores(lg[k, :V].numpy(), ocr_scores.numpy())
                    states[stream][k] = decode_step(states[stream][k], scores, self.vocab.end_id)
            context[stream] = True

        e_ids, e_len = inputs_for("explanation", False)
        a_ids, a_len = inputs_for("answer", False)
        masks = [None] * B
        if self.seg is not None:
            out, presence, _ = self.run(b, enc, e_ids, e_len, a_ids, a_len, ord_t)
            probs = torch.sigmoid(self.seg_logits(b, out, presence))
            masks = [p.numpy().astype(np.float64) for p in probs]
        results = []
        for k, item in enumerate(b.items):
            ocr_texts = [t.text for t in item.sample.ocr[: cfg.max_ocr]]
            a = states["answer"][k].emitted
            e = states["explanation"][k].emitted
            results.append(
                {
                    "answer_tokens": a,
                    "explanation_tokens": e,
                    "answer": tokens_to_text(a, self.vocab.tokens, ocr_texts),
                    "explanation": tokens_to_text(e, self.vocab.tokens, ocr_texts),
                    "mask": masks[k],
                }
            )
        return results


def build_model_vocab(samples: Sequence[Sample], size: int) -> Vocabulary:
    """Vocabulary over questions, answers and explanations of ``samples``."""
    corpus = []
    for s in samples:
        corpus.append(s.question)
        corpus.extend(s.text_explanations)
        corpus.append(s.majority_answer)
    return build_vocabulary(corpus, size)
