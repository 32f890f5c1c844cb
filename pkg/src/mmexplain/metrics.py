"""Captioning metrics, mask IoU and VQA soft accuracy.

Sentence metrics work on normalized tokens (see ``core.normalize_text``).
CIDEr is corpus-level because its IDF comes from the evaluation references.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .core import join_tokens, normalize_text

MULTI_REF_POLICIES = ("average", "native")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tok(s):
    return normalize_text(s) if isinstance(s, str) else list(s)


def bleu4(hyp: str, refs: Sequence[str]) -> float:
    """Sentence BLEU-4 with clipped counts, closest-length brevity penalty
    and no smoothing."""
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    h = _tok(hyp)
    if not h:
        return 0.0
    rs = [_tok(r) for r in refs]
    log_p = 0.0
    for n in range(1, 5):
        hc = _ngrams(h, n)
        total = sum(hc.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for r in rs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in hc.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / 4
    c = len(h)
    r = min((abs(len(x) - c), len(x)) for x in rs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: str, refs: Sequence[str], beta: float = 1.2) -> float:
    """LCS F-measure, maximum over references."""
    if not refs:
        raise ValueError("rouge_l needs at least one reference")
    h = _tok(hyp)
    best = 0.0
    for ref in refs:
        r = _tok(ref)
        lcs = lcs_length(h, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(h), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word)


def _count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    pairs = sorted(pairs)
    chunks = 0
    for k, (i, j) in enumerate(pairs):
        if k == 0 or not (i == pairs[k - 1][0] + 1 and j == pairs[k - 1][1] + 1):
            chunks += 1
    return chunks


# Above this many candidate alignments we keep the left-to-right one.
_MAX_ALIGNMENTS = 20000


def _class_options(hpos, rpos, h, r):
    """All maximal alignments inside one stem class: exact matches first
    (maximal per word), then stem matches among the leftovers."""
    words = sorted({h[i] for i in hpos} & {r[j] for j in rpos})
    per_word = []
    for w in words:
        hw = [i for i in hpos if h[i] == w]
        rw = [j for j in rpos if r[j] == w]
        m = min(len(hw), len(rw))
        opts = []
        for hs in itertools.combinations(hw, m):
            for rs in itertools.permutations(rw, m):
                opts.append(list(zip(hs, rs)))
        per_word.append(opts)
    out = []
    for combo in itertools.product(*per_word):
        exact = [p for opt in combo for p in opt]
        used_h = {i for i, _ in exact}
        used_r = {j for _, j in exact}
        lh = [i for i in hpos if i not in used_h]
        lr = [j for j in rpos if j not in used_r]
        m = min(len(lh), len(lr))
        for hs in itertools.combinations(lh, m):
            for rs in itertools.permutations(lr, m):
                out.append(exact + list(zip(hs, rs)))
                if len(out) > _MAX_ALIGNMENTS:
                    return None
    return out


def _greedy_alignment(h, r, synonyms):
    pairs, used_r = [], set()
    matched_h = set()
    for stage in ("exact", "stem", "syn"):
        for i, w in enumerate(h):
            if i in matched_h:
                continue
            for j, v in enumerate(r):
                if j in used_r:
                    continue
                if _match(w, v, stage, synonyms):
                    pairs.append((i, j))
                    used_r.add(j)
                    matched_h.add(i)
                    break
    return pairs


def _match(w, v, stage, synonyms):
    if stage == "exact":
        return w == v
    if stage == "stem":
        return stem(w) == stem(v)
    return v in synonyms.get(w, ()) or w in synonyms.get(v, ())


def meteor_alignment(h: Sequence[str], r: Sequence[str], synonyms=None) -> list[tuple[int, int]]:
    """Maximal exact-then-stem alignment with the fewest chunks.

    A synonym table, when given, adds a third greedy stage on whatever the
    first two stages left unmatched.
    """
    synonyms = synonyms or {}
    classes: dict[str, tuple[list, list]] = {}
    for i, w in enumerate(h):
        classes.setdefault(stem(w), ([], []))[0].append(i)
    for j, v in enumerate(r):
        if stem(v) in classes:
            classes[stem(v)][1].append(j)
    class_opts = []
    n_combos = 1
    for hpos, rpos in classes.values():
        if not rpos:
            continue
        opts = _class_options(hpos, rpos, h, r)
        if opts is None:
            return _greedy_alignment(h, r, synonyms)
        n_combos *= len(opts)
        if n_combos > _MAX_ALIGNMENTS:
            return _greedy_alignment(h, r, synonyms)
        class_opts.append(opts)
    best, best_chunks = [], None
    for combo in itertools.product(*class_opts):
        pairs = [p for opt in combo for p in opt]
        ch = _count_chunks(pairs)
        if best_chunks is None or ch < best_chunks:
            best, best_chunks = pairs, ch
    if synonyms:
        used_h = {i for i, _ in best}
        used_r = {j for _, j in best}
        for i, w in enumerate(h):
            if i in used_h:
                continue
            for j, v in enumerate(r):
                if j not in used_r and _match(w, v, "syn", synonyms):
                    best.append((i, j))
                    used_r.add(j)
                    break
    return sorted(best)


def meteor(hyp: str, refs: Sequence[str], synonyms: dict | None = None) -> float:
    """METEOR core formula (Fmean with fragmentation penalty), max over refs."""
    if not refs:
        raise ValueError("meteor needs at least one reference")
    h = _tok(hyp)
    best = 0.0
    for ref in refs:
        r = _tok(ref)
        pairs = meteor_alignment(h, r, synonyms)
        m = len(pairs)
        if m == 0:
            continue
        p, rec = m / len(h), m / len(r)
        fmean = 10 * p * rec / (rec + 9 * p)
        penalty = 0.5 * (_count_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def _cider_vectors(tokens, df, log_n):
    vecs, norms = [], []
    for n in range(1, 5):
        counts = _ngrams(tokens, n)
        v = {g: c * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, c in counts.items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider_scores(hyps: Sequence[str], refs_per_hyp: Sequence[Sequence[str]]) -> np.ndarray:
    """Per-hypothesis CIDEr (x10 scale), IDF from the reference corpus."""
    if len(hyps) != len(refs_per_hyp):
        raise ValueError("hyps and refs_per_hyp differ in length")
    if not hyps:
        return np.zeros(0)
    htoks = [_tok(h) for h in hyps]
    rtoks = [[_tok(r) for r in refs] for refs in refs_per_hyp]
    df = Counter()
    for refs in rtoks:
        df.update({g for r in refs for n in range(1, 5) for g in _ngrams(r, n)})
    log_n = math.log(float(len(hyps)))
    out = np.zeros(len(hyps))
    for k, (h, refs) in enumerate(zip(htoks, rtoks)):
        if not refs:
            raise ValueError(f"hypothesis {k} has no references")
        hv, hn = _cider_vectors(h, df, log_n)
        total = 0.0
        for r in refs:
            rv, rn = _cider_vectors(r, df, log_n)
            sim = 0.0
            for n in range(4):
                dot = sum(w * rv[n].get(g, 0.0) for g, w in hv[n].items())
                if hn[n] and rn[n]:
                    sim += dot / (hn[n] * rn[n])
            total += sim / 4
        out[k] = 10.0 * total / len(refs)
    return out


def cider(hyps: Sequence[str], refs_per_hyp: Sequence[Sequence[str]]) -> float:
    scores = cider_scores(hyps, refs_per_hyp)
    return float(scores.mean()) if len(scores) else 0.0


def multi_ref_average(metric: Callable, hyp: str, refs: Sequence[str]) -> float:
    """Mean of ``metric(hyp, [r])`` over references."""
    if not refs:
        raise ValueError("multi_ref_average needs at least one reference")
    return sum(metric(hyp, [r]) for r in refs) / len(refs)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def vqa_accuracy(pred: str, answers: Sequence[str]) -> float:
    if len(answers) != 10:
        raise ValueError(f"expected 10 answers, got {len(answers)}")
    p = join_tokens(normalize_text(pred))
    hits = sum(join_tokens(normalize_text(a)) == p for a in answers)
    return min(hits / 3.0, 1.0)


@dataclass
class ScoreReport:
    bleu4: float | None = None
    rouge_l: float | None = None
    meteor: float | None = None
    cider: float | None = None
    iou: float | None = None
    vqa_accuracy: float | None = None
    rows: list[dict] = field(default_factory=list)

    METRICS = ("vqa_accuracy", "iou", "bleu4", "meteor", "rouge_l", "cider")

    def percent(self) -> dict:
        """Metrics scaled x100, the convention of published result tables."""
        return {k: (None if getattr(self, k) is None else 100.0 * getattr(self, k)) for k in self.METRICS}


def score_corpus(
    hyps: Sequence[str] | None,
    refs_per_hyp: Sequence[Sequence[str]] | None,
    pred_answers: Sequence[str] | None = None,
    answers: Sequence[Sequence[str]] | None = None,
    pred_masks: Sequence[np.ndarray] | None = None,
    gt_masks: Sequence[np.ndarray] | None = None,
    ids: Sequence[str] | None = None,
    policy: str = "average",
) -> ScoreReport:
    """Aggregate all metrics over an evaluation set.

    ``policy="average"`` scores BLEU-4 and CIDEr against each reference
    separately and averages; ``"native"`` uses multi-reference BLEU-4.
    ROUGE-L and METEOR take the max over references either way.
    Any group passed as None is left out of the report.
    """
    if policy not in MULTI_REF_POLICIES:
        raise ValueError(f"unknown multi-reference policy {policy!r}")
    n = next(len(x) for x in (hyps, pred_answers, pred_masks) if x is not None)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    rows = [{"id": i} for i in ids]
    rep = ScoreReport(rows=rows)
    if hyps is not None:
        cid = cider_scores(hyps, refs_per_hyp)
        b, r, m = [], [], []
        for row, h, refs, c in zip(rows, hyps, refs_per_hyp, cid):
            if policy == "average":
                b.append(multi_ref_average(bleu4, h, refs))
            else:
                b.append(bleu4(h, refs))
            r.append(rouge_l(h, refs))
            m.append(meteor(h, refs))
            row.update(explanation=h, bleu4=b[-1], rouge_l=r[-1], meteor=m[-1], cider=float(c))
        rep.bleu4, rep.rouge_l, rep.meteor = (float(np.mean(x)) for x in (b, r, m))
        rep.cider = float(np.mean(cid))
    if pred_answers is not None:
        acc = [vqa_accuracy(p, a) for p, a in zip(pred_answers, answers)]
        for row, p, a in zip(rows, pred_answers, acc):
            row.update(answer=p, vqa_accuracy=a)
        rep.vqa_accuracy = float(np.mean(acc))
    if pred_masks is not None:
        ious = [iou(p, g) for p, g in zip(pred_masks, gt_masks)]
        for row, v in zip(rows, ious):
            row["iou"] = v
        rep.iou = float(np.mean(ious))
    return rep
