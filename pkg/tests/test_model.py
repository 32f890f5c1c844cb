import numpy as np
import pytest
import torch

from mmexplain.core import Vocabulary, build_vocabulary
from mmexplain.graph import containment_edges
from mmexplain.model import ExplainNet, build_model_vocab, collate, encode_target, prepare_all, prepare_sample
from mmexplain.mmt import ORDERINGS


def make_vocab():
    return build_vocabulary(["the sign says stop", "the word is red"], 20)


def test_encode_target_bits():
    v = make_vocab()
    V = len(v)
    seq = encode_target("the STOP zebra", 5, v, ["stop", "red", "stop"], 4)
    assert seq.length == 4
    t = seq.targets
    assert t[0, v.index["the"]] == 1 and t[0].sum() == 1
    # in vocab and OCR slots 0 and 2
    assert t[1, v.index["stop"]] == 1 and t[1, V + 0] == 1 and t[1, V + 2] == 1 and t[1].sum() == 3
    assert t[2, v.unk_id] == 1 and t[2].sum() == 1
    assert t[3, v.end_id] == 1 and t[3].sum() == 1
    # inputs: <begin>, then previous tokens; OCR copy preferred
    assert seq.inputs.tolist() == [v.begin_id, v.index["the"], V + 0, v.unk_id]


def test_encode_target_cap_without_end():
    v = make_vocab()
    seq = encode_target("the sign says stop", 3, v, [], 2)
    assert seq.length == 3 and seq.targets[:, v.end_id].sum() == 0


def test_prepare_adjacency_layout(tiny_cfg, synth32):
    v = build_model_vocab(synth32, tiny_cfg.vocab_size)
    s = synth32[0]
    p = prepare_sample(s, tiny_cfg, v, ExplainNet(tiny_cfg, v).embedder)
    no = len(s.objects)
    pos = list(range(no)) + [tiny_cfg.max_objects + k for k in range(len(s.ocr))]
    want = {(pos[a], pos[b]) for a, b in containment_edges([o.box for o in s.objects] + [t.box for t in s.ocr])}
    got = {tuple(x) for x in np.argwhere(p.adj)}
    assert got == want and len(want) > 0
    assert p.image.shape == (3, tiny_cfg.seg_input_size, tiny_cfg.seg_input_size)


@pytest.fixture(scope="module")
def setup(tiny_cfg, synth32):
    v = build_model_vocab(synth32, tiny_cfg.vocab_size)
    torch.manual_seed(0)
    model = ExplainNet(tiny_cfg, v)
    items = prepare_all(synth32, tiny_cfg, v, model.embedder)
    return model, items


def test_losses_finite_and_positive(setup):
    model, items = setup
    b = collate(items[:4], model.cfg, len(model.vocab))
    for o in range(3):
        parts = model.losses(b, torch.full((4,), o))
        assert set(parts) == {"ans", "text", "vis"}
        assert all(torch.isfinite(x) and x > 0 for x in parts.values())


def test_absent_ocr_columns_ignored(setup):
    model, _ = setup
    V = len(model.vocab)
    C = V + model.cfg.max_ocr
    logits = torch.randn(2, 3, C)
    tgt = torch.zeros(2, 3, C)
    ocr_mask = torch.tensor([[True] + [False] * (model.cfg.max_ocr - 1)] * 2)
    a = model._bce(logits, tgt, torch.tensor([3, 2]), ocr_mask)
    logits2 = logits.clone()
    logits2[..., V + 1 :] = 50.0
    logits2[1, 2] = 99.0  # beyond length of sample 1
    assert torch.equal(a, model._bce(logits2, tgt, torch.tensor([3, 2]), ocr_mask))


def test_ocr_feedback_uses_ocr_embedding(setup):
    model, _ = setup
    V = len(model.vocab)
    d = model.cfg.d_model
    ocr_emb = torch.randn(1, model.cfg.max_ocr, d)
    vocab_text = torch.randn(V, d)
    de = model.dec_emb
    ids = torch.tensor([[V + 1]])
    out = de(ids, vocab_text, ocr_emb, 0)
    want = de.ln_ocr(ocr_emb[0, 1]) + de.ln_pos(de.pos.weight[0] + de.stream.weight[0])
    torch.testing.assert_close(out[0, 0], want)
    with torch.no_grad():
        de.token.weight.add_(1.0)
    torch.testing.assert_close(de(ids, vocab_text, ocr_emb, 0), out)


def test_generate_batch_independent_and_deterministic(setup):
    model, items = setup
    b = collate(items[:3], model.cfg, len(model.vocab))
    full = model.generate(b)
    again = model.generate(b)
    for k in range(3):
        single = model.generate(collate(items[k : k + 1], model.cfg, len(model.vocab)))[0]
        assert single["answer_tokens"] == full[k]["answer_tokens"]
        assert single["explanation_tokens"] == full[k]["explanation_tokens"]
        np.testing.assert_allclose(single["mask"], full[k]["mask"], atol=1e-6)
        assert again[k]["explanation"] == full[k]["explanation"]
        assert len(full[k]["answer_tokens"]) <= model.cfg.max_answer_len


@pytest.mark.parametrize("ordering", ORDERINGS)
def test_generate_all_orderings(setup, ordering):
    model, items = setup
    out = model.generate(collate(items[:2], model.cfg, len(model.vocab)), ordering)
    assert len(out) == 2 and out[0]["mask"].shape == (model.cfg.seg_input_size,) * 2


def test_generate_max_len_zero(setup):
    model, items = setup
    out = model.generate(collate(items[:2], model.cfg, len(model.vocab)), max_len=0)
    assert out[0]["answer_tokens"] == [] and out[0]["explanation"] == ""


def test_greedy_matches_teacher_forced_argmax(setup):
    # the first greedy answer token equals the argmax of a teacher-forced pass
    model, items = setup
    b = collate(items[:2], model.cfg, len(model.vocab))
    gen = model.generate(b)
    enc = model.encode(b)
    pad = torch.zeros(2, dtype=torch.long)
    ans_in = torch.full((2, model.cfg.max_answer_len), model.vocab.pad_id)
    ans_in[:, 0] = model.vocab.begin_id
    with torch.no_grad():
        _, _, logits = model.run(
            b, enc, torch.zeros(2, model.cfg.max_expl_len, dtype=torch.long), pad, ans_in, torch.ones(2, dtype=torch.long),
            torch.zeros(2, dtype=torch.long),
        )
    V = len(model.vocab)
    for k in range(2):
        lg = logits["ans_slot"][k, 0].clone()
        lg[V + int(b.ocr_mask[k].sum()) :] = -float("inf")
        best = int(torch.argmax(lg))
        first = gen[k]["answer_tokens"][:1]
        want = [] if best == model.vocab.end_id else [("vocab", best) if best < V else ("ocr", best - V)]
        assert first == want


def test_ablation_structure(tiny_cfg, synth32):
    v = build_model_vocab(synth32, tiny_cfg.vocab_size)
    full = ExplainNet(tiny_cfg, v)
    assert full.tasks == ("ans", "text", "vis")
    no_ve = ExplainNet(tiny_cfg.replace(vis_expl_enabled=False), v)
    assert no_ve.seg is None and "w_vis" not in no_ve.task_weights
    no_gat = ExplainNet(tiny_cfg.replace(gat_enabled=False), v)
    assert no_gat.gat is None and not any(n.startswith("gat.") for n, _ in no_gat.named_parameters())
    no_te = ExplainNet(tiny_cfg.replace(text_expl_enabled=False), v)
    items = prepare_all(synth32[:2], tiny_cfg, v, no_te.embedder)
    b = collate(items, tiny_cfg, len(v))
    assert set(no_te.losses(b, torch.zeros(2, dtype=torch.long))) == {"ans", "vis"}
    out = no_te.generate(b)
    assert out[0]["explanation_tokens"] == []
    assert no_ve.generate(b)[0]["mask"] is None


def test_config_checks(tiny_cfg):
    v = Vocabulary(tuple(f"t{k}" for k in range(10)) + ("<pad>", "<begin>", "<end>", "<unk>"))
    with pytest.raises(ValueError):
        ExplainNet(tiny_cfg.replace(vocab_size=5), v)
    with pytest.raises(ValueError, match="fit"):
        ExplainNet(tiny_cfg.replace(seg_input_size=16, d_model=64), v)
