"""Joint training of answer, textual and visual explanation heads."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .core import ModelConfig, Sample, Vocabulary
from .features import SubwordEmbedder
from .metrics import ScoreReport, score_corpus
from .mmt import ORDERINGS
from .model import TASKS, ExplainNet, Prepared, collate, prepare_all

CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


def multitask_loss(losses: Mapping[str, torch.Tensor | float], weights: Mapping[str, torch.Tensor | float]):
    """Sum of L_i * exp(-w_i) + w_i over the tasks present in ``losses``.

    ``weights`` is keyed ``w_<task>``; a task missing from ``losses`` is
    disabled and contributes nothing. Plain floats in give a float out.
    """
    total = 0.0
    for task, L in losses.items():
        w = weights[f"w_{task}"]
        if isinstance(L, torch.Tensor) or isinstance(w, torch.Tensor):
            total = total + L * torch.exp(-torch.as_tensor(w)) + w
        else:
            if not math.isfinite(L):
                raise NonFiniteLoss(f"task loss {task} is not finite")
            total += L * math.exp(-w) + w
    return total


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 0.0
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")


def _hash_int(*parts) -> int:
    h = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def reference_index(n_refs: int, question_id: str, epoch: int, seed: int) -> int:
    if n_refs <= 0:
        raise ValueError("no references to sample from")
    return _hash_int("ref", question_id, epoch, seed) % n_refs


def sample_reference(explanations: Sequence[str], question_id: str, epoch: int, seed: int) -> str:
    """Uniform pick, fixed within an epoch and redrawn across epochs."""
    return explanations[reference_index(len(explanations), question_id, epoch, seed)]


def phased_step(rng: np.random.Generator) -> str:
    """Decoding order for one batch, uniform over the three orderings."""
    return ORDERINGS[int(rng.integers(len(ORDERINGS)))]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 0x0D])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xE0]).permutation(n)


def batch_plan(n: int, batch_size: int, step: int, seed: int) -> tuple[int, np.ndarray]:
    """(epoch, sample indices) of optimizer step ``step``."""
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = epoch_order(n, seed, epoch)
    return epoch, perm[k * batch_size : (k + 1) * batch_size]


def make_batch(model: ExplainNet, items: Sequence[Prepared], step: int, n: int, tcfg: TrainConfig):
    epoch, idx = batch_plan(n, tcfg.batch_size, step, tcfg.seed)
    chosen = [items[i] for i in idx]
    ref_epoch = epoch if model.cfg.multiref_enabled else 0
    refs = [
        reference_index(len(p.expl_seqs), p.sample.question_id, ref_epoch, tcfg.seed)
        if model.cfg.multiref_enabled
        else 0
        for p in chosen
    ]
    batch = collate(chosen, model.cfg, len(model.vocab), refs)
    ordering = phased_step(step_rng(tcfg.seed, step))
    return batch, ordering


def loss_for_batch(model: ExplainNet, batch, ordering: str):
    ord_t = torch.full((len(batch),), ORDERINGS.index(ordering), dtype=torch.long)
    parts = model.losses(batch, ord_t)
    return multitask_loss(parts, model.task_weights), parts


# ---------------------------------------------------------------------------
# checkpoints


def _state_arrays(model: ExplainNet, opt: torch.optim.Adam | None):
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if st:
                    arrays[f"adam.exp_avg.{names[id(p)]}"] = st["exp_avg"]
                    arrays[f"adam.exp_avg_sq.{names[id(p)]}"] = st["exp_avg_sq"]
    return arrays


def save_checkpoint(path_stem: str | Path, model: ExplainNet, opt=None, extra: dict | None = None) -> Path:
    """Write ``<stem>.bin`` (flat float32) and ``<stem>.json`` (manifest)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in _state_arrays(model, opt).items():
        a = t.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(a)
        offset += a.size
    flat = np.concatenate(blobs) if blobs else np.zeros(0, "<f4")
    adam_steps = {}
    if opt is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in opt.state.items():
            if st:
                adam_steps[names[id(p)]] = float(st["step"])
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": list(model.vocab.tokens),
        "embedder_dim": model.embedder.dim,
        "tensors": entries,
        "adam_steps": adam_steps,
        **(extra or {}),
    }
    tmp = stem.with_suffix(".bin.tmp")
    flat.tofile(tmp)
    tmp.replace(stem.with_suffix(".bin"))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    return stem.with_suffix(".json")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {manifest.get('version')}")
    flat = np.fromfile(stem.with_suffix(".bin"), "<f4")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > flat.size:
            raise CheckpointMismatch(f"checkpoint data truncated at {e['name']}")
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"])
    return manifest, arrays


def parameter_manifest(model: ExplainNet) -> dict[str, tuple[int, ...]]:
    return {n: tuple(p.shape) for n, p in model.named_parameters()}


def load_model(path: str | Path, embedder: SubwordEmbedder | None = None) -> tuple[ExplainNet, dict]:
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    model = ExplainNet(cfg, Vocabulary(tuple(manifest["vocab"])), embedder)
    _load_params(model, arrays)
    return model, manifest


def _load_params(model: ExplainNet, arrays):
    state = model.state_dict()
    want = {f"param.{k}" for k in state}
    have = {k for k in arrays if k.startswith("param.")}
    if want != have:
        raise CheckpointMismatch(
            f"parameter mismatch: missing {sorted(want - have)[:5]}, unexpected {sorted(have - want)[:5]}"
        )
    model.load_state_dict({k: torch.from_numpy(arrays[f"param.{k}"].copy()) for k in state})


def _restore_optimizer(opt, model, manifest, arrays):
    names = dict(model.named_parameters())
    for n, steps in manifest.get("adam_steps", {}).items():
        p = names[n]
        opt.state[p] = {
            "step": torch.tensor(steps),
            "exp_avg": torch.from_numpy(arrays[f"adam.exp_avg.{n}"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.exp_avg_sq.{n}"].copy()),
        }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    last: Path
    best: Path
    log: Path
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def make_optimizer(model: ExplainNet, tcfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def train(
    samples: Sequence[Sample] | Sequence[Prepared],
    model: ExplainNet,
    tcfg: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam over all parameters (task weights included).

    Every ``eval_every`` steps the mean window losses are appended to
    ``metrics.jsonl`` and the ``last`` checkpoint is written; ``best`` tracks
    the lowest window train loss.
    """
    if not samples:
        raise ValueError("empty training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = samples if isinstance(samples[0], Prepared) else prepare_all(samples, model.cfg, model.vocab, model.embedder)
    opt = make_optimizer(model, tcfg)
    last, best, log_path = out / "checkpoints" / "last", out / "checkpoints" / "best", out / "metrics.jsonl"
    start, best_loss = 0, math.inf
    if resume and last.with_suffix(".json").exists():
        manifest, arrays = read_checkpoint(last)
        if manifest["config"] != model.cfg.to_dict() or manifest["vocab"] != list(model.vocab.tokens):
            raise CheckpointMismatch("checkpoint was written for a different config or vocabulary")
        if manifest.get("train_config", {}).get("seed", tcfg.seed) != tcfg.seed:
            raise CheckpointMismatch("checkpoint was written with a different seed")
        _load_params(model, arrays)
        _restore_optimizer(opt, model, manifest, arrays)
        start, best_loss = manifest["step"], manifest["best_loss"]
    elif not resume and log_path.exists():
        log_path.unlink()

    model.train()
    window: dict[str, list[float]] = {}
    history = []
    t0 = time.perf_counter()
    for step in range(start, tcfg.max_steps):
        batch, ordering = make_batch(model, items, step, len(items), tcfg)
        total, parts = loss_for_batch(model, batch, ordering)
        if not torch.isfinite(total):
            dump = out / f"nonfinite_step{step}.json"
            dump.write_text(
                json.dumps(
                    {
                        "step": step,
                        "ordering": ordering,
                        "question_ids": [p.sample.question_id for p in batch.items],
                        "losses": {k: v.item() for k, v in parts.items()},
                    },
                    indent=1,
                )
            )
            raise NonFiniteLoss(
                f"non-finite loss at step {step}; batch {[p.sample.question_id for p in batch.items]} dumped to {dump}"
            )
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        window.setdefault("total", []).append(total.item())
        for t in TASKS:
            if t in parts:
                window.setdefault(f"L_{t}", []).append(parts[t].item())
        done = step + 1
        if done % tcfg.eval_every == 0 or done == tcfg.max_steps:
            rec = {"step": done}
            for t in TASKS:
                key = f"L_{t}"
                rec[key] = float(np.mean(window[key])) if key in window else None
                w = model.task_weights[f"w_{t}"] if f"w_{t}" in model.task_weights else None
                rec[f"w_{t}"] = w.item() if w is not None else None
            rec["total"] = float(np.mean(window["total"]))
            window = {}
            history.append(rec)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            improved = rec["total"] < best_loss
            best_loss = min(best_loss, rec["total"])
            extra = {"step": done, "best_loss": best_loss, "train_config": asdict(tcfg)}
            save_checkpoint(last, model, opt, extra)
            if improved:
                save_checkpoint(best, model, None, extra)
            if progress:
                progress(rec)
    if not last.with_suffix(".json").exists():
        save_checkpoint(last, model, opt, {"step": start, "best_loss": best_loss, "train_config": asdict(tcfg)})
    if not best.with_suffix(".json").exists():
        save_checkpoint(best, model, None, {"step": start, "best_loss": best_loss, "train_config": asdict(tcfg)})
    model.eval()
    return TrainResult(last.with_suffix(".json"), best.with_suffix(".json"), log_path, history, time.perf_counter() - t0)


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Prediction:
    question_id: str
    answer: str
    explanation: str
    mask: np.ndarray | None  # continuous, at seg_input_size


def predict(model: ExplainNet, items: Sequence[Prepared], batch_size: int = 32, ordering: str = "ans_then_text"):
    model.eval()
    preds = []
    for k in range(0, len(items), batch_size):
        chunk = items[k : k + batch_size]
        batch = collate(chunk, model.cfg, len(model.vocab))
        for p, res in zip(chunk, model.generate(batch, ordering)):
            preds.append(Prediction(p.sample.question_id, res["answer"], res["explanation"], res["mask"]))
    return preds


def evaluate(
    model: ExplainNet,
    samples: Sequence[Sample] | Sequence[Prepared],
    batch_size: int = 32,
    policy: str = "average",
) -> tuple[ScoreReport, list[Prediction]]:
    """Generate for every sample and score answers, explanations and masks.

    IoU compares binarized predictions with the ground truth resampled to
    seg_input_size. Text metrics are omitted when the textual head is
    disabled, IoU when the visual head is disabled.
    """
    items = samples if samples and isinstance(samples[0], Prepared) else prepare_all(
        samples, model.cfg, model.vocab, model.embedder
    )
    preds = predict(model, items, batch_size)
    text = model.cfg.text_expl_enabled
    vis = model.cfg.vis_expl_enabled
    threshold = [it.sample.visual_explanation.threshold for it in items]
    report = score_corpus(
        [p.explanation for p in preds] if text else None,
        [it.sample.text_explanations for it in items] if text else None,
        [p.answer for p in preds],
        [it.sample.answers for it in items],
        [p.mask >= t for p, t in zip(preds, threshold)] if vis else None,
        [it.gt_mask >= 0.5 for it in items] if vis else None,
        ids=[it.sample.question_id for it in items],
        policy=policy,
    )
    return report, preds
