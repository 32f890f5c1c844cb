"""Command-line entry point: synth, train, eval, stats, render, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import DESK_CONFIG, ModelConfig, Sample, load_config
from .dataset import DatasetError, dataset_stats, load_dataset, save_dataset, split_dataset
from .metrics import ScoreReport
from .model import ExplainNet, build_model_vocab, collate, prepare_all
from .seghead import resize_mask
from .plotting import overlay, plot_loss_curves, plot_metric_bars, plot_per_sample, to_uint8
from .synthetic import generate_synthetic
from .training import CheckpointMismatch, TrainConfig, evaluate, load_model, read_log, train

ABLATIONS = {
    "full": {},
    "no-ve": {"vis_expl_enabled": False},
    "no-te": {"text_expl_enabled": False},
    "no-gat": {"gat_enabled": False},
    "no-mr": {"multiref_enabled": False},
}
# Row order of the comparison table.
ABLATION_ROWS = ("no-ve", "no-te", "no-gat", "no-mr", "full")
REPORT_KEYS = ("iou", "bleu4", "meteor", "rouge_l", "cider", "vqa_accuracy")


class UsageError(Exception):
    pass


def _config(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else DESK_CONFIG
    return cfg.replace(**ABLATIONS[getattr(args, "ablation", None) or "full"])


def _data_file(path: str | None, split: str) -> Path:
    if not path:
        raise UsageError("--data is required")
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise DatasetError(f"dataset file {p} not found")
    return p


def _load(path, split, app_dim) -> list[Sample]:
    samples = load_dataset(_data_file(path, split), app_dim)
    if not samples:
        raise DatasetError(f"no samples in {_data_file(path, split)}")
    return samples


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha1(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _flags(cfg: ModelConfig) -> dict:
    return {
        "gat": cfg.gat_enabled,
        "multiref": cfg.multiref_enabled,
        "text_expl": cfg.text_expl_enabled,
        "vis_expl": cfg.vis_expl_enabled,
    }


def _percent(report: ScoreReport) -> dict:
    p = report.percent()
    return {k: p.get(k) for k in REPORT_KEYS}


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    n = args.count if args.count is not None else args.n
    if n <= 0:
        raise UsageError("sample count must be positive")
    app_dim = _config(args).app_dim
    samples = generate_synthetic(n, seed=args.seed, image_size=args.image_size, app_dim=app_dim)
    tr, te = split_dataset(samples, 0.8, args.seed)
    out = Path(args.out)
    save_dataset(tr, out, "train.jsonl")
    save_dataset(te, out, "test.jsonl")
    print(f"wrote {len(tr)} train and {len(te)} test samples to {out}")
    return 0


def _train_one(cfg, train_samples, args, out: Path, resume=False, quiet=False):
    torch.manual_seed(args.seed)
    vocab = build_model_vocab(train_samples, cfg.vocab_size)
    model = ExplainNet(cfg, vocab)
    tcfg = TrainConfig(
        batch_size=args.batch, max_steps=args.steps, lr=args.lr, eval_every=args.eval_every, seed=args.seed
    )

    def progress(rec):
        if not quiet:
            print(json.dumps(rec), file=sys.stderr, flush=True)

    res = train(train_samples, model, tcfg, out, resume=resume, progress=progress)
    log = read_log(res.log)
    if log:
        plot_loss_curves(log, out / "loss_curves.png")
    return model, res


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _load(args.data, "train", cfg.app_dim)
    out = Path(args.out)
    _, res = _train_one(cfg, samples, args, out, resume=args.resume)
    print(json.dumps({"last": str(res.last), "best": str(res.best), "log": str(res.log), "seconds": res.seconds}))
    return 0


def _write_report(report: ScoreReport, cfg: ModelConfig, out: Path, extra: dict | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    summary = {"metrics": _percent(report), "flags": _flags(cfg), "config_hash": config_hash(cfg), **(extra or {})}
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    cols = ["id", "answer", "explanation", *[k for k in REPORT_KEYS if report.rows and k in report.rows[0]]]
    with open(out / "per_sample.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(report.rows)
    plot_metric_bars({"model": summary["metrics"]}, out / "metrics.png")
    plot_per_sample(report.rows, out / "per_sample.png")
    return summary


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, manifest = load_model(args.checkpoint)
    samples = _load(args.data, args.split, model.cfg.app_dim)
    report, _ = evaluate(model, samples)
    summary = _write_report(report, model.cfg, Path(args.out), {"checkpoint": str(args.checkpoint), "n": len(samples)})
    print(json.dumps(summary))
    return 0


def cmd_stats(args) -> int:
    p = Path(args.data or "")
    files = sorted(p.glob("*.jsonl")) if p.is_dir() else [_data_file(args.data, "")]
    if not files:
        raise DatasetError(f"no .jsonl files under {p}")
    app_dim = _config(args).app_dim
    result, everything = {}, []
    for f in files:
        samples = load_dataset(f, app_dim)
        everything += samples
        result[f.stem] = dataset_stats(samples).as_dict()
    if len(files) > 1:
        result["all"] = dataset_stats(everything).as_dict()
    print(json.dumps(result, indent=2))
    return 0


def cmd_render(args) -> int:
    if not args.checkpoint or not args.sample_id:
        raise UsageError("--checkpoint and --sample-id are required")
    model, _ = load_model(args.checkpoint)
    samples = _load(args.data, args.split, model.cfg.app_dim)
    match = [s for s in samples if args.sample_id in (s.question_id, s.image_id)]
    if not match:
        raise DatasetError(f"sample {args.sample_id!r} not found in {_data_file(args.data, args.split)}")
    s = match[0]
    items = prepare_all([s], model.cfg, model.vocab, model.embedder)
    res = model.generate(collate(items, model.cfg, len(model.vocab)))[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = render_sample(s, res, out)
    print(json.dumps({k: str(v) for k, v in files.items()}))
    return 0


def render_sample(s: Sample, res: dict, out: Path) -> dict:
    """Overlay files for one generated result (see ExplainNet.generate)."""
    H, W = s.image.shape[:2]
    pred = np.zeros((H, W)) if res["mask"] is None else resize_mask(res["mask"], (H, W))
    gt = np.asarray(s.visual_explanation.values, np.float64)
    files = {
        "pred": out / f"{s.image_id}_pred.png",
        "gt": out / f"{s.image_id}_gt.png",
        "text": out / f"{s.image_id}.txt",
    }
    Image.fromarray(to_uint8(overlay(s.image, pred))).save(files["pred"])
    Image.fromarray(to_uint8(overlay(s.image, gt, color=(0.0, 1.0, 0.0)))).save(files["gt"])
    lines = [
        f"question: {s.question}",
        f"predicted answer: {res['answer']}",
        f"explanation: {res['explanation']}",
        *[f"reference: {r}" for r in s.text_explanations],
    ]
    files["text"].write_text("\n".join(lines) + "\n")
    return files


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else DESK_CONFIG
    train_s = _load(args.data, "train", base.app_dim)
    test_s = _load(args.data, args.split, base.app_dim)
    out = Path(args.out)
    rows = {}
    for name in ABLATION_ROWS:
        cfg = base.replace(**ABLATIONS[name])
        print(f"training {name}", file=sys.stderr, flush=True)
        model, _ = _train_one(cfg, train_s, args, out / name, quiet=True)
        report, _ = evaluate(model, test_s)
        summary = _write_report(report, cfg, out / name)
        rows[name] = {**summary["metrics"], "config_hash": summary["config_hash"]}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", *REPORT_KEYS, "config_hash"])
    for name, r in rows.items():
        w.writerow([name, *["-" if r[k] is None else f"{r[k]:.2f}" for k in REPORT_KEYS], r["config_hash"]])
    (out / "ablation.csv").write_text(buf.getvalue())
    plot_metric_bars({n: {k: r[k] for k in REPORT_KEYS} for n, r in rows.items()}, out / "ablation.png")
    print(buf.getvalue(), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmexplain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="JSON model config (default: desk preset)")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", help="dataset .jsonl, or a directory holding train/test .jsonl files")
        if out:
            sp.add_argument("--out", default="out")

    def training(sp):
        sp.add_argument("--steps", type=int, default=2000)
        sp.add_argument("--batch", type=int, default=8)
        sp.add_argument("--lr", type=float, default=1e-4)
        sp.add_argument("--eval-every", type=int, default=100)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("count", type=int, nargs="?")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--image-size", type=int, default=64)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    training(sp)
    sp.add_argument("--ablation", choices=sorted(ABLATIONS), default="full")
    sp.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stats", help="dataset statistics")
    common(sp, out=False)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("render", help="overlay predicted and reference explanations")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--sample-id")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("ablate", help="train and compare the five ablation configs")
    common(sp)
    training(sp)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, DatasetError, CheckpointMismatch, json.JSONDecodeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
