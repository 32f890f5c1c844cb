"""Visual-explanation head: packs transformer outputs into image channels,
runs a small feature pyramid network and scores masks with soft dice."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .core import ModelConfig, SegmentationMask

DICE_EPS = 1.0


def pack_embedding_channels(mmt_out: torch.Tensor, size: int) -> torch.Tensor:
    """(..., L, d) -> (..., 2, S, S): flatten slot-major, zero-pad, reshape."""
    *lead, L, d = mmt_out.shape
    cap = 2 * size * size
    if L * d > cap:
        raise ValueError(f"{L}x{d}={L * d} values do not fit 2x{size}x{size}={cap}")
    flat = mmt_out.reshape(*lead, L * d)
    flat = F.pad(flat, (0, cap - L * d))
    return flat.reshape(*lead, 2, size, size)


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SegHead(nn.Module):
    """Four stride-2 encoder stages with lateral 1x1 connections and a
    top-down decoder.

    The packed channels hold a flattened embedding whose pixel positions
    carry no spatial meaning, so besides entering the convolutions they are
    read densely, together with the coarsest features, into a global
    context vector. The context is added at the top of the pyramid and
    scales and shifts the finest decoder features.
    """

    def __init__(self, cfg: ModelConfig, in_channels: int = 5):
        super().__init__()
        S, C = cfg.seg_input_size, cfg.seg_channels
        if S % 16:
            raise ValueError("seg_input_size must be divisible by 16")
        self.size = S
        widths = [C, 2 * C, 2 * C, 4 * C, 4 * C]
        self.stem = nn.Sequential(nn.Conv2d(in_channels, C, 3, padding=1), nn.ReLU(inplace=True))
        self.stages = nn.ModuleList(_down(widths[k], widths[k + 1]) for k in range(4))
        self.lateral = nn.ModuleList(nn.Conv2d(w, C, 1) for w in widths)
        coarse = S // 16
        self.context = nn.Linear(widths[-1] * coarse * coarse, C)
        self.read = nn.Linear(2 * S * S, C)
        # bounded context keeps the scale-and-shift stable early in training
        self.context_ln = nn.LayerNorm(C)
        self.film = nn.Linear(C, 2 * C)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.head = nn.Sequential(
            nn.Conv2d(C, C, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(C, 1, 3, padding=1)
        )

    def forward(self, image: torch.Tensor, packed: torch.Tensor) -> torch.Tensor:
        """image (B, 3, S, S), packed (B, 2, S, S) -> logits (B, S, S)."""
        if image.shape[-2:] != packed.shape[-2:] or image.shape[-1] != self.size:
            raise ValueError(f"input sizes {tuple(image.shape)} / {tuple(packed.shape)} != {self.size}")
        x = torch.cat([image, packed], 1)
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        ctx = self.context(feats[-1].flatten(1)) + self.read(packed.flatten(1))
        ctx = F.relu(self.context_ln(ctx))
        top = self.lateral[-1](feats[-1]) + ctx[:, :, None, None]
        for k in range(len(feats) - 2, -1, -1):
            top = self.lateral[k](feats[k]) + F.interpolate(top, scale_factor=2, mode="nearest")
        scale, shift = self.film(ctx)[:, :, None, None].chunk(2, 1)
        return self.head(top * (1 + scale) + shift)[:, 0]

    @torch.no_grad()
    def predict(self, image: torch.Tensor, packed: torch.Tensor, threshold: float = 0.5) -> SegmentationMask:
        """Single-sample forward: image (3, S, S), packed (2, S, S)."""
        prob = torch.sigmoid(self(image[None], packed[None]))[0]
        return SegmentationMask(prob.double().numpy(), threshold, "predicted")


def dice_loss_tensor(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice per sample over the trailing two dims, averaged."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    inter = (pred * gt).sum((-1, -2))
    total = pred.sum((-1, -2)) + gt.sum((-1, -2))
    return (1 - (2 * inter + eps) / (total + eps)).mean()


def dice_loss(pred: SegmentationMask | np.ndarray, gt: SegmentationMask | np.ndarray, eps: float = DICE_EPS) -> float:
    p = np.asarray(getattr(pred, "values", pred), np.float64)
    g = np.asarray(getattr(gt, "values", gt), np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return float(1 - (2 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps))


def binarize(mask: SegmentationMask) -> np.ndarray:
    return (np.asarray(mask.values) >= mask.threshold).astype(np.uint8)


def resize_mask(mask: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of a 2D mask to ``size`` (S or (H, W))."""
    hw = (size, size) if isinstance(size, int) else size
    t = torch.as_tensor(np.asarray(mask, np.float32))[None, None]
    return F.interpolate(t, size=hw, mode="nearest")[0, 0].numpy()


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """H x W x 3 in [0, 1] -> 3 x S x S (bilinear)."""
    t = torch.as_tensor(np.asarray(image, np.float32)).permute(2, 0, 1)[None]
    if t.shape[-2:] == (size, size):
        return t[0].numpy().copy()
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].clamp(0, 1).numpy()


def export_mask(mask: SegmentationMask, path: str | Path) -> Path:
    """Write values x 255 as an 8-bit PNG plus a ``.txt`` sidecar holding the
    binarization threshold."""
    path = Path(path)
    arr = np.round(np.clip(np.asarray(mask.values), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    path.with_suffix(".txt").write_text(f"threshold={mask.threshold}\nprovenance={mask.provenance}\n")
    return path
