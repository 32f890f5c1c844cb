"""Containment graph over object and OCR boxes, and graph attention layers.

An edge j -> i exists when box i lies inside box j; node i then aggregates
messages from every j with such an edge, plus itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox


@dataclass
class SceneGraph:
    kinds: list[str]
    boxes: list[BoundingBox]
    features: np.ndarray | None = None
    edges: set[tuple[int, int]] = field(default_factory=set)

    def __post_init__(self):
        n = len(self.kinds)
        if len(self.boxes) != n:
            raise ValueError("kinds and boxes differ in length")
        for s, d in self.edges:
            if not (0 <= s < n and 0 <= d < n) or s == d:
                raise ValueError(f"invalid edge {(s, d)}")

    def __len__(self):
        return len(self.kinds)

    def adjacency(self, size: int | None = None) -> np.ndarray:
        """Boolean matrix with ``A[src, dst]`` set for each edge."""
        n = size or len(self)
        a = np.zeros((n, n), bool)
        for s, d in self.edges:
            a[s, d] = True
        return a

    def dump_edges(self) -> list[str]:
        """Edges as ``kind:index -> kind:index`` lines, indices per kind."""
        local = []
        seen: dict[str, int] = {}
        for k in self.kinds:
            local.append(seen.get(k, 0))
            seen[k] = local[-1] + 1
        return [
            f"{self.kinds[s]}:{local[s]} -> {self.kinds[d]}:{local[d]}" for s, d in sorted(self.edges)
        ]


def containment_edges(boxes: Sequence[BoundingBox]) -> set[tuple[int, int]]:
    if not boxes:
        return set()
    b = np.array([x.as_list() for x in boxes])
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    # inside[j, i]: box i inside box j
    inside = (
        (b[None, :, 0] >= b[:, None, 0])
        & (b[None, :, 1] >= b[:, None, 1])
        & (b[None, :, 2] <= b[:, None, 2])
        & (b[None, :, 3] <= b[:, None, 3])
        & (area[None, :] <= area[:, None])
    )
    np.fill_diagonal(inside, False)
    return {(int(j), int(i)) for j, i in zip(*np.nonzero(inside))}


def build_containment_graph(objects, ocr_tokens) -> SceneGraph:
    """Nodes are objects then OCR tokens, in input order."""
    kinds = ["object"] * len(objects) + ["ocr"] * len(ocr_tokens)
    if not kinds:
        raise ValueError("graph needs at least one node")
    boxes = [o.box for o in objects] + [t.box for t in ocr_tokens]
    return SceneGraph(kinds, boxes, edges=containment_edges(boxes))


class GATLayer(nn.Module):
    """Multi-head graph attention. Hidden layers concatenate heads, the
    final layer averages them."""

    def __init__(self, dim: int, heads: int, concat: bool = True, slope: float = 0.2):
        super().__init__()
        self.heads, self.concat = heads, concat
        self.head_dim = dim // heads if concat else dim
        self.W = nn.Linear(dim, heads * self.head_dim, bias=False)
        self.a_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        self.a_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.slope = slope
        nn.init.xavier_uniform_(self.a_dst)
        nn.init.xavier_uniform_(self.a_src)

    def attention(self, h: torch.Tensor, adj: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """h: (B, N, dim); adj: (B, N, N) bool with adj[b, src, dst].

        Returns attention (B, H, N_dst, N_src) and projected features
        (B, H, N, head_dim).
        """
        B, N, _ = h.shape
        wh = self.W(h).view(B, N, self.heads, self.head_dim).transpose(1, 2)
        e = (wh * self.a_dst[None, :, None]).sum(-1)[..., :, None] + (wh * self.a_src[None, :, None]).sum(-1)[
            ..., None, :
        ]
        e = F.leaky_relu(e, self.slope)
        eye = torch.eye(N, dtype=torch.bool, device=h.device)
        allowed = (adj.transpose(1, 2) | eye)[:, None]
        e = e.masked_fill(~allowed, -1e9)
        return torch.softmax(e, dim=-1), wh

    def forward(self, h: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        alpha, wh = self.attention(h, adj)
        out = alpha @ wh  # B, H, N, head_dim
        if self.concat:
            out = out.transpose(1, 2).reshape(h.shape[0], h.shape[1], -1)
        else:
            out = out.mean(1)
        return F.elu(out)


class GAT(nn.Module):
    def __init__(self, dim: int, n_layers: int = 2, heads: int = 4, slope: float = 0.2):
        super().__init__()
        self.layers = nn.ModuleList(
            GATLayer(dim, heads, concat=(k < n_layers - 1), slope=slope) for k in range(n_layers)
        )

    def forward(self, h: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h, adj)
        return h

    @torch.no_grad()
    def forward_graph(self, graph: SceneGraph) -> np.ndarray:
        h = torch.as_tensor(np.asarray(graph.features, np.float32))[None]
        adj = torch.from_numpy(graph.adjacency())[None]
        return self(h, adj)[0].numpy()


def average_edges(graphs: Sequence[SceneGraph]) -> float:
    return float(np.mean([len(g.edges) for g in graphs])) if graphs else 0.0
