"""End-to-end network: featurizer -> GCN context -> detail encoder -> fusion -> decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codec import TOKEN_SIDE, Decoder, Encoder
from .fusion import Fusion
from .gcn import GCN, Featurizer, graph_tensors, pixels_to_tensor
from .graph import ContextGraph, build_context_graph
from .numerics import fan_uniform_, get_dtype
from .synthwsi import SyntheticSlide, TileGrid, coarsen_patches, majority_label, tile_slide


class ContextSegNet(nn.Module):
    def __init__(self, *, patch: int, hidden: int = 32, n_classes: int = 4, gcn_layers: int = 3,
                 aggregation: str = "sym", fusion: str = "dcfusion", fusion_layers: int = 2,
                 heads: int = 4, mlp: bool = False, stem: str = "conv3", featurizer_width: int = 8,
                 freeze_featurizer: bool = False):
        super().__init__()
        b = patch // TOKEN_SIDE
        self.patch = patch
        self.n_classes = n_classes
        self.featurizer = Featurizer(hidden, featurizer_width)
        self.gcn = GCN(hidden, gcn_layers, aggregation)
        self.encoder = Encoder(hidden, stem)
        self.fusion = Fusion(hidden, b * b, fusion, fusion_layers, heads, mlp)
        self.decoder = Decoder(hidden, n_classes)
        # node-level classifier on context features; used only by the auxiliary training loss
        self.context_head = nn.Linear(hidden, n_classes, dtype=get_dtype())
        self.freeze_featurizer = freeze_featurizer
        if freeze_featurizer:
            self.featurizer.requires_grad_(False)

    @classmethod
    def from_config(cls, cfg, patch: int) -> ContextSegNet:
        return cls(patch=patch, hidden=cfg.hidden, n_classes=cfg.n_classes, gcn_layers=cfg.gcn_layers,
                   aggregation=cfg.aggregation, fusion=cfg.fusion, fusion_layers=cfg.fusion_layers,
                   heads=cfg.heads, mlp=cfg.mlp, stem=cfg.stem, featurizer_width=cfg.featurizer_width,
                   freeze_featurizer=cfg.freeze_featurizer)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for part in (self.featurizer, self.gcn, self.encoder, self.fusion, self.decoder):
            part.reset_parameters(gen)
        fan_uniform_(self.context_head.weight, self.context_head.in_features, gen)
        nn.init.zeros_(self.context_head.bias)

    def context(self, tiles: torch.Tensor, A_norm: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Context features X^(T) for every node of one slide."""
        if self.freeze_featurizer:
            with torch.no_grad():
                X0 = self.featurizer(tiles)
        else:
            X0 = self.featurizer(tiles)
        return self.gcn(X0, A_norm, mask)

    def context_logits(self, context: torch.Tensor) -> torch.Tensor:
        """(N, k) per-node class scores from context features."""
        return self.context_head(context)

    def forward(self, tiles: torch.Tensor, A_norm: torch.Tensor, mask: torch.Tensor,
                targets: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        """Logits (B, k, P, P) for the target nodes of one slide."""
        patches = tiles[targets]
        z_d, skips = self.encoder(patches)
        if self.fusion.uses_context:
            if context is None:
                context = self.context(tiles, A_norm, mask)
            z_c = context[targets]
        else:
            z_c = torch.zeros(z_d.shape[0], z_d.shape[2], dtype=z_d.dtype)
        return self.decoder(self.fusion(z_c, z_d), skips)


@dataclass
class PreparedSlide:
    slide_id: str
    grid: TileGrid
    graph: ContextGraph
    tiles: torch.Tensor  # (N, 3, P, P)
    labels: torch.Tensor  # (N, P, P) int64
    node_labels: torch.Tensor  # (N,) majority class per tile
    A_norm: torch.Tensor
    mask: torch.Tensor

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes


def prepare_slide(slide: SyntheticSlide, slide_id: str, patch: int, tau_fg: float = 0.5,
                  granularity: int = 1) -> PreparedSlide | None:
    """Tile, build the graph, and tensorise one slide; ``None`` when it has no foreground."""
    grid = tile_slide(slide, patch, tau_fg, slide_id=slide_id)
    if grid.n_foreground == 0:
        return None
    graph = build_context_graph(grid)
    pixels = coarsen_patches(grid.foreground_tiles(), granularity)
    A_norm, mask = graph_tensors(graph)
    tile_labels = grid.foreground_labels()
    labels = torch.as_tensor(tile_labels.astype(np.int64))
    node_labels = torch.as_tensor(np.array([majority_label(t) for t in tile_labels], dtype=np.int64))
    return PreparedSlide(slide_id, grid, graph, pixels_to_tensor(pixels, get_dtype()), labels,
                         node_labels, A_norm, mask)


@torch.no_grad()
def predict_slide(model: ContextSegNet, prepared: PreparedSlide, batch: int = 64) -> np.ndarray:
    """Per-node class masks (N, P, P); ties in argmax go to the lowest class index."""
    model.eval()
    context = model.context(prepared.tiles, prepared.A_norm, prepared.mask) \
        if model.fusion.uses_context else None
    out = []
    for start in range(0, prepared.n_nodes, batch):
        idx = torch.arange(start, min(start + batch, prepared.n_nodes))
        logits = model(prepared.tiles, prepared.A_norm, prepared.mask, idx, context)
        out.append(torch.argmax(logits, dim=1).to(torch.uint8).numpy())
    return np.concatenate(out, axis=0)
