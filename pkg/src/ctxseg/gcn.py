"""Node featurization and multi-step context aggregation over the tile graph."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph import ContextGraph
from .numerics import ShapeError, fan_uniform_, get_dtype, softmax_temp

AGGREGATIONS = ("sym", "softmax")
HE_GAIN = math.sqrt(6.0)


def pixels_to_tensor(tiles: np.ndarray | torch.Tensor, dtype: torch.dtype | None = None) -> torch.Tensor:
    """(B, P, P, 3) uint8 pixels -> (B, 3, P, P) floats in [-1, 1]."""
    dtype = dtype or get_dtype()
    t = torch.as_tensor(np.ascontiguousarray(tiles)) if isinstance(tiles, np.ndarray) else tiles
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeError(f"expected (B, P, P, 3) pixels, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).to(dtype) / 127.5 - 1.0


class Featurizer(nn.Module):
    """Two strided convolutions, global mean and max pooling, linear map to R^L.

    Stands in for a frozen foundation-model encoder; small enough to train.
    """

    def __init__(self, hidden: int, width: int = 8):
        super().__init__()
        dtype = get_dtype()
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, dtype=dtype)
        self.proj = nn.Linear(4 * width, hidden, dtype=dtype)
        self.hidden = hidden

    def reset_parameters(self, gen: torch.Generator) -> None:
        for conv in (self.conv1, self.conv2):
            fan_uniform_(conv.weight, conv.in_channels * 9, gen, HE_GAIN)
            nn.init.zeros_(conv.bias)
        fan_uniform_(self.proj.weight, self.proj.in_features, gen, HE_GAIN)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        return self.proj(torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1))


def featurize_nodes(featurizer: Featurizer, tiles) -> torch.Tensor:
    """Initial node features X^(0), one row per tile."""
    x = pixels_to_tensor(tiles) if isinstance(tiles, np.ndarray) else tiles
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, P, P) tiles, got {tuple(x.shape)}")
    return featurizer(x)


def _check_shapes(X: torch.Tensor, A: torch.Tensor, W: torch.Tensor) -> None:
    if X.ndim != 2 or A.shape != (X.shape[0], X.shape[0]) or W.shape != (X.shape[1], X.shape[1]):
        raise ShapeError(f"shape mismatch: X {tuple(X.shape)}, A {tuple(A.shape)}, W {tuple(W.shape)}")


def gcn_layer(X: torch.Tensor, A_norm: torch.Tensor, W: torch.Tensor, activation=F.relu) -> torch.Tensor:
    """sigma(A_norm @ X @ W)."""
    _check_shapes(X, A_norm, W)
    out = A_norm @ (X @ W)
    return activation(out) if activation is not None else out


def attention_weights(X: torch.Tensor, closed_mask: torch.Tensor, temperature) -> torch.Tensor:
    """Row-softmax of x_i.x_j / sqrt(L) over each node's closed neighbourhood."""
    scores = (X @ X.T) / math.sqrt(X.shape[1])
    return softmax_temp(scores, temperature, dim=1, mask=closed_mask)


def softmax_aggregate(X: torch.Tensor, closed_mask: torch.Tensor, W: torch.Tensor, temperature,
                      activation=F.relu) -> torch.Tensor:
    _check_shapes(X, closed_mask, W)
    alpha = attention_weights(X, closed_mask, temperature)
    out = alpha @ (X @ W)
    return activation(out) if activation is not None else out


def graph_tensors(graph: ContextGraph, dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(normalized adjacency, closed-neighbourhood mask) as tensors."""
    dtype = dtype or get_dtype()
    A_norm = torch.as_tensor(graph.norm_adjacency, dtype=dtype)
    mask = torch.as_tensor(graph.adjacency > 0) | torch.eye(graph.n_nodes, dtype=torch.bool)
    return A_norm, mask


class GCN(nn.Module):
    """T stacked aggregation steps; ReLU between steps, identity after the last."""

    def __init__(self, hidden: int, layers: int, aggregation: str = "sym"):
        super().__init__()
        if layers < 0:
            raise ValueError(f"GCN layer count must be >= 0, got {layers}")
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")
        dtype = get_dtype()
        self.aggregation = aggregation
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.empty(hidden, hidden, dtype=dtype)) for _ in range(layers)])
        # temperature = exp(log_temperature), starts at 1
        self.log_temperature = nn.Parameter(torch.zeros((), dtype=dtype))

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_temperature)

    def reset_parameters(self, gen: torch.Generator) -> None:
        for W in self.weights:
            fan_uniform_(W, W.shape[0], gen, HE_GAIN)
        nn.init.zeros_(self.log_temperature)

    def forward(self, X: torch.Tensor, A_norm: torch.Tensor, closed_mask: torch.Tensor) -> torch.Tensor:
        return gcn_forward(X, A_norm, closed_mask, list(self.weights), self.aggregation,
                           self.temperature)


def gcn_forward(X0: torch.Tensor, A_norm: torch.Tensor, closed_mask: torch.Tensor | None,
                weights, aggregation: str = "sym", temperature=1.0) -> torch.Tensor:
    X = X0
    T = len(weights)
    for t, W in enumerate(weights):
        act = F.relu if t < T - 1 else None
        if aggregation == "sym":
            X = gcn_layer(X, A_norm, W, act)
        else:
            X = softmax_aggregate(X, closed_mask, W, temperature, act)
    return X
