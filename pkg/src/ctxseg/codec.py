"""Patch encoder (pixels -> b^2 detail tokens) and U-shaped mask decoder."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ShapeError, fan_uniform_, get_dtype

TOKEN_SIDE = 8  # pixels per token edge: three stride-2 stages
STEMS = ("conv3", "patch")


def _widths(hidden: int) -> tuple[int, int, int]:
    return max(1, hidden // 4), max(1, hidden // 2), hidden


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    k = conv.kernel_size[0] * conv.kernel_size[1]
    fan_uniform_(conv.weight, conv.in_channels * k, gen)
    nn.init.zeros_(conv.bias)


def tokens_from_map(fmap: torch.Tensor) -> torch.Tensor:
    """(B, L, b, b) -> (B, b*b, L), row-major over the token grid."""
    B, L, b, _ = fmap.shape
    return fmap.permute(0, 2, 3, 1).reshape(B, b * b, L)


def map_from_tokens(tokens: torch.Tensor) -> torch.Tensor:
    B, S, L = tokens.shape
    b = int(round(S ** 0.5))
    if b * b != S:
        raise ShapeError(f"token count {S} is not a perfect square")
    return tokens.reshape(B, b, b, L).permute(0, 3, 1, 2)


class Encoder(nn.Module):
    """Three stride-2 conv stages with widths L/4, L/2, L.

    ``stem="patch"`` uses 2x2 kernels without padding, so each token only
    sees its own 8x8 pixel block.
    """

    def __init__(self, hidden: int, stem: str = "conv3"):
        super().__init__()
        if stem not in STEMS:
            raise ValueError(f"unknown stem {stem!r}; expected one of {STEMS}")
        k, pad = (3, 1) if stem == "conv3" else (2, 0)
        c1, c2, c3 = _widths(hidden)
        dtype = get_dtype()
        self.stage1 = nn.Conv2d(3, c1, k, stride=2, padding=pad, dtype=dtype)
        self.stage2 = nn.Conv2d(c1, c2, k, stride=2, padding=pad, dtype=dtype)
        self.stage3 = nn.Conv2d(c2, c3, k, stride=2, padding=pad, dtype=dtype)
        self.stem = stem

    def reset_parameters(self, gen: torch.Generator) -> None:
        for conv in (self.stage1, self.stage2, self.stage3):
            _init_conv(conv, gen)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        if x.ndim != 4 or x.shape[2] % TOKEN_SIDE or x.shape[3] % TOKEN_SIDE:
            raise ShapeError(f"patch side must be divisible by {TOKEN_SIDE}, got {tuple(x.shape[2:])}")
        s1 = F.relu(self.stage1(x))
        s2 = F.relu(self.stage2(s1))
        return tokens_from_map(self.stage3(s2)), (s1, s2)


def encode_patch(encoder: Encoder, x: torch.Tensor):
    """Detail tokens (B, b^2, L) and the two skip activations."""
    return encoder(x)


class Decoder(nn.Module):
    def __init__(self, hidden: int, n_classes: int):
        super().__init__()
        c1, c2, c3 = _widths(hidden)
        dtype = get_dtype()
        self.up2 = nn.Conv2d(c3 + c2, c2, 3, padding=1, dtype=dtype)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1, dtype=dtype)
        self.head = nn.Conv2d(c1, n_classes, 3, padding=1, dtype=dtype)
        self.hidden = hidden

    def reset_parameters(self, gen: torch.Generator) -> None:
        for conv in (self.up2, self.up1, self.head):
            _init_conv(conv, gen)

    def forward(self, tokens: torch.Tensor, skips: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
        s1, s2 = skips
        b = s2.shape[2] // 2
        if tokens.ndim != 3 or tokens.shape[1] != b * b or tokens.shape[2] != self.hidden:
            raise ShapeError(f"expected (B, {b * b}, {self.hidden}) tokens, got {tuple(tokens.shape)}")
        h = map_from_tokens(tokens)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.up2(torch.cat([h, s2], dim=1)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.up1(torch.cat([h, s1], dim=1)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.head(h)


def decode_tokens(decoder: Decoder, tokens: torch.Tensor, skips) -> torch.Tensor:
    """Per-pixel class logits (B, k, P, P)."""
    return decoder(tokens, skips)
