"""Context/detail fusion: attention fusion over [context; detail] tokens, plus ablation variants.

Sequence layout is fixed: row 0 carries the context token, rows 1..b^2 the
detail tokens in row-major grid order.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ShapeError, fan_uniform_, get_dtype, layer_norm, softmax_temp

STRATEGIES = ("dcfusion", "cat", "dot", "none")
EMBED_INIT = 0.02


class ConfigError(ValueError):
    pass


def assemble_sequence(z_c: torch.Tensor, z_d: torch.Tensor, e_ctx: torch.Tensor,
                      e_pos: torch.Tensor) -> torch.Tensor:
    """[z_c + e_ctx; z_d + e_pos] -> (B, b^2 + 1, L)."""
    if z_c.ndim == 2:
        z_c = z_c[:, None, :]
    if z_d.ndim != 3 or z_c.shape[-1] != z_d.shape[-1] or z_c.shape[:2] != (z_d.shape[0], 1):
        raise ShapeError(f"cannot assemble context {tuple(z_c.shape)} with detail {tuple(z_d.shape)}")
    if e_ctx.shape != (z_d.shape[-1],) or e_pos.shape != z_d.shape[1:]:
        raise ShapeError(f"embedding shapes {tuple(e_ctx.shape)}, {tuple(e_pos.shape)} "
                         f"do not match detail tokens {tuple(z_d.shape)}")
    return torch.cat([z_c + e_ctx, z_d + e_pos], dim=1)


def select_detail_tokens(z: torch.Tensor, n_detail: int | None = None) -> torch.Tensor:
    if n_detail is not None and z.shape[-2] != n_detail + 1:
        raise ShapeError(f"expected {n_detail + 1} rows, got {z.shape[-2]}")
    if z.shape[-2] < 2:
        raise ShapeError(f"sequence of {z.shape[-2]} rows has no detail tokens")
    return z[..., 1:, :]


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    fan_uniform_(lin.weight, lin.in_features, gen)
    nn.init.zeros_(lin.bias)


class MSABlock(nn.Module):
    """Pre-norm multi-head self-attention with residual; optional pre-norm MLP."""

    def __init__(self, hidden: int, heads: int, mlp: bool = False):
        super().__init__()
        if heads < 1 or hidden % heads:
            raise ConfigError(f"hidden size {hidden} is not divisible by {heads} heads")
        dtype = get_dtype()
        self.heads = heads
        self.ln_gamma = nn.Parameter(torch.ones(hidden, dtype=dtype))
        self.ln_beta = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.qkv = nn.Linear(hidden, 3 * hidden, dtype=dtype)
        self.out = nn.Linear(hidden, hidden, dtype=dtype)
        self.mlp = mlp
        if mlp:
            self.ln2_gamma = nn.Parameter(torch.ones(hidden, dtype=dtype))
            self.ln2_beta = nn.Parameter(torch.zeros(hidden, dtype=dtype))
            self.fc1 = nn.Linear(hidden, 2 * hidden, dtype=dtype)
            self.fc2 = nn.Linear(2 * hidden, hidden, dtype=dtype)

    def reset_parameters(self, gen: torch.Generator) -> None:
        nn.init.ones_(self.ln_gamma)
        nn.init.zeros_(self.ln_beta)
        _init_linear(self.qkv, gen)
        _init_linear(self.out, gen)
        if self.mlp:
            nn.init.ones_(self.ln2_gamma)
            nn.init.zeros_(self.ln2_beta)
            _init_linear(self.fc1, gen)
            _init_linear(self.fc2, gen)

    def attention(self, z: torch.Tensor) -> torch.Tensor:
        B, S, L = z.shape
        dh = L // self.heads
        q, k, v = self.qkv(z).split(L, dim=-1)
        q, k, v = (t.reshape(B, S, self.heads, dh).transpose(1, 2) for t in (q, k, v))
        weights = softmax_temp(q @ k.transpose(-1, -2) / math.sqrt(dh), 1.0, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(B, S, L)
        return self.out(mixed)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 3 or z.shape[1] < 1:
            raise ShapeError(f"expected (B, S, L) with S >= 1, got {tuple(z.shape)}")
        z = self.attention(layer_norm(z, self.ln_gamma, self.ln_beta)) + z
        if self.mlp:
            h = layer_norm(z, self.ln2_gamma, self.ln2_beta)
            z = self.fc2(F.gelu(self.fc1(h))) + z
        return z


def msa_block(z: torch.Tensor, block: MSABlock) -> torch.Tensor:
    return block(z)


def dcfusion_forward(z0: torch.Tensor, blocks) -> torch.Tensor:
    if len(blocks) < 1:
        raise ConfigError("attention fusion needs at least one layer")
    z = z0
    for block in blocks:
        z = block(z)
    return z


def fuse_variant(strategy: str, z_c: torch.Tensor, z_d: torch.Tensor,
                 cat_proj: nn.Linear | None = None) -> torch.Tensor:
    """Non-attention fusion baselines; all return (B, b^2, L)."""
    if z_c.ndim == 2:
        z_c = z_c[:, None, :]
    if strategy == "none":
        return z_d
    if strategy == "dot":
        return z_d * z_c
    if strategy == "cat":
        if cat_proj is None:
            raise ConfigError("cat fusion needs a projection layer")
        return cat_proj(torch.cat([z_d, z_c.expand_as(z_d)], dim=-1))
    raise ConfigError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")


class Fusion(nn.Module):
    """Fusion head selected by ``strategy``; returns detail tokens (B, b^2, L)."""

    def __init__(self, hidden: int, n_tokens: int, strategy: str = "dcfusion", layers: int = 2,
                 heads: int = 4, mlp: bool = False):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")
        dtype = get_dtype()
        self.strategy = strategy
        self.n_tokens = n_tokens
        if strategy == "dcfusion":
            if layers < 1:
                raise ConfigError("attention fusion needs at least one layer")
            self.e_ctx = nn.Parameter(torch.zeros(hidden, dtype=dtype))
            self.e_pos = nn.Parameter(torch.zeros(n_tokens, hidden, dtype=dtype))
            self.blocks = nn.ModuleList([MSABlock(hidden, heads, mlp) for _ in range(layers)])
        elif strategy == "cat":
            self.cat_proj = nn.Linear(2 * hidden, hidden, dtype=dtype)

    @property
    def uses_context(self) -> bool:
        return self.strategy != "none"

    def reset_parameters(self, gen: torch.Generator) -> None:
        if self.strategy == "dcfusion":
            for e in (self.e_ctx, self.e_pos):
                with torch.no_grad():
                    u = torch.rand(e.shape, generator=gen, dtype=torch.float64)
                    e.copy_((2.0 * u - 1.0) * EMBED_INIT)
            for block in self.blocks:
                block.reset_parameters(gen)
        elif self.strategy == "cat":
            _init_linear(self.cat_proj, gen)

    def forward(self, z_c: torch.Tensor, z_d: torch.Tensor) -> torch.Tensor:
        if self.strategy == "dcfusion":
            z0 = assemble_sequence(z_c, z_d, self.e_ctx, self.e_pos)
            return select_detail_tokens(dcfusion_forward(z0, self.blocks), z_d.shape[1])
        return fuse_variant(self.strategy, z_c, z_d, getattr(self, "cat_proj", None))
