"""Shared numeric kernels, precision mode, and the finite-difference gradient oracle.

Tensors are plain ``torch.Tensor`` values. Two precisions exist: float64 for
verification (gradient checks) and float32 for training. The active mode is a
process-wide setting read by every module that allocates parameters.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import torch

LAYER_NORM_EPS = 1e-5
# Denominator floor for relative gradient error. Central differences at h=1e-6
# carry roundoff of about 1e-16 * |loss| / h, so a structurally zero gradient
# reads as ~1e-10 for an O(1) loss; below the floor the check is absolute (1e-9).
GRAD_REL_EPS = 1e-4

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}
_precision = "float32"


class ParameterDomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


def set_precision(name: str) -> None:
    global _precision
    if name not in _PRECISIONS:
        raise ParameterDomainError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> torch.dtype:
    return _PRECISIONS[_precision]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision mode."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def softmax_temp(u: torch.Tensor, tau: float | torch.Tensor, dim: int = -1,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax of ``u / tau`` along ``dim``, stabilised by max-subtraction.

    Entries where ``mask`` is False get probability exactly 0 and no gradient.
    """
    if isinstance(tau, torch.Tensor):
        if not bool(torch.all(tau > 0)):
            raise ParameterDomainError("temperature must be positive")
    elif not tau > 0:
        raise ParameterDomainError(f"temperature must be positive, got {tau}")
    scaled = u / tau
    if mask is not None:
        # fill after scaling: -inf / tau would give NaN gradients w.r.t. tau
        scaled = scaled.masked_fill(~mask, float("-inf"))
    shift = scaled.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(scaled - shift)
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    if x.shape[-1] < 1 or gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm shapes disagree: x[..., {x.shape[-1]}], gamma {tuple(gamma.shape)}, "
            f"beta {tuple(beta.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return gamma * (x - mean) / torch.sqrt(var + eps) + beta


def fan_uniform_(t: torch.Tensor, fan_in: int, generator: torch.Generator,
                 gain: float = 1.0) -> torch.Tensor:
    """In-place U(-gain/sqrt(fan_in), gain/sqrt(fan_in)) fill from an explicit generator.

    ``gain = sqrt(6)`` gives He-uniform scaling for ReLU stacks.
    """
    bound = gain / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        sample = torch.rand(t.shape, generator=generator, dtype=torch.float64)
        t.copy_((sample * 2.0 - 1.0) * bound)
    return t


@dataclass
class GradReport:
    """Per-parameter comparison of analytic and central-difference gradients."""

    analytic: dict[str, torch.Tensor] = field(default_factory=dict)
    numeric: dict[str, torch.Tensor] = field(default_factory=dict)
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        # NaN errors count as failures
        return max((e if e == e else math.inf for e in self.max_rel_error.values()), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.worst < tol


def relative_error(a: torch.Tensor, n: torch.Tensor, eps: float = GRAD_REL_EPS) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, eps))
    return (a - n).abs() / denom


def grad_check(loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
               params: Mapping[str, torch.Tensor], h: float = 1e-6) -> GradReport:
    """Compare autograd gradients of ``loss_fn(params)`` with central differences.

    ``loss_fn`` receives a name -> tensor mapping and must be deterministic.
    Parameters are cloned to float64; the caller's tensors are not touched.
    """
    leaves = {name: p.detach().to(torch.float64).clone().requires_grad_(True)
              for name, p in params.items()}
    loss = loss_fn(leaves)
    if not torch.isfinite(loss).all():
        raise EvaluationError(f"loss is not finite: {loss}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)

    report = GradReport()
    with torch.no_grad():
        probe = {name: t.detach().clone() for name, t in leaves.items()}
        for (name, leaf), g in zip(leaves.items(), grads):
            analytic = torch.zeros_like(leaf) if g is None else g.detach().clone()
            numeric = torch.zeros_like(leaf)
            flat = probe[name].view(-1)
            out = numeric.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + h
                f_plus = loss_fn(probe)
                flat[idx] = orig - h
                f_minus = loss_fn(probe)
                flat[idx] = orig
                if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                    raise EvaluationError(f"loss not finite while perturbing {name}[{idx}]")
                out[idx] = (f_plus - f_minus) / (2.0 * h)
            report.analytic[name] = analytic
            report.numeric[name] = numeric
            err = relative_error(analytic, numeric)
            err = torch.where(torch.isfinite(err), err, torch.full_like(err, math.inf))
            report.max_rel_error[name] = float(err.max()) if err.numel() else 0.0
    return report
