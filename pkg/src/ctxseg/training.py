"""Pixel-wise cross-entropy, Adam, the training loop, and checkpoint IO."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .fusion import STRATEGIES
from .gcn import AGGREGATIONS
from .model import ContextSegNet, PreparedSlide, prepare_slide
from .numerics import ShapeError, precision
from .synthwsi import Dataset

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"GCUN"
CHECKPOINT_VERSION = 1

FULL_SCALE_LEARNING_RATE = 5e-5
FULL_SCALE_HIDDEN = 128
FULL_SCALE_FUSION_LAYERS = 12
FULL_SCALE_HEADS = 12
FULL_SCALE_FUSION_WIDTH = 768


class LabelError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    n_classes: int = 4
    gcn_layers: int = 3
    aggregation: str = "sym"
    fusion: str = "dcfusion"
    fusion_layers: int = 2
    heads: int = 4
    hidden: int = 32
    mlp: bool = False
    batch_size: int = 16
    lr: float = 1e-3
    steps: int = 3000
    precision: str = "float32"
    granularity: int = 1
    tau_fg: float = 0.5
    stem: str = "conv3"
    featurizer_width: int = 8
    freeze_featurizer: bool = False
    context_aux: float = 1.0
    log_every: int = 1

    def validate(self) -> None:
        for name in ("n_classes", "heads", "hidden", "batch_size", "steps", "granularity",
                     "featurizer_width", "fusion_layers", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gcn_layers < 0:
            raise ConfigError(f"gcn_layers must be >= 0, got {self.gcn_layers}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.fusion not in STRATEGIES:
            raise ConfigError(f"fusion must be one of {STRATEGIES}, got {self.fusion!r}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not self.context_aux >= 0:
            raise ConfigError(f"context_aux must be >= 0, got {self.context_aux}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 < self.tau_fg <= 1:
            raise ConfigError(f"tau_fg must lie in (0, 1], got {self.tau_fg}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --- loss and optimiser ---------------------------------------------------

def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[target].

    ``logits`` is (k, H, W) or (B, k, H, W); ``target`` matches without the k axis.
    """
    if logits.ndim == 3:
        logits, target = logits[None], target[None]
    k = logits.shape[1]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    target = target.long()
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise LabelError(f"target classes must lie in [0, {k}), found "
                         f"[{int(target.min())}, {int(target.max())}]")
    shift = logits.max(dim=1, keepdim=True).values.detach()
    lse = torch.log(torch.exp(logits - shift).sum(dim=1)) + shift[:, 0]
    picked = torch.gather(logits, 1, target[:, None]).squeeze(1)
    return (lse - picked).mean()


@dataclass
class AdamState:
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)
    t: int = 0


@torch.no_grad()
def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor | None], state: AdamState,
              lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


# --- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int
    final_loss: float
    patch: int
    version: int = CHECKPOINT_VERSION

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build_model(self) -> ContextSegNet:
        model = ContextSegNet.from_config(self.train_config(), self.patch)
        state = {name: torch.as_tensor(arr.copy()) for name, arr in self.tensors.items()}
        missing = set(model.state_dict()) ^ set(state)
        if missing:
            raise CheckpointFormatError(f"checkpoint tensors do not match the model: {sorted(missing)}")
        model.load_state_dict(state)
        return model


def checkpoint_from_model(model: ContextSegNet, cfg: TrainConfig, step: int,
                          final_loss: float) -> Checkpoint:
    tensors = {name: t.detach().to(torch.float32).numpy().copy()
               for name, t in sorted(model.state_dict().items())}
    return Checkpoint(cfg.to_dict(), tensors, step, float(final_loss), model.patch)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """GCUN | u32 version | u32 header length | JSON header | float32 LE payloads."""
    directory, offset, payload = [], 0, io.BytesIO()
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": arr.nbytes})
        payload.write(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": ckpt.config, "step": ckpt.step, "final_loss": ckpt.final_loss,
                         "patch": ckpt.patch, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} "
                                    f"(this build reads {CHECKPOINT_VERSION})")
    if 12 + hlen > len(blob):
        raise CheckpointFormatError(f"{path}: truncated header ({len(blob) - 12} of {hlen} bytes)")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header ({exc})") from exc
    missing = {"config", "step", "final_loss", "patch", "tensors"} - set(header)
    if missing:
        raise CheckpointFormatError(f"{path}: header lacks {sorted(missing)}")
    body = blob[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise CheckpointFormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(body[start:start + nbytes], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(header["config"], tensors, header["step"], header["final_loss"],
                      header["patch"], version)


# --- training loop ----------------------------------------------------------

def context_loss(model: ContextSegNet, context: torch.Tensor, node_labels: torch.Tensor) -> torch.Tensor:
    """Auxiliary CE of every node's majority class, read off its context features.

    Pixel loss alone lets the model settle on a per-tile shortcut and leaves
    the context path untrained; this term gives the graph a direct signal.
    """
    logits = model.context_logits(context)
    return ce_loss(logits[:, :, None, None], node_labels[:, None, None])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ContextSegNet
    log: list[dict]


def prepare_split(dataset: Dataset, split: str, cfg: TrainConfig) -> list[PreparedSlide]:
    patch = dataset.params.patch
    out = []
    for sid in dataset.split(split):
        prepared = prepare_slide(dataset.slides[sid], sid, patch, cfg.tau_fg, cfg.granularity)
        if prepared is not None:
            out.append(prepared)
    return out


def train(cfg: TrainConfig, dataset: Dataset, slides: list[PreparedSlide] | None = None) -> TrainResult:
    """Deterministic end-to-end training; one slide (and one graph pass) per step."""
    cfg.validate()
    with precision(cfg.precision):
        if slides is None:
            slides = prepare_split(dataset, "train", cfg)
        if not slides:
            raise ConfigError("train split has no slides with foreground tiles")
        patch = slides[0].grid.patch
        model = ContextSegNet.from_config(cfg, patch)
        model.reset_parameters(cfg.seed)
        model.train()
        params = [p for _, p in sorted(model.named_parameters()) if p.requires_grad]
        state = AdamState()
        rng = np.random.default_rng(cfg.seed)
        rows, loss_value = [], float("nan")
        start = time.perf_counter()
        for step in range(1, cfg.steps + 1):
            s = slides[int(rng.integers(len(slides)))]
            nb = min(cfg.batch_size, s.n_nodes)
            targets = torch.as_tensor(np.sort(rng.choice(s.n_nodes, size=nb, replace=False)))
            context = model.context(s.tiles, s.A_norm, s.mask) if model.fusion.uses_context else None
            logits = model(s.tiles, s.A_norm, s.mask, targets, context)
            loss = ce_loss(logits, s.labels[targets])
            total = loss
            if context is not None and cfg.context_aux > 0:
                total = loss + cfg.context_aux * context_loss(model, context, s.node_labels)
            grads = torch.autograd.grad(total, params, allow_unused=True)
            adam_step(params, list(grads), state, cfg.lr)
            loss_value = float(loss.detach())
            if step % cfg.log_every == 0 or step == cfg.steps:
                rows.append({"step": step, "loss": loss_value, "lr": cfg.lr,
                             "elapsed_seconds": time.perf_counter() - start})
            if step % 200 == 0:
                log.info("step %d loss %.4f", step, loss_value)
        model.eval()
        ckpt = checkpoint_from_model(model, cfg, cfg.steps, loss_value)
    return TrainResult(ckpt, model, rows)


def write_log(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "elapsed_seconds"])
        w.writeheader()
        for r in rows:
            w.writerow({"step": r["step"], "loss": f"{r['loss']:.8g}", "lr": r["lr"],
                        "elapsed_seconds": f"{r['elapsed_seconds']:.3f}"})
    return path
