"""Finite-difference checks of every trainable operation, on small randomized shapes."""

from __future__ import annotations

import torch
from torch.func import functional_call

from .codec import Decoder, Encoder
from .fusion import MSABlock
from .gcn import Featurizer, gcn_forward, graph_tensors
from .graph import graph_from_coords
from .model import ContextSegNet
from .numerics import GradReport, grad_check, precision
from .training import ce_loss

f64 = torch.float64


def _generic(module: torch.nn.Module, gen: torch.Generator) -> None:
    """Random init plus small positive biases.

    Zero biases put ReLU inputs exactly on the kink wherever a receptive field
    is all zeros, where finite differences are meaningless.
    """
    module.reset_parameters(gen)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.rand(p.shape, generator=gen, dtype=f64) * 0.2 + 0.05)


def _sub(p: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in p.items() if k.startswith(prefix + ".")}


def _prefixed(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{n}": t for n, t in module.named_parameters()}


def _small_graph():
    return graph_from_coords([(0, 0), (0, 1), (1, 1), (1, 2), (2, 1)])


def check_featurizer(gen):
    f = Featurizer(hidden=4, width=2)
    _generic(f, gen)
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=f64) * 2 - 1
    w = torch.randn(4, generator=gen, dtype=f64)
    return grad_check(lambda p: (functional_call(f, p, (x,)) * w).mean(), dict(f.named_parameters()))


def check_gcn(gen, aggregation):
    A, mask = graph_tensors(_small_graph(), f64)
    params = {"X0": torch.randn(5, 3, generator=gen, dtype=f64),
              "W0": torch.randn(3, 3, generator=gen, dtype=f64) * 0.6,
              "W1": torch.randn(3, 3, generator=gen, dtype=f64) * 0.6,
              "log_temperature": torch.tensor(0.3, dtype=f64)}
    w = torch.randn(5, 3, generator=gen, dtype=f64)

    def loss(p):
        tau = torch.exp(p["log_temperature"]) if "log_temperature" in p else 1.0
        out = gcn_forward(p["X0"], A, mask, [p["W0"], p["W1"]], aggregation, tau)
        return (out * w).mean() + (out ** 2).mean()

    if aggregation == "sym":
        params.pop("log_temperature")
    return grad_check(loss, params)


def check_msa(gen):
    block = MSABlock(8, 2, mlp=True)
    _generic(block, gen)
    with torch.no_grad():
        block.ln_gamma.add_(torch.rand(8, generator=gen, dtype=f64) * 0.5)
    params = dict(block.named_parameters())
    params["z"] = torch.randn(1, 5, 8, generator=gen, dtype=f64)
    w = torch.randn(1, 5, 8, generator=gen, dtype=f64)

    def loss(p):
        z = p["z"]
        out = functional_call(block, {k: v for k, v in p.items() if k != "z"}, (z,))
        return (out * w).mean() + (out ** 2).mean()

    return grad_check(loss, params)


def check_codec(gen):
    enc, dec = Encoder(4), Decoder(4, 3)
    _generic(enc, gen)
    _generic(dec, gen)
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=f64) * 2 - 1
    target = torch.randint(0, 3, (2, 8, 8), generator=gen)
    params = {**_prefixed("enc", enc), **_prefixed("dec", dec)}

    def loss(p):
        z, skips = functional_call(enc, _sub(p, "enc"), (x,))
        return ce_loss(functional_call(dec, _sub(p, "dec"), (z, skips)), target)

    return grad_check(loss, params)


def check_ce(gen):
    logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=f64)
    target = torch.randint(0, 4, (2, 3, 3), generator=gen)
    return grad_check(lambda p: ce_loss(p["logits"], target), {"logits": logits})


def check_pipeline(gen, aggregation="sym", fusion="dcfusion"):
    net = ContextSegNet(patch=8, hidden=4, n_classes=3, gcn_layers=2, aggregation=aggregation,
                        fusion=fusion, fusion_layers=1, heads=2, featurizer_width=2)
    _generic(net.featurizer, gen)
    _generic(net.gcn, gen)
    _generic(net.encoder, gen)
    _generic(net.fusion, gen)
    _generic(net.decoder, gen)
    graph = _small_graph()
    A, mask = graph_tensors(graph, f64)
    tiles = torch.rand(graph.n_nodes, 3, 8, 8, generator=gen, dtype=f64) * 2 - 1
    targets = torch.tensor([1, 3])
    labels = torch.randint(0, 3, (2, 8, 8), generator=gen)
    params = {n: p for n, p in net.named_parameters() if not n.startswith("context_head.")}
    return grad_check(lambda p: ce_loss(functional_call(net, p, (tiles, A, mask, targets)), labels),
                      params)


def check_context_aux(gen):
    net = ContextSegNet(patch=8, hidden=4, n_classes=3, gcn_layers=2, featurizer_width=2)
    for part in (net.featurizer, net.gcn):
        _generic(part, gen)
    net.context_head.reset_parameters()
    graph = _small_graph()
    A, mask = graph_tensors(graph, f64)
    tiles = torch.rand(graph.n_nodes, 3, 8, 8, generator=gen, dtype=f64) * 2 - 1
    node_labels = torch.randint(0, 3, (graph.n_nodes,), generator=gen)
    params = {n: p for n, p in net.named_parameters()
              if n.split(".")[0] in ("featurizer", "gcn", "context_head")}

    def loss(p):
        ctx = gcn_forward(functional_call(net.featurizer, _sub(p, "featurizer"), (tiles,)), A, mask,
                          [p["gcn.weights.0"], p["gcn.weights.1"]], "sym", 1.0)
        logits = functional_call(net.context_head, _sub(p, "context_head"), (ctx,))
        return ce_loss(logits[:, :, None, None], node_labels[:, None, None])

    params.pop("gcn.log_temperature", None)
    return grad_check(loss, params)


def run_all(seed: int = 0) -> dict[str, GradReport]:
    """Named reports for every trainable operation, computed in float64."""
    with precision("float64"):
        gen = torch.Generator().manual_seed(int(seed))
        return {
            "featurizer": check_featurizer(gen),
            "gcn_sym": check_gcn(gen, "sym"),
            "gcn_softmax": check_gcn(gen, "softmax"),
            "msa_block": check_msa(gen),
            "codec": check_codec(gen),
            "ce_loss": check_ce(gen),
            "pipeline_sym": check_pipeline(gen, "sym"),
            "pipeline_softmax": check_pipeline(gen, "softmax"),
            "context_aux_loss": check_context_aux(gen),
        }


def summarize(reports: dict[str, GradReport], tol: float = 1e-5) -> dict:
    return {name: {"max_rel_error": r.worst, "passed": r.passed(tol),
                   "per_parameter": dict(sorted(r.max_rel_error.items()))}
            for name, r in reports.items()}
