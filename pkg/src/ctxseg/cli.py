"""Batch entry points. Exit codes: 0 success, 1 runtime failure, 2 usage or config error."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path


from . import experiments, plotting
from .evalmetrics import color_overlay, save_mask_png, save_rgb_png
from .fusion import STRATEGIES
from .fusion import ConfigError as FusionConfigError
from .graph import build_context_graph, graph_stats
from .numerics import ParameterDomainError, precision
from .synthwsi import GeneratorParams, load_dataset, save_dataset, synthesize, tile_slide
from .training import ConfigError, TrainConfig, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger("ctxseg")

# keys that only shape the synthetic dataset
SYNTH_DEFAULTS = {"slides": 30, "grid": GeneratorParams.grid, "patch": GeneratorParams.patch,
                  "gc_prob": GeneratorParams.gc_prob, "noise": GeneratorParams.noise}


class UsageError(Exception):
    pass


def _train_fields() -> dict[str, type]:
    types = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: types[f.type if isinstance(f.type, str) else f.type.__name__]
            for f in dataclasses.fields(TrainConfig)}


def config_keys() -> dict[str, tuple[type, object]]:
    """Every accepted config key with its type and default."""
    keys = {name: (t, getattr(TrainConfig, name)) for name, t in _train_fields().items()}
    keys.update({name: (type(v), v) for name, v in SYNTH_DEFAULTS.items()})
    return keys


def _convert(key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {raw!r} as {typ.__name__}") from None


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment; dashes and underscores are interchangeable."""
    keys = config_keys()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in keys:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _convert(key, value, keys[key][0])
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    keys = config_keys()
    cfg = {k: d for k, (_, d) in keys.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in keys:
        value = getattr(args, key, None) if key != "seed" else None
        if value is not None:
            cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(**{k: cfg[k] for k in _train_fields()})
    tc.validate()
    return tc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxseg", description=__doc__,
        epilog="Config keys (file or flag; flags win): " + ", ".join(
            f"{k}={d}" for k, (_, d) in config_keys().items()))
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="flat key = value file")
    g.add_argument("--seed", type=int, help="run seed (default 0)")
    g.add_argument("--out", default="out", help="output directory (default out)")
    g.add_argument("--dataset", help="dataset directory")
    g.add_argument("--checkpoint", help="checkpoint file")
    g.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config overrides")
    for key, (typ, default) in config_keys().items():
        if key == "seed":
            continue
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            keys.add_argument(flag, dest=key, type=lambda s, k=key: _convert(k, s, bool),
                              help=f"(default {default})")
        else:
            keys.add_argument(flag, dest=key, type=typ, help=f"(default {default})")

    helps = {
        "synth": "generate a synthetic dataset into --out",
        "train": "train on --dataset; writes checkpoint, log CSV and loss plot to --out",
        "eval": "evaluate --checkpoint on --dataset; writes metrics CSV and JSON",
        "ablate-layers": "sweep GCN depth",
        "ablate-fusion": "sweep fusion strategies",
        "ablate-granularity": "sweep patch downsampling factors",
        "gradcheck": "finite-difference check of every trainable operation",
        "graph-stats": "per-slide graph statistics as JSON",
        "export-masks": "predicted mask and overlays per test slide",
    }
    cmds = {name: sub.add_parser(name, parents=[common], help=h, description=h)
            for name, h in helps.items()}
    for name in ("eval", "export-masks", "ablate-layers", "ablate-fusion", "ablate-granularity"):
        cmds[name].add_argument("--split", default="test", help="split to evaluate (default test)")
    cmds["ablate-layers"].add_argument("--layers", type=_int_list, default=[0, 1, 2, 3],
                                       help="comma-separated GCN depths (default 0,1,2,3)")
    cmds["ablate-fusion"].add_argument("--strategies", type=_str_list, default=list(STRATEGIES),
                                       help=f"comma-separated strategies (default {','.join(STRATEGIES)})")
    cmds["ablate-granularity"].add_argument("--factors", type=_int_list, default=[1, 2, 4],
                                            help="comma-separated downsampling factors (default 1,2,4)")
    cmds["gradcheck"].add_argument("--tol", type=float, default=1e-5,
                                   help="max relative error (default 1e-5)")
    return parser


def _need(args, name: str) -> str:
    value = getattr(args, name)
    if not value:
        raise UsageError(f"{args.command} needs --{name}")
    return value


def _setup_logging(out: Path, verbose: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    root.addHandler(fh)
    root.addHandler(sh)
    root.setLevel(logging.INFO)


def _load(args):
    return load_dataset(_need(args, "dataset"))


def cmd_synth(args, cfg, out: Path) -> int:
    params = GeneratorParams(grid=cfg["grid"], patch=cfg["patch"], gc_prob=cfg["gc_prob"],
                             noise=cfg["noise"])
    params.validate()
    ds = synthesize(cfg["slides"], cfg["seed"], params)
    save_dataset(ds, out)
    print(f"wrote {len(ds.slides)} slides to {out}")
    return 0


def cmd_train(args, cfg, out: Path) -> int:
    ds = _load(args)
    tc = train_config(cfg)
    result = train(tc, ds)
    save_checkpoint(result.checkpoint, out / "checkpoint.gcun")
    write_log(result.log, out / "train_log.csv")
    plotting.plot_loss(result.log, out / "train_loss.png")
    print(f"final loss {result.checkpoint.final_loss:.6f}; checkpoint {out / 'checkpoint.gcun'}")
    return 0


def _checked_model(args, ds):
    ckpt = load_checkpoint(_need(args, "checkpoint"))
    tc = ckpt.train_config()
    mismatched = []
    if ckpt.patch != ds.params.patch:
        mismatched.append(f"patch: checkpoint {ckpt.patch}, dataset {ds.params.patch}")
    if tc.n_classes != len(ds.manifest.class_names):
        mismatched.append(f"n_classes: checkpoint {tc.n_classes}, "
                          f"dataset {len(ds.manifest.class_names)}")
    if mismatched:
        raise UsageError("checkpoint and dataset are incompatible: " + "; ".join(mismatched))
    return ckpt.build_model(), tc


def cmd_eval(args, cfg, out: Path) -> int:
    ds = _load(args)
    model, tc = _checked_model(args, ds)
    report = experiments.evaluate(model, ds, tc, args.split)
    report.write(out / "metrics.csv", out / "metrics.json")
    m = report.macro
    print(f"mF1 {m.mF1:.4f}  mIoU {m.mIoU:.4f}  mP {m.mP:.4f}  mR {m.mR:.4f}")
    return 0


def _sweep(args, cfg, out: Path, key: str, values, name: str) -> int:
    ds = _load(args)
    base = train_config(cfg)
    for v in values:
        dataclasses.replace(base, **{key: v}).validate()
    rows = experiments.sweep(base, ds, key, values, args.split)
    csv_path = experiments.write_rows(rows, out / f"{name}.csv")
    plotting.plot_sweep(rows, key, out / f"{name}.png", title=name)
    for r in rows:
        print(f"{key}={r[key]}  mF1 {r['mF1']:.4f}")
    print(f"wrote {csv_path}")
    return 0


def cmd_gradcheck(args, cfg, out: Path) -> int:
    from .verification import run_all, summarize

    summary = summarize(run_all(cfg["seed"]), args.tol)
    (out / "gradcheck.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for name, r in summary.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'} {name}: max rel error {r['max_rel_error']:.3e}")
    return 0 if all(r["passed"] for r in summary.values()) else 1


def cmd_graph_stats(args, cfg, out: Path) -> int:
    ds = _load(args)
    stats = {}
    for sid in ds.manifest.slide_ids:
        grid = tile_slide(ds.slides[sid], ds.params.patch, cfg["tau_fg"], slide_id=sid)
        stats[sid] = graph_stats(build_context_graph(grid)) if grid.n_foreground else \
            {"nodes": 0, "edges": 0, "degree_histogram": {}, "components": 0}
    text = json.dumps(stats, indent=2, sort_keys=True) + "\n"
    (out / "graph_stats.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_export_masks(args, cfg, out: Path) -> int:
    ds = _load(args)
    model, tc = _checked_model(args, ds)
    k = tc.n_classes
    masks = experiments.predict_masks(model, ds, args.split, tc)
    for sid, pred in masks.items():
        mask = pred.mask
        if mask.size and int(mask.max()) >= k:
            raise RuntimeError(f"slide {sid}: mask value {int(mask.max())} out of range")
        image = ds.slides[sid].image
        save_mask_png(mask, out / f"slide_{sid}_pred.png")
        save_rgb_png(color_overlay(image, mask), out / f"slide_{sid}_pred_overlay.png")
        save_rgb_png(color_overlay(image, ds.slides[sid].labels), out / f"slide_{sid}_gt_overlay.png")
    print(f"wrote {3 * len(masks)} files to {out}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-layers": lambda a, c, o: _sweep(a, c, o, "gcn_layers", a.layers, "ablate_layers"),
    "ablate-fusion": lambda a, c, o: _sweep(a, c, o, "fusion", a.strategies, "ablate_fusion"),
    "ablate-granularity": lambda a, c, o: _sweep(a, c, o, "granularity", a.factors,
                                                 "ablate_granularity"),
    "gradcheck": cmd_gradcheck,
    "graph-stats": cmd_graph_stats,
    "export-masks": cmd_export_masks,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command not in ("synth", "graph-stats", "export-masks", "eval"):
            train_config(cfg)
    except (UsageError, ValueError) as exc:
        print(f"ctxseg {args.command}: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    resolved = json.dumps({"command": args.command, "config": cfg}, sort_keys=True)
    print(f"resolved config: {resolved}")
    log.info("resolved config: %s", resolved)
    try:
        with precision(cfg["precision"]):
            return HANDLERS[args.command](args, cfg, out)
    except (UsageError, ConfigError, FusionConfigError, ParameterDomainError) as exc:
        print(f"ctxseg {args.command}: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return 2
    except Exception as exc:
        log.exception("run failed")
        print(f"ctxseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
