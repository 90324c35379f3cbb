"""Command-line interface: ingest, synth, train, zero-shot, fine-tune, matrix.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
import time
from dataclasses import fields
from importlib import metadata
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import evaluate, mean_ci, parse_candidates, parse_metric
from .graph import DataError, InteractionGraph, Schema, graph_stats, ingest_interactions, is_graph_cache, load_graph, save_graph, split_edges
from .model import ModelConfig
from .synth import SynthSpec, generate
from .training import NumericalError, SamplingError, TrainConfig
from .transfer import Dataset, end_to_end, fine_tune, multi_graph_pretrain, transfer_matrix, zero_shot

log = logging.getLogger("nbfrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration ------------------------------------------------------------

RUN_KEYS = {"split": str, "split_seed": int}


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {raw!r}")
    if "tuple" in str(kind):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if "None" in str(kind):  # optional int
        return None if raw.lower() == "none" else int(raw)
    for typ in (int, float, str):
        if typ.__name__ in str(kind):
            return typ(raw)
    return raw


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def parse_config(lines, overrides=()) -> dict:
    """``key=value`` lines (``#`` comments) into model/train/synth/run sections."""
    sections = {
        "model": _field_types(ModelConfig),
        "train": _field_types(TrainConfig),
        "synth": _field_types(SynthSpec),
        "run": RUN_KEYS,
    }
    out: dict[str, dict] = {k: {} for k in sections}
    for n, line in enumerate(list(lines) + list(overrides), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        hits = [s for s, keys in sections.items() if key in keys]
        if not hits:
            raise UsageError(f"unknown config key {key!r}")
        for s in hits:
            try:
                out[s][key] = _coerce(sections[s][key], raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
    return out


def _load_config(args) -> dict:
    lines = []
    if getattr(args, "config", None):
        try:
            lines = Path(args.config).read_text().splitlines()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    cfg = parse_config(lines, getattr(args, "set", None) or [])
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "structural_only", False):
        cfg["model"]["structural_only"] = True
    return cfg


def _model_config(cfg) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def _train_config(cfg, seed: int) -> TrainConfig:
    try:
        return TrainConfig(**{**cfg["train"], "seed": seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def _ratios(cfg) -> tuple[float, ...]:
    raw = cfg["run"].get("split", "0.8,0.1,0.1")
    try:
        r = tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise UsageError(f"bad split ratios {raw!r}") from None
    if len(r) != 3:
        raise UsageError("split needs three ratios: train,valid,test")
    return r


# -- datasets -----------------------------------------------------------------


def _schema(args) -> Schema | None:
    if getattr(args, "schema", None):
        return Schema.parse(args.schema)
    if getattr(args, "user_col", None) or getattr(args, "item_col", None):
        if not (args.user_col and args.item_col):
            raise UsageError("--user-col and --item-col must be given together")
        feats = tuple(c for c in (args.feature_cols or "").split(",") if c)
        return Schema(args.user_col, args.item_col, feats)
    return None


def _read_graph(path: str, schema: Schema | None) -> InteractionGraph:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if is_graph_cache(path):
        return load_graph(path)
    if schema is None:
        raise UsageError(f"{path} is delimited text: pass --schema or --user-col/--item-col")
    with open(path, newline="") as fh:
        return ingest_interactions(fh, schema)


def _dataset_name(path: str) -> str:
    return Path(path).name.split(".")[0]


def _datasets(args, cfg) -> list[Dataset]:
    if not args.data:
        raise UsageError("--data is required")
    schema = _schema(args)
    ratios = _ratios(cfg)
    split_seed = cfg["run"].get("split_seed", 0)
    out = []
    for path in args.data:
        g = _read_graph(path, schema)
        out.append(Dataset(_dataset_name(path), g, split_edges(g, ratios, split_seed)))
    names = [d.name for d in out]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate dataset names {names}: rename the input files")
    return out


def _seeds(args) -> list[int]:
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --seeds {args.seeds!r}") from None
    return [args.seed]


def _metrics(args) -> list[str]:
    names = args.metric or ["hits@10", "ndcg@20"]
    try:
        for m in names:
            parse_metric(m)
        parse_candidates(args.candidates)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return names


# -- manifest and reporting ----------------------------------------------------


def _build_id() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def write_manifest(out_dir: Path, args, cfg: dict, seeds, inputs, outputs, timings) -> Path:
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", sys.argv[1:]),
        "config": cfg,
        "seeds": list(seeds),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "build": _build_id(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "timings_sec": timings,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def summarize(per_seed: dict[int, dict]) -> dict:
    """Per metric mean and 95% CI over seeds (CI omitted for one seed)."""
    names = next(iter(per_seed.values()))["metric"].keys()
    return {m: mean_ci([r["metric"][m] for r in per_seed.values()]) for m in names}


def _fmt(summary: dict) -> str:
    parts = []
    for m, s in summary.items():
        txt = f"{m} {s['mean']:.4f}"
        if "ci95" in s:
            txt += f" ± {s['ci95']:.4f}"
        parts.append(txt)
    n = next(iter(summary.values()))["n"]
    return ", ".join(parts) + f" ({n} seed{'s' if n != 1 else ''})"


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    schema = _schema(args)
    if schema is None:
        raise UsageError("ingest needs --schema or --user-col/--item-col")
    if not args.data or len(args.data) != 1:
        raise UsageError("ingest takes exactly one --data file")
    t0 = time.perf_counter()
    g = _read_graph(args.data[0], schema)
    out = Path(args.out) if args.out else Path(args.data[0]).with_suffix(".nbfg")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, out)
    stats = graph_stats(g)
    stats_path = out.with_suffix(".stats.json")
    stats_path.write_text(json.dumps(stats, indent=2))
    write_manifest(out.parent, args, {"schema": schema.__dict__}, [], args.data, [out, stats_path],
                   {"total": time.perf_counter() - t0})
    print(f"{g.num_users} users, {g.num_items} items, {g.num_edges} interactions -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    try:
        spec = SynthSpec(**{**cfg["synth"], "seed": args.seed})
        sg = generate(spec)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    name = args.name
    csv_path, labels_path = out / f"{name}.csv", out / f"{name}.labels.json"
    sg.write(csv_path, labels_path)
    stats = graph_stats(sg.graph)
    stats["expected_interactions"] = spec.expected_edges()
    (out / f"{name}.stats.json").write_text(json.dumps(stats, indent=2))
    write_manifest(out, args, {"synth": spec.to_dict()}, [args.seed], [], [csv_path, labels_path],
                   {"total": time.perf_counter() - t0})
    schema = ",".join(["user", "item", *sg.graph.feature_names])
    print(f"{stats['interactions']} interactions (expected {stats['expected_interactions']:.1f}) -> {csv_path}")
    print(f"schema: {schema}")
    return EXIT_OK


def _report_block(per_seed: dict[int, dict]) -> dict:
    return {"per_seed": {str(s): r for s, r in per_seed.items()}, "summary": summarize(per_seed)}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    datasets = _datasets(args, cfg)
    metrics, seeds = _metrics(args), _seeds(args)
    mcfg = _model_config(cfg)
    results: dict[str, dict[int, dict]] = {d.name: {} for d in datasets}
    outputs, timings = [], {}
    for seed in seeds:
        tcfg = _train_config(cfg, seed)
        t0 = time.perf_counter()
        if len(datasets) == 1:
            trained = end_to_end(datasets[0], mcfg, tcfg, metrics, args.candidates)
        else:
            trained = multi_graph_pretrain(datasets, mcfg, tcfg)
            for d in datasets:
                trained.reports[d.name] = evaluate(trained.model, trained.heads[d.name], d.graph, d.split, "test",
                                                   metrics, args.candidates, seed=seed)
        timings[f"seed{seed}"] = time.perf_counter() - t0
        meta = {"epochs_run": len(trained.fit.history), "best_epoch": trained.fit.best_epoch, "seed": seed,
                "datasets": [d.name for d in datasets], "train_config": tcfg.to_dict()}
        ck_path = out / f"checkpoint_seed{seed}.nbfc"
        save_checkpoint(ck_path, trained.checkpoint(meta))
        outputs.append(ck_path)
        for name, rep in trained.reports.items():
            results[name][seed] = rep.to_dict(per_query=args.per_query)
    report = {"command": "train", "datasets": {n: _report_block(r) for n, r in results.items()}}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    write_manifest(out, args, cfg, seeds, args.data, outputs + [report_path], timings)
    for name, block in report["datasets"].items():
        print(f"{name}: {_fmt(block['summary'])}")
    return EXIT_OK


def _checkpoint_for(args, seed: int, which: str):
    path = args.checkpoint
    if path is None:
        raise UsageError("--checkpoint is required")
    path = path.replace("{seed}", str(seed))
    if not os.path.exists(path):
        raise DataError(f"no such checkpoint: {path}")
    return load_checkpoint(path, which)


def cmd_zero_shot(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    datasets = _datasets(args, cfg)
    metrics, seeds = _metrics(args), _seeds(args)
    results = {d.name: {} for d in datasets}
    t0 = time.perf_counter()
    for seed in seeds:
        ckpt = _checkpoint_for(args, seed, "backbone_only")
        for d in datasets:
            results[d.name][seed] = zero_shot(ckpt, d, seed, metrics, args.candidates).to_dict(per_query=args.per_query)
    report = {"command": "zero-shot", "checkpoint": args.checkpoint,
              "datasets": {n: _report_block(r) for n, r in results.items()}}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    write_manifest(out, args, cfg, seeds, [*args.data, args.checkpoint], [report_path],
                   {"total": time.perf_counter() - t0})
    for name, block in report["datasets"].items():
        print(f"{name}: {_fmt(block['summary'])}")
    return EXIT_OK


def cmd_fine_tune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    datasets = _datasets(args, cfg)
    if len(datasets) != 1:
        raise UsageError("fine-tune takes exactly one --data target")
    target = datasets[0]
    metrics, seeds = _metrics(args), _seeds(args)
    results, outputs, timings = {}, [], {}
    for seed in seeds:
        ckpt = _checkpoint_for(args, seed, "backbone_only")
        tcfg = _train_config(cfg, seed)
        t0 = time.perf_counter()
        trained = fine_tune(ckpt, target, tcfg, metrics, args.candidates)
        timings[f"seed{seed}"] = time.perf_counter() - t0
        ck_path = out / f"checkpoint_seed{seed}.nbfc"
        meta = {"source_checkpoint": args.checkpoint, "seed": seed, "best_epoch": trained.fit.best_epoch,
                "datasets": [target.name], "train_config": tcfg.to_dict()}
        save_checkpoint(ck_path, trained.checkpoint(meta))
        outputs.append(ck_path)
        results[seed] = trained.reports[target.name].to_dict(per_query=args.per_query)
    report = {"command": "fine-tune", "checkpoint": args.checkpoint, "datasets": {target.name: _report_block(results)}}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    write_manifest(out, args, cfg, seeds, [*args.data, args.checkpoint], outputs + [report_path], timings)
    print(f"{target.name}: {_fmt(report['datasets'][target.name]['summary'])}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    datasets = _datasets(args, cfg)
    if len(datasets) < 2:
        raise UsageError("matrix needs at least two --data files")
    metrics, seeds = _metrics(args), _seeds(args)
    mcfg = _model_config(cfg)
    metric = metrics[0]
    outputs, timings = [], {}
    cells: dict[str, dict[int, dict]] = {}
    for seed in seeds:
        t0 = time.perf_counter()
        m = transfer_matrix(datasets, mcfg, _train_config(cfg, seed), metric, args.candidates)
        timings[f"seed{seed}"] = time.perf_counter() - t0
        csv_path = out / f"matrix_seed{seed}.csv"
        csv_path.write_text(m.to_csv())
        outputs.append(csv_path)
        for (tgt, src), rep in m.reports.items():
            key = f"{src}->{tgt}"
            cells.setdefault(key, {})[seed] = rep.to_dict(per_query=args.per_query)
            cell_path = out / f"cell_{src}_to_{tgt}_seed{seed}.json"
            cell_path.write_text(rep.to_json(per_query=args.per_query))
            outputs.append(cell_path)
    report = {"command": "matrix", "metric": metric, "cells": {k: _report_block(v) for k, v in cells.items()}}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    write_manifest(out, args, cfg, seeds, args.data, outputs + [report_path], timings)
    for key, block in report["cells"].items():
        print(f"{key}: {_fmt(block['summary'])}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nbfrec", description="Inductive link prediction on user-item graphs.")
    p.add_argument("--workers", type=int, default=None, help="torch intra-op threads (default: available cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, schema=True, seeds=True, metrics=True, out_required=True):
        if data:
            sp.add_argument("--data", action="append", help="delimited text or NBFG cache (repeatable)")
        if schema:
            sp.add_argument("--schema", help="comma list: user column, item column, feature columns...")
            sp.add_argument("--user-col")
            sp.add_argument("--item-col")
            sp.add_argument("--feature-cols", help="comma list")
        sp.add_argument("--config", help="key=value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--out", required=False)
        if seeds:
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--seeds", help="comma list; overrides --seed")
        if metrics:
            sp.add_argument("--metric", action="append", help="hits@K or ndcg@K (repeatable)")
            sp.add_argument("--candidates", default="full", help="full | sampled:N")
            sp.add_argument("--per-query", action="store_true", help="include per-query ranks in reports")

    sp = sub.add_parser("ingest", help="parse delimited text into an NBFG cache")
    common(sp, seeds=False, metrics=False)

    sp = sub.add_parser("synth", help="generate a cluster-planted synthetic dataset")
    common(sp, data=False, schema=False, metrics=False)
    sp.add_argument("--name", default="synth")

    sp = sub.add_parser("train", help="end-to-end or multi-graph training")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--structural-only", action="store_true")

    for name in ("zero-shot", "fine-tune"):
        sp = sub.add_parser(name, help=f"{name} transfer from a checkpoint ('{{seed}}' in the path expands per seed)")
        common(sp)
        sp.add_argument("--checkpoint")
        if name == "fine-tune":
            sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("matrix", help="cross-dataset zero-shot transfer matrix")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--structural-only", action="store_true")
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "zero-shot": cmd_zero_shot,
    "fine-tune": cmd_fine_tune,
    "matrix": cmd_matrix,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = parser.parse_args(argv)
        args.argv = argv
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        torch.set_num_threads(args.workers or os.cpu_count() or 1)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, SamplingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
