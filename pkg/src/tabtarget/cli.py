"""Command-line entry point: ``tabtarget {verbalize,pretrain,finetune,evaluate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Set ``TABTARGET_THREADS`` to bound the number of intra-op threads.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import CheckpointError, atomic_write_text, load, save
from .evaluation import MetricError, read_results, report, to_matrix
from .ingest import SchemaError, SplitSpec, load_csv, read_sidecar
from .model import PRESETS, build_model
from .nn.optim import NonFiniteGradientError
from .train import (
    FinetuneConfig,
    NumericFailure,
    PretrainConfig,
    build_tokenizer,
    finetune,
    load_corpus,
    prepare,
    pretrain,
    read_manifest,
)
from .verbalize import MODES, dump_jsonl, fit_verbalizer

log = logging.getLogger("tabtarget")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "TABTARGET_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path: str | Path | None) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    if path is None:
        return {}
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _convert(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if raw.lower() == "none":
        return None
    # the only field defaulting to None is an optional row cap
    return float(raw) if isinstance(default, float) else int(raw)


def apply_overrides(cfg, values: dict[str, str], prefix: str = ""):
    """Return ``cfg`` with ``prefix + field`` keys from ``values`` applied; unmatched keys are left for others."""
    kw = {}
    for f in fields(cfg):
        key = prefix + f.name
        if key in values:
            try:
                kw[f.name] = _convert(values[key], getattr(cfg, f.name))
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    return replace(cfg, **kw)


def _settings(args) -> dict[str, str]:
    values = read_config(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = str(args.epochs)
    return values


def _check_keys(values: dict[str, str], *configs) -> None:
    known = {f.name for c in configs for f in fields(c)} | {"vocab_max_size", "mode", "verbalization"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")


def write_manifest(out: Path, command: str, args, inputs: Sequence[str], seed, resolved: dict) -> None:
    manifest = {
        "command": command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "inputs": [str(p) for p in inputs],
        "seed": seed,
        "output": str(out),
        "resolved": resolved,
        "argv": sys.argv[1:],
        "version": __version__,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")


def _hints(schema: str | None, data: str) -> dict[str, str]:
    if schema:
        return read_sidecar(schema)
    sidecar = Path(data + ".schema")
    return read_sidecar(sidecar) if sidecar.exists() else {}


def cmd_verbalize(args) -> int:
    if args.mode not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    ds = load_csv(args.data, _hints(args.schema, args.data), args.target)
    verb = fit_verbalizer(ds, args.mode)
    buf = io.StringIO()
    n = dump_jsonl(verb.transform(ds).sequences(), buf)
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    values = _settings(args)
    _check_keys(values, PretrainConfig())
    cfg = apply_overrides(PretrainConfig(), values)
    mode = values.get("mode", "full")
    entries = read_manifest(args.corpus)
    datasets = load_corpus(entries)
    corpus = [prepare(d, SplitSpec.pretraining(cfg.seed), mode) for d in datasets]
    max_vocab = int(values["vocab_max_size"]) if "vocab_max_size" in values else None
    tok = build_tokenizer(corpus, max_size=max_vocab)
    if args.preset == "paper":
        model_cfg = PRESETS["paper"]()
        if len(tok) > model_cfg.semantic.vocab_size:
            tok = build_tokenizer(corpus, max_size=model_cfg.semantic.vocab_size)
    else:
        model_cfg = PRESETS["desk"](len(tok))
    model = build_model(model_cfg, tok, seed=cfg.seed)
    counts = model.component_counts()
    total = sum(counts.values())
    print("parameters: " + ", ".join(f"{k} {v:,}" for k, v in counts.items()) + f"; total {total:,}")
    print(f"pretraining on {len(corpus)} dataset(s): " + ", ".join(f"{k}={v}" for k, v in asdict(cfg).items()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pretrain(corpus, model, cfg, on_epoch=lambda r: print(f"epoch {r.epoch}: mean metric {r.mean_metric:.4f} lr {r.lr:.3g}"))
    save(model, out / "model.ttck", {"best_epoch": str(res.best_epoch), "best_metric": repr(res.best_metric)})
    atomic_write_text(out / "history.csv", _csv_text(res.history_rows()))
    write_manifest(out, "pretrain", args, [str(e.path) for e in entries], cfg.seed, {**asdict(cfg), "preset": args.preset})
    print(f"best epoch {res.best_epoch} (mean metric {res.best_metric:.4f}); checkpoint written to {out / 'model.ttck'}")
    return EXIT_OK


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_finetune(args) -> int:
    values = _settings(args)
    _check_keys(values, FinetuneConfig())
    base = FinetuneConfig.full_finetune() if args.full else FinetuneConfig()
    cfg = apply_overrides(base, values)
    if args.full and not cfg.full:
        cfg = replace(cfg, full=True)
    model, _extra = load(args.checkpoint)
    ds = load_csv(args.data, _hints(args.schema, args.data), args.target)
    data = prepare(ds, SplitSpec.finetuning(cfg.seed), values.get("mode", "full"))
    if cfg.full:
        print(f"full finetuning: lr={cfg.max_lr:g}, patience={cfg.patience}")
    else:
        print(f"adapters: r={cfg.r}, alpha={cfg.alpha:g}, dropout={cfg.adapter_dropout:g}, lr={cfg.max_lr:g}, patience={cfg.patience}")
    res = finetune(model, data, cfg)
    frac = res.trainable / res.total if res.total else 0.0
    print(f"trainable parameters: {res.trainable:,} of {res.total:,} ({100 * frac:.2f}%)")
    print(f"zero-shot validation metric {res.initial_metric:.6f}; best {res.best_metric:.6f} at epoch {res.best_epoch}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save(res.model, out / "model.ttck")
    metric = {
        "dataset": ds.name,
        "task": ds.task,
        "metric": "auroc" if ds.task == "classification" else "r2",
        "test_metric": res.test_metric,
        "val_metric": res.best_metric,
        "zero_shot_val_metric": res.initial_metric,
        "best_epoch": res.best_epoch,
        "trainable": res.trainable,
        "total": res.total,
    }
    atomic_write_text(out / "metric.json", json.dumps(metric, indent=2) + "\n")
    atomic_write_text(out / "history.csv", _csv_text(res.history_rows()))
    write_manifest(out, "finetune", args, [args.checkpoint, args.data], cfg.seed, asdict(cfg))
    if res.test_metric is not None:
        print(f"test metric {res.test_metric:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records, errors = read_results(args.results)
    for e in errors:
        print(f"{args.results}: {e}", file=sys.stderr)
    if not records:
        raise SchemaError(f"{args.results}: no valid result rows")
    rows, text = report(to_matrix(records))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.csv", _csv_text(rows))
    atomic_write_text(out / "report.txt", text + "\n")
    write_manifest(out, "evaluate", args, [args.results], None, {})
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tabtarget", description="Target-aware tabular transformer toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verbalize", help="dump element sequences as JSONL")
    v.add_argument("--data", required=True)
    v.add_argument("--schema", help="sidecar file of 'column = kind' hints")
    v.add_argument("--target")
    v.add_argument("--mode", default="full", help="full | name_bin | name_only")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verbalize)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
        if name == "pretrain":
            s.add_argument("--corpus", required=True, help="manifest: one CSV path per line, optional column=hint pairs")
            s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        else:
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--data", required=True)
            s.add_argument("--schema")
            s.add_argument("--target")
            s.add_argument("--full", action="store_true", help="train all unfrozen weights instead of adapters")

    e = sub.add_parser("evaluate", help="normalized scores and win rates from a results CSV")
    e.add_argument("--results", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: {THREADS_ENV} must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_USAGE
    start = time.time()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (SchemaError, CheckpointError, MetricError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.1fs", args.command, time.time() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
