"""Command-line entry point: ``spancycle <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .ablation import DEFAULT_RATES, ablate_drop, format_table
from .config import Config, load_config, read_config_file
from .decoder import decode, gold_extractions, read_matrices, write_matrices
from .errors import ConfigError, DataError, DivergenceError, SpanCycleError
from .labeldrop import drop_accuracy
from .metrics import evaluate
from .model import forward_matrices, predict
from .schema import RELATIONS, Instance, build_graph_labels, build_label_vectors, load_dataset
from .trainer import (Checkpoint, distill, export_teacher, load_checkpoint, sample_few_shot,
                      save_checkpoint, train)

logger = logging.getLogger("spancycle")


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, base: Config | None = None) -> Config:
    """Checkpoint config (if any), then the --config file, then --set flags."""
    values = base.to_dict() if base is not None else {}
    if args.config:
        values.update(read_config_file(args.config))
    values.update(_overrides(args.set))
    return load_config(None, values)


def _load(path: str, cfg: Config, ckpt: Checkpoint | None = None) -> list[Instance]:
    return load_dataset(path, ckpt.vocab if ckpt else None, cfg.max_len)


def _checkpoint(args) -> Checkpoint:
    ckpt = load_checkpoint(args.checkpoint)
    ckpt.config = _config(args, ckpt.config)
    return ckpt


def _write_json_lines(rows, out: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    cfg = _config(args)
    data = _load(args.data, cfg)
    lengths = [len(x.input) for x in data]
    labels = Counter(t.label for x in data for t in x.gold.tuples)
    positives = np.zeros(3)
    keep = np.zeros(3)
    for x in data:
        positives += build_graph_labels(x.input, x.gold).sum(axis=(1, 2))
        keep += build_label_vectors(x.input, x.gold).sum(axis=1)
    stats = {
        "instances": len(data),
        "tasks": dict(sorted(Counter(x.input.task for x in data).items())),
        "tokens": {"min": min(lengths, default=0), "max": max(lengths, default=0),
                   "mean": float(np.mean(lengths)) if lengths else 0.0},
        "tuples": sum(labels.values()),
        "labels": dict(sorted(labels.items())),
        "graph_positives": {r: int(positives[k]) for k, r in enumerate(RELATIONS)},
        "keep_positives": {r: int(keep[k]) for k, r in enumerate(RELATIONS)},
        "images": sum(x.image is not None for x in data),
    }
    _emit(json.dumps(stats, indent=2, sort_keys=True), args.out)
    if args.dump_gold:
        write_matrices(args.dump_gold, {x.id: build_graph_labels(x.input, x.gold) for x in data})
    return 0


def _save_last_good(exc: DivergenceError, out: str) -> None:
    if exc.last_good is not None:
        path = out + ".last_good"
        save_checkpoint(exc.last_good, path)
        logger.error("saved last good checkpoint to %s", path)


def cmd_train(args) -> int:
    init = load_checkpoint(args.init) if args.init else None
    cfg = _config(args)
    if args.few_shot is not None:
        cfg = cfg.replace(few_shot=True)
    data = _load(args.data, cfg, init)
    if args.few_shot is not None:
        data = sample_few_shot(data, args.few_shot, args.seed)
    dev = _load(args.dev, cfg, init) if args.dev else None
    try:
        res = train(data, cfg, args.seed, dev=dev, init=init, log_path=args.log)
    except DivergenceError as exc:
        _save_last_good(exc, args.out)
        raise
    save_checkpoint(res.checkpoint, args.out)
    last = res.log[-1] if res.log else {}
    print(f"trained {len(data)} instances for {res.checkpoint.epoch} epochs; "
          f"final train loss {last.get('total', float('nan')):.6f}; checkpoint {args.out}")
    return 0


def cmd_distill(args) -> int:
    init = load_checkpoint(args.init) if args.init else None
    cfg = _config(args)
    data = _load(args.data, cfg, init)
    teacher = read_matrices(args.teacher)
    dev = _load(args.dev, cfg, init) if args.dev else None
    try:
        res = distill(teacher, data, cfg, args.seed, init=init, dev=dev, log_path=args.log)
    except DivergenceError as exc:
        _save_last_good(exc, args.out)
        raise
    save_checkpoint(res.checkpoint, args.out)
    last = res.log[-1] if res.log else {}
    print(f"distilled {len(data)} instances for {res.checkpoint.epoch} epochs; "
          f"final L_MT {last.get('l_mt', float('nan')):.6f}; checkpoint {args.out}")
    return 0


def cmd_export_teacher(args) -> int:
    ckpt = _checkpoint(args)
    data = _load(args.data, ckpt.config, ckpt)
    write_matrices(args.out, export_teacher(ckpt, data))
    print(f"exported {len(data)} teacher entries to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args)
    data = _load(args.data, ckpt.config, ckpt)
    model = ckpt.build_model()
    mats = forward_matrices(model, data)
    preds = predict(model, data, mats)
    golds = {x.id: gold_extractions(x.input, x.gold) for x in data}
    report = evaluate(preds, golds, {x.id: x.input.task for x in data})
    accs = [drop_accuracy(mats[x.id]["keep"], build_graph_labels(x.input, x.gold)) for x in data]
    if accs:
        report.drop_accuracy = {k: float(np.mean([a[k] for a in accs])) for k in accs[0]}
    if args.report:
        report.write(args.report)
    print(report.table())
    return 0


def cmd_decode(args) -> int:
    if bool(args.matrices) == bool(args.checkpoint):
        raise ConfigError("decode needs exactly one of --matrices or --checkpoint")
    if args.checkpoint:
        ckpt = _checkpoint(args)
        cfg = ckpt.config
        data = _load(args.data, cfg, ckpt)
        model = ckpt.build_model()
        preds = predict(model, data)
    else:
        cfg = _config(args)
        data = _load(args.data, cfg)
        mats = read_matrices(args.matrices)
        preds = {}
        for x in data:
            if x.id not in mats:
                raise DataError(f"matrix dump has no entry for instance {x.id!r}")
            if mats[x.id].shape[-1] != len(x.input):
                raise DataError(f"matrix for {x.id!r} has length {mats[x.id].shape[-1]}, "
                                f"input has {len(x.input)} tokens")
            preds[x.id] = decode(mats[x.id], x.input, cfg.threshold, cfg.max_pieces,
                                 cfg.max_span_len, cfg.decode_budget)
    rows = [{"id": x.id, "extractions": [e.to_record(x.input) for e in preds[x.id]]} for x in data]
    _write_json_lines(rows, args.out)
    return 0


def cmd_ablate_drop(args) -> int:
    ckpt = _checkpoint(args)
    data = _load(args.data, ckpt.config, ckpt)
    try:
        rates = [float(r) for r in args.rates.split(",")] if args.rates else list(DEFAULT_RATES)
    except ValueError:
        raise ConfigError(f"--rates must be comma-separated numbers, got {args.rates!r}") from None
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError("drop rates must lie in [0, 1]")
    rows = ablate_drop(ckpt.build_model(), data, rates, args.seed)
    _emit(format_table(rows), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable; wins over --config")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spancycle",
                                     description="Span extraction by closed relation loops over token pairs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("prepare", help="validate a dataset and print statistics")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH", help="dataset (JSON lines)")
    p.add_argument("--out", metavar="PATH", help="write statistics here instead of stdout")
    p.add_argument("--dump-gold", metavar="PATH", help="write gold graph labels as a matrix dump")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH", help="training set")
    p.add_argument("--dev", metavar="PATH", help="dev set for early stopping")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint to write")
    p.add_argument("--log", metavar="PATH", help="metrics log (JSON lines)")
    p.add_argument("--init", metavar="PATH", help="start from this checkpoint")
    p.add_argument("--few-shot", type=int, metavar="K", help="sample K shots per label and use few-shot epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--report", metavar="PATH", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="emit extractions from a matrix dump or a checkpoint")
    _common(p)
    p.add_argument("--matrices", metavar="PATH", help="matrix dump keyed by instance id")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", metavar="PATH", help="write JSON lines here instead of stdout")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("distill", help="train a student against teacher matrices")
    _common(p)
    p.add_argument("--teacher", required=True, metavar="PATH", help="matrix dump from export-teacher")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--dev", metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--log", metavar="PATH")
    p.add_argument("--init", metavar="PATH", help="start the student from this checkpoint")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("export-teacher", help="write gated matrices of a checkpoint over a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_export_teacher)

    p = sub.add_parser("ablate-drop", help="sweep random drop rates and print a rate/F1 table")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--rates", metavar="R1,R2,...", help="drop rates (default 0.1,0.2,...,1.0)")
    p.add_argument("--out", metavar="PATH", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_ablate_drop)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpanCycleError as exc:
        print(f"spancycle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
