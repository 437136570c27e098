"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
Flag values resolve as: command line > ``--config`` file (``key=value`` lines) > default.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (
    SOURCES,
    SplitManifest,
    filter_by_length,
    make_cross_test,
    make_split,
    parse_dataset,
    records_to_csv,
    redundancy_filter,
)
from .descriptors import COLUMNS, acc_transform, sequence_descriptors
from .embedio import read_bundles, synthetic_bundles, write_bundles
from .errors import DataError, ImmunoError, NumericalError
from .metrics import reports_to_csv
from .model import ModelConfig, export_attention, model_forward
from .synthetic import separable_dataset
from .trainer import (
    TrainConfig,
    evaluate_repeated,
    history_to_csv,
    predict_proba,
    prepare_examples,
    train,
)

log = logging.getLogger("immunoattn")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_records(path):
    return parse_dataset(Path(path).read_bytes())


def _load_bundles(path):
    return {b.id: b for b in read_bundles(path)}


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return parts  # type: ignore[return-value]


def _partition(records, split_path, partition):
    manifest = SplitManifest.from_csv(Path(split_path).read_text(encoding="utf-8"))
    ids = set(manifest.ids(partition))
    return [r for r in records if r.id in ids]


def _checkpoint_examples(args):
    records = _load_records(args.data)
    if getattr(args, "split", None):
        records = _partition(records, args.split, args.partition)
    ckpt = load_checkpoint(args.checkpoint)
    examples = prepare_examples(records, _load_bundles(args.bundles))
    return ckpt, examples


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs) for the run manifest
# ---------------------------------------------------------------------------


def cmd_filter(args):
    records = _load_records(args.data)
    kept = filter_by_length(records, args.min_len, args.max_len)
    kept = redundancy_filter(kept, args.identity_threshold, args.kmer)
    _write_text(args.out, records_to_csv(kept))
    log.info("kept %d of %d records", len(kept), len(records))
    return [args.data], [args.out]


def cmd_split(args):
    records = _load_records(args.data)
    if args.cross:
        src, dst = args.cross
        a = [r for r in records if r.source == src]
        b = [r for r in records if r.source == dst]
        manifest = make_cross_test(a, b, args.valid_fraction, args.seed)
    else:
        manifest = make_split(records, args.ratios, args.seed)
    _write_text(args.out, manifest.to_csv())
    return [args.data], [args.out]


def cmd_featurize(args):
    records = _load_records(args.data)
    if args.mode == "matrix":
        rows = []
        for r in records:
            mat = sequence_descriptors(r.sequence)
            rows.extend([r.id, i + 1, aa, *map(repr, mat[i])] for i, aa in enumerate(r.sequence))
        text = _csv_text(["id", "position", "residue", *COLUMNS], rows)
    else:
        rows = [
            [r.id, *map(repr, acc_transform(sequence_descriptors(r.sequence), args.max_lag))]
            for r in records
        ]
        width = 8 * 8 * args.max_lag
        text = _csv_text(["id", *(f"acc_{i}" for i in range(width))], rows)
    _write_text(args.out, text)
    return [args.data], [args.out]


def cmd_embed_synth(args):
    records = _load_records(args.data)
    write_bundles(synthetic_bundles(records, args.dim, args.seed), args.out)
    return [args.data], [args.out]


def cmd_synth_data(args):
    records = separable_dataset(args.n, args.seed, source=args.source)
    _write_text(args.out, records_to_csv(records))
    return [], [args.out]


def cmd_train(args):
    records = _load_records(args.data)
    bundles = _load_bundles(args.bundles)
    tr = prepare_examples(_partition(records, args.split, "train"), bundles)
    va = prepare_examples(_partition(records, args.split, "valid"), bundles)
    if not tr:
        raise DataError("training partition is empty")
    dims = {ex.bundle.dim for ex in tr + va}
    if len(dims) != 1:
        raise DataError(f"bundles have mixed embedding widths {sorted(dims)}")
    model_cfg = ModelConfig(
        d=dims.pop(), n_heads=args.heads, dropout_p=args.dropout, hidden=args.hidden,
        rope_base=args.rope_base, dtype=args.precision,
    )
    train_cfg = TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, max_tokens_per_batch=args.max_tokens,
        grad_accum=args.grad_accum, max_epochs=args.epochs, patience=args.patience, seed=args.seed,
    )
    result = train(tr, va, model_cfg, train_cfg)
    save_checkpoint(result.checkpoint, args.out_checkpoint)
    outputs = [args.out_checkpoint]
    if args.history_csv:
        _write_text(args.history_csv, history_to_csv(result.history))
        outputs.append(args.history_csv)
    log.info("best epoch %d of %d", result.best_epoch, len(result.history))
    return [args.data, args.bundles, args.split], outputs


def cmd_eval(args):
    ckpt, examples = _checkpoint_examples(args)
    reports, _ = evaluate_repeated(
        examples, ckpt, args.repeats, args.fraction, args.seed, args.threshold, args.top_k
    )
    _write_text(args.out, reports_to_csv(reports))
    return [args.data, args.bundles, args.split, args.checkpoint], [args.out]


def cmd_predict(args):
    ckpt, examples = _checkpoint_examples(args)
    probs = predict_proba(examples, ckpt.params, ckpt.config)
    rows = [
        [ex.record.id, repr(float(p)), int(p > args.threshold)] for ex, p in zip(examples, probs)
    ]
    _write_text(args.out, _csv_text(["id", "score", "label_pred"], rows))
    return [args.data, args.bundles, args.checkpoint], [args.out]


def cmd_attn_export(args):
    ckpt, examples = _checkpoint_examples(args)
    wanted = set(args.ids.split(",")) if args.ids else None
    if wanted is not None:
        missing = sorted(wanted - {ex.record.id for ex in examples})
        if missing:
            raise DataError(f"unknown record ids: {', '.join(missing)}")
    rows = []
    for ex in examples:
        if wanted is not None and ex.record.id not in wanted:
            continue
        trace = model_forward(ex.bundle, ex.descriptors, ckpt.params, ckpt.config, "eval")
        rows.extend([ex.record.id, pos, aa, repr(a)] for pos, aa, a in export_attention(trace, ex.record))
    _write_text(args.out, _csv_text(["id", "position", "residue", "alpha"], rows))
    return [args.data, args.bundles, args.checkpoint], [args.out]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="immunoattn", description="Antigen immunogenicity prediction toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="key=value file supplying flag defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("filter", help="length window + k-mer redundancy filter")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--min-len", type=int, default=25)
    f.add_argument("--max-len", type=int, default=1024)
    f.add_argument("--identity-threshold", type=float, default=0.3)
    f.add_argument("--kmer", type=int, default=3)
    f.set_defaults(func=cmd_filter)

    s = sub.add_parser("split", help="train/valid/test or cross-source split")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", type=_ratios, default=(0.7, 0.1, 0.2))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cross", nargs=2, metavar=("FROM", "TO"), choices=SOURCES)
    s.add_argument("--valid-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_split)

    z = sub.add_parser("featurize", help="E/Z descriptor matrices or ACC vectors")
    z.add_argument("--data", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--mode", choices=("matrix", "acc"), default="matrix")
    z.add_argument("--max-lag", type=int, default=8)
    z.set_defaults(func=cmd_featurize)

    e = sub.add_parser("embed", help="embedding containers")
    esub = e.add_subparsers(dest="embed_command", required=True, parser_class=_Parser)
    es = esub.add_parser("synth", help="deterministic synthetic embeddings")
    es.add_argument("--data", required=True)
    es.add_argument("--out", required=True)
    es.add_argument("--dim", type=int, required=True)
    es.add_argument("--seed", type=int, default=0)
    es.set_defaults(func=cmd_embed_synth)

    g = sub.add_parser("synth-data", help="write a separable synthetic dataset CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--source", choices=SOURCES, default="bacteria")
    g.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--bundles", required=True)
    t.add_argument("--split", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--history-csv")
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--max-tokens", type=int, default=4000)
    t.add_argument("--grad-accum", type=int, default=1)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--hidden", type=int)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--rope-base", type=float, default=10000.0)
    t.add_argument("--precision", choices=("float64", "float32"), default="float64")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="repeated-subsample evaluation")
    v.add_argument("--data", required=True)
    v.add_argument("--bundles", required=True)
    v.add_argument("--split", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--partition", choices=("train", "valid", "test"), default="test")
    v.add_argument("--repeats", type=int, default=10)
    v.add_argument("--fraction", type=float, default=0.5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--threshold", type=float, default=0.5)
    v.add_argument("--top-k", type=int, default=30)
    v.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("predict", cmd_predict, "positive-class probabilities"),
        ("attn-export", cmd_attn_export, "per-residue attention pooling weights"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--data", required=True)
        c.add_argument("--bundles", required=True)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--split", help="restrict to one partition of this manifest")
        c.add_argument("--partition", choices=("train", "valid", "test"), default="test")
        if name == "predict":
            c.add_argument("--threshold", type=float, default=0.5)
        else:
            c.add_argument("--ids", help="comma-separated record ids (default: all)")
        c.set_defaults(func=func)
    return p


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(("#", ";", "[")):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _subparsers(parser: argparse.ArgumentParser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                yield child
                yield from _subparsers(child)


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    for sp in [parser, *_subparsers(parser)]:
        known = {a.dest: a for a in sp._actions}
        defaults = {}
        for k, v in config.items():
            action = known.get(k)
            if action is None:
                continue
            if action.nargs in (2, "+", "*"):
                defaults[k] = v.split()
            else:
                defaults[k] = action.type(v) if action.type else v
            action.required = False
        sp.set_defaults(**defaults)


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def write_manifest(args, inputs, outputs, duration: float) -> None:
    flags = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "subcommand": " ".join(x for x in (args.command, getattr(args, "embed_command", None)) if x),
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": [str(x) for x in inputs if x],
        "outputs": [str(x) for x in outputs],
        "version": __version__,
        "duration_s": round(duration, 6),
    }
    if outputs:
        path = Path(str(outputs[0]) + ".manifest.json")
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, read_config(known.config))
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    start = time.perf_counter()
    try:
        with np.errstate(over="raise", invalid="raise"):
            inputs, outputs = args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImmunoError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_manifest(args, inputs, outputs, time.perf_counter() - start)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
