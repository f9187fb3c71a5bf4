"""``spq`` command line.

    spq compress --model M --stats S --config C --out O --report R
    spq inspect FILE
    spq sweep --grid G [--out CSV]
    spq eval --model M --baseline B
    spq toy --spec F --out model.st --stats stats.st --eval-tokens N

Exit codes: 0 success, 2 invalid config, 3 malformed container.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys

from . import harness
from .config import CONFIG_KEYS, ConfigError, PipelineConfig, as_int, read_kv
from .container import ContainerError, load, save
from .pipeline import PipelineError, run_pipeline

EXIT_CONFIG = 2
EXIT_CONTAINER = 3

CSV_FIELDS = ["config", "ratio", "divergence", "pseudo_ppl", "baseline_ppl",
              "bytes_before", "bytes_after", "tokens"]

log = logging.getLogger("spq")


def _load(path):
    try:
        return load(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


def _eval_batches(vocab, tokens=None, seqs=8, seq_len=128, seed=1234):
    if tokens is not None:
        seqs = max(1, math.ceil(tokens / seq_len))
    return harness.token_batches(vocab, seqs, seq_len, seed)


def _append_csv(path, row):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def cmd_compress(args):
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.workers:
        config = config.with_updates({"workers": str(args.workers)})
    model = _load(args.model)
    stats = _load(args.stats) if args.stats else None
    out, report = run_pipeline(model, stats, config)
    save(out, args.out)
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(f"{args.model}: {report.bytes_before} -> {report.bytes_after} bytes "
          f"(ratio {report.ratio:.4f})")
    return 0


def cmd_inspect(args):
    c = _load(args.file)
    if args.json:
        print(json.dumps({
            "tensors": {k: {"dtype": e.dtype, "shape": list(e.shape), "bytes": e.nbytes}
                        for k, e in sorted(c.entries.items())},
            "metadata": c.metadata,
            "total_bytes": c.total_bytes(),
        }, indent=2))
        return 0
    width = max((len(k) for k in c.entries), default=4)
    for name in sorted(c.entries):
        e = c.entries[name]
        print(f"{name:<{width}}  {e.dtype:<3}  {str(list(e.shape)):<16} {e.nbytes:>12}")
    for k in sorted(c.metadata):
        print(f"# {k} = {c.metadata[k]}")
    print(f"{len(c)} tensors, {c.total_bytes()} bytes")
    return 0


def cmd_eval(args):
    baseline = _load(args.baseline)
    model = _load(args.model)
    batches = _eval_batches(harness._vocab(baseline), args.tokens, args.seqs, args.seq_len, args.seed)
    res = harness.evaluate(baseline, model, batches)
    print(json.dumps(res.__dict__, indent=2))
    if args.csv:
        _append_csv(args.csv, {"config": f"eval:{args.model}", "ratio": "",
                               "divergence": res.divergence, "pseudo_ppl": res.pseudo_perplexity,
                               "baseline_ppl": res.baseline_perplexity, "bytes_before": "",
                               "bytes_after": "", "tokens": res.tokens})
    return 0


def cmd_toy(args):
    spec = harness.ToyModelSpec.from_mapping(read_kv(args.spec)) if args.spec else harness.ToyModelSpec()
    model = harness.build_toy_model(spec)
    save(model, args.out)
    if args.stats:
        calib = harness.token_batches(spec.vocab, args.calib_seqs, args.calib_len, args.calib_seed)
        save(harness.collect_stats(model, calib, args.p), args.stats)
    print(f"toy model: {spec.parameter_count()} parameters -> {args.out}")
    if args.eval_tokens:
        batches = _eval_batches(spec.vocab, args.eval_tokens, seed=args.eval_seed)
        res = harness.evaluate(model, model, batches)
        row = {"config": "baseline", "ratio": 0.0, "divergence": res.divergence,
               "pseudo_ppl": res.pseudo_perplexity, "baseline_ppl": res.baseline_perplexity,
               "bytes_before": model.total_bytes(), "bytes_after": model.total_bytes(),
               "tokens": res.tokens}
        if args.csv:
            _append_csv(args.csv, row)
        else:
            print(json.dumps(row))
    return 0


_GRID_KEYS = {"model", "stats", "eval.seqs", "eval.seq_len", "eval.seed",
              "calib.seqs", "calib.seq_len", "calib.seed", "calib.p"}


def expand_grid(kv: dict[str, str]):
    """Split a grid file into (fixed settings, toy spec keys, list of config overrides)."""
    fixed = {k: v for k, v in kv.items() if k in _GRID_KEYS}
    toy = {k: v for k, v in kv.items() if k.startswith("toy.")}
    axes = {}
    for k, v in kv.items():
        if k in fixed or k in toy:
            continue
        if k not in CONFIG_KEYS:
            raise ConfigError(f"unknown grid key {k!r}")
        axes[k] = [v] if k.startswith("classify.") else [x.strip() for x in v.split(",") if x.strip()]
    keys = list(axes)
    combos = [dict(zip(keys, values)) for values in itertools.product(*(axes[k] for k in keys))]
    return fixed, toy, combos


def run_sweep(kv: dict[str, str]):
    fixed, toy, combos = expand_grid(kv)
    if "model" in fixed:
        model = _load(fixed["model"])
        spec = None
    else:
        spec = harness.ToyModelSpec.from_mapping(toy)
        model = harness.build_toy_model(spec)
    vocab = harness._vocab(model)
    if "stats" in fixed:
        stats = _load(fixed["stats"])
    else:
        calib = harness.token_batches(vocab, as_int("calib.seqs", fixed.get("calib.seqs", "8")),
                                      as_int("calib.seq_len", fixed.get("calib.seq_len", "128")),
                                      as_int("calib.seed", fixed.get("calib.seed", "0")))
        stats = harness.collect_stats(model, calib, as_int("calib.p", fixed.get("calib.p", "1")))
    batches = harness.token_batches(vocab, as_int("eval.seqs", fixed.get("eval.seqs", "8")),
                                    as_int("eval.seq_len", fixed.get("eval.seq_len", "128")),
                                    as_int("eval.seed", fixed.get("eval.seed", "1234")))
    rows = []
    for combo in combos:
        config = PipelineConfig.from_mapping(combo)
        out, report = run_pipeline(model, stats, config)
        res = harness.evaluate(model, out, batches)
        rows.append({
            "config": ";".join(f"{k}={v}" for k, v in combo.items()) or "default",
            "ratio": report.ratio, "divergence": res.divergence,
            "pseudo_ppl": res.pseudo_perplexity, "baseline_ppl": res.baseline_perplexity,
            "bytes_before": report.bytes_before, "bytes_after": report.bytes_after,
            "tokens": res.tokens,
        })
    return rows


def cmd_sweep(args):
    rows = run_sweep(read_kv(args.grid))
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spq", description="SVD + pruning + quantization for transformer weights")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a model container")
    p.add_argument("--model", required=True)
    p.add_argument("--stats")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("inspect", help="list the tensors of a container")
    p.add_argument("file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="run a grid of pipeline configs and emit CSV")
    p.add_argument("--grid", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="compare a (compressed) model against a baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--tokens", type=int)
    p.add_argument("--seqs", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy", help="build the toy transformer and its calibration stats")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.add_argument("--eval-tokens", type=int, default=0)
    p.add_argument("--eval-seed", type=int, default=1234)
    p.add_argument("--calib-seqs", type=int, default=8)
    p.add_argument("--calib-len", type=int, default=128)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--p", type=int, choices=(1, 2), default=1)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContainerError as exc:
        print(f"spq: malformed container: {exc}", file=sys.stderr)
        return EXIT_CONTAINER
    except (ConfigError, PipelineError) as exc:
        print(f"spq: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
