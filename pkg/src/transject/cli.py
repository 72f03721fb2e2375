"""Command line entry point: train, analyze, bench, gen-listops."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import analysis
from .checkpoint import load_checkpoint
from .config import ConfigError, load_config
from .data import (LISTOPS_VOCAB, gen_listops, listops_examples, load_char_classification,
                   read_listops_tsv, write_listops_tsv)
from .harness import (benchmark_inference, bench_models, train, write_analysis,
                      write_bench_csv)


def _lengths(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return vals


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.run_dir:
        cfg.output.run_dir = args.run_dir
    res = train(cfg)
    tr = res.last("train")
    metric = "perplexity" if "perplexity" in tr else "accuracy"
    print(f"run dir: {res.run_dir}")
    print(f"best epoch {res.best_epoch}; final train {metric} {tr[metric]:.4f}")
    for w in res.warnings:
        print(f"warning: {w}")
    if res.diverged:
        print(f"diverged: {res.diverged}", file=sys.stderr)
        return 2
    return 0


def _load_examples(path: Path, model):
    """ListOps TSV when the model uses the ListOps alphabet, else character TSV."""
    header_vocab = model.config.vocab_size
    if header_vocab == len(LISTOPS_VOCAB):
        return listops_examples(read_listops_tsv(path))
    examples, _ = load_char_classification(path, max_len=model.config.max_len)
    return examples


def cmd_analyze(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    examples = _load_examples(Path(args.data), model)[:args.samples]
    recs = write_analysis(model, examples, Path(args.out), tag=header["kind"])
    af = [r for r in recs if r.metric == "activation_factor" and r.statistic == "median"]
    for r in af:
        print(f"layer {r.layer}: median activation factor {r.value:.4f}")
    for w in analysis.residual_warnings(model):
        print(f"warning: {w}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    tj, van = bench_models(cfg.model.layers, cfg.model.d, args.lengths, cfg.model.experts,
                           cfg.model.heads, seed=cfg.optim.seed)
    rows = benchmark_inference({"transject": tj, "vanilla": van}, args.lengths, args.repeats)
    out = Path(args.out) if args.out else Path(cfg.output.run_dir) / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out)
    for r in rows:
        print(f"{r.model:10s} N={r.length:5d} {r.median_seconds * 1e3:9.2f} ms  "
              f"speedup {r.speedup:.2f}")
    print(f"wrote {out}")
    return 0


def cmd_gen_listops(args) -> int:
    pairs = gen_listops(args.count, args.max_depth, args.max_len, args.seed)
    write_listops_tsv(pairs, args.out)
    print(f"wrote {len(pairs)} expressions to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transject", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from an INI config")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", help="override [output] run_dir")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="export diagnostics for a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True, help="TSV of <label>\\t<text> lines")
    a.add_argument("--out", required=True)
    a.add_argument("--samples", type=int, default=256)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="time inference against the vanilla baseline")
    b.add_argument("--config", required=True)
    b.add_argument("--lengths", type=_lengths, default=[256, 512, 1024, 2048])
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-listops", help="write a ListOps TSV")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--max-depth", type=int, default=2)
    g.add_argument("--max-len", type=int, default=64)
    g.set_defaults(func=cmd_gen_listops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
