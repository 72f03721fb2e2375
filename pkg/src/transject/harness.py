"""Training loop, evaluation, run-directory outputs and inference benchmarking."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from . import analysis
from .baseline import BaselineConfig, BaselineTransformer
from .checkpoint import count_parameters, load_checkpoint, parameter_report, save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import (LISTOPS_VOCAB, Example, Vocabulary, batchify, build_lm_windows, gen_listops,
                   listops_examples, load_char_classification, load_lm_text, majority_baseline)
from .model import TransJect, TransJectConfig
from .optim import Adam, EarlyStopping, TrainingDiverged
from .tensor import backward, no_grad

log = logging.getLogger(__name__)


# -- data ------------------------------------------------------------------------------

@dataclass
class Splits:
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    vocab: Vocabulary
    n_classes: int
    max_len: int
    lm: bool = False


def load_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.task == "listops":
        s = d.data_seed
        make = lambda n, k: listops_examples(gen_listops(n, d.max_depth, d.max_len, s + k))
        return Splits(make(d.train_size, 0), make(d.valid_size, 1),
                      make(d.test_size, 2) if d.test_size else [], LISTOPS_VOCAB, 10, d.max_len)
    if d.task == "text":
        train, vocab = load_char_classification(d.train_path, max_len=d.max_len)
        valid, _ = load_char_classification(d.valid_path, vocab, d.max_len)
        test = load_char_classification(d.test_path, vocab, d.max_len)[0] if d.test_path else []
        n_classes = 1 + max(e.label for e in train + valid + test)
        return Splits(train, valid, test, vocab, n_classes, d.max_len)
    stream, vocab = load_lm_text(d.train_path)
    valid_stream, _ = load_lm_text(d.valid_path, vocab)
    test = []
    if d.test_path:
        test = build_lm_windows(load_lm_text(d.test_path, vocab)[0], d.window)
    return Splits(build_lm_windows(stream, d.window), build_lm_windows(valid_stream, d.window),
                  test, vocab, len(vocab), d.window, lm=True)


def build_from_config(cfg: ExperimentConfig, splits: Splits):
    m, o = cfg.model, cfg.optim
    task = "lm" if splits.lm else "classification"
    if m.kind == "transject":
        return TransJect(TransJectConfig(
            layers=m.layers, d=m.d, experts=m.experts, vocab_size=len(splits.vocab),
            max_len=splits.max_len, sigma_mode=m.sigma_mode, recon_weight=o.recon_weight,
            task=task, n_classes=splits.n_classes, pooling=m.pooling,
            tie_residuals=m.tie_residuals, residual_init=m.residual_init, seed=o.seed))
    return BaselineTransformer(BaselineConfig(
        layers=m.layers, d=m.d, heads=m.heads, d_ff=m.d_ff or None, variant=m.kind,
        vocab_size=len(splits.vocab), max_len=splits.max_len, task=task,
        n_classes=splits.n_classes, pooling=m.pooling,
        dropout=None if m.dropout < 0 else m.dropout, seed=o.seed))


# -- epochs ---------------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    metric: float
    recon: float = math.nan


def _targets(batch, lm: bool):
    return batch.targets if lm else batch.labels


def _metric(total_loss: float, correct: int, count: int, lm: bool) -> float:
    return math.exp(total_loss / count) if lm else correct / count


def run_epoch(model, examples, batch_size: int, lm: bool, opt: Adam | None = None,
              rng: np.random.Generator | None = None) -> EpochStats:
    """Train (when ``opt`` is given) or evaluate over ``examples``.

    Loss is averaged per token for LM and per example for classification.
    """
    order = rng.permutation(len(examples)) if (opt is not None and rng is not None) else None
    total, recon_total, correct, count, batches = 0.0, 0.0, 0, 0, 0
    for batch in batchify(examples, batch_size, order=order):
        tgt = _targets(batch, lm)
        if opt is not None:
            opt.zero_grad()
            res = model.forward(batch.tokens, batch.mask, rng=rng)
            loss, task = model.loss(res, tgt, batch.mask)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite training loss {loss.item()}")
            backward(loss)
            opt.step()
        else:
            with no_grad():
                res = model.forward(batch.tokens, batch.mask)
                _, task = model.loss(res, tgt, batch.mask)
        weight = batch.mask.sum() if lm else len(batch.tokens)
        total += task.item() * weight
        count += int(weight)
        if res.recon is not None:
            recon_total += res.recon.item()
            batches += 1
        pred = res.logits.data.argmax(axis=-1)
        correct += int(((pred == tgt) * batch.mask).sum() if lm else (pred == tgt).sum())
    return EpochStats(total / count, _metric(total, correct, count, lm),
                      recon_total / batches if batches else math.nan)


# -- training ---------------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    model: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    diverged: str | None = None
    majority: float = math.nan
    warnings: list[str] = field(default_factory=list)

    def last(self, split: str) -> dict:
        return [h for h in self.history if h["split"] == split][-1]


def _fmt(v: float) -> str:
    return repr(float(v))


class MetricsWriter:
    def __init__(self, path: Path, metric_name: str):
        self.path = path
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(["epoch", "split", "loss", metric_name, "recon_loss"])
        self.metric_name = metric_name

    def write(self, epoch: int, split: str, stats: EpochStats) -> dict:
        self.w.writerow([epoch, split, _fmt(stats.loss), _fmt(stats.metric), _fmt(stats.recon)])
        self.fh.flush()
        return {"epoch": epoch, "split": split, "loss": stats.loss,
                self.metric_name: stats.metric, "recon_loss": stats.recon}

    def close(self):
        self.fh.close()


def write_analysis(model, examples: Sequence[Example], out_dir: Path, batch_size: int = 32,
                   tag: str | None = None) -> list[analysis.MetricsRecord]:
    """Trace ``examples`` and export activation factors, entropies, weight stats, distances."""
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = analysis.collect_traces(model, examples, batch_size, tag)
    records = analysis.analyze_bundle(bundle) + analysis.weight_stats(model, bundle)
    analysis.write_metrics_csv(records, out_dir / "metrics.csv")
    first = bundle.traces[0]
    idx = list(range(min(8, first[0].shape[0])))
    analysis.write_distance_csvs(analysis.layer_distance_matrices(first, idx), idx, out_dir)
    return records


def train(cfg: ExperimentConfig, splits: Splits | None = None) -> RunResult:
    """Train per ``cfg`` and fill its run directory.

    Layout: ``config.ini``, ``metrics.csv``, ``checkpoint.bin`` (best validation
    loss), ``analysis/*.csv`` and ``run_info.json`` (timings, not reproducible).
    """
    splits = splits or load_splits(cfg)
    run_dir = Path(cfg.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    model = build_from_config(cfg, splits)
    o = cfg.optim
    opt = Adam(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps)
    rng = np.random.default_rng(o.seed)
    stopper = EarlyStopping(o.patience)
    ckpt = run_dir / "checkpoint.bin"
    save_checkpoint(model, ckpt, {"epoch": 0})
    writer = MetricsWriter(run_dir / "metrics.csv", "perplexity" if splits.lm else "accuracy")
    result = RunResult(run_dir, model)
    if not splits.lm:
        result.majority = majority_baseline([e.label for e in splits.train])
    timings = []
    try:
        for epoch in range(1, o.epochs + 1):
            t0 = time.perf_counter()
            tr = run_epoch(model, splits.train, cfg.data.batch_size, splits.lm, opt, rng)
            va = run_epoch(model, splits.valid, cfg.data.batch_size, splits.lm)
            timings.append(time.perf_counter() - t0)
            result.history.append(writer.write(epoch, "train", tr))
            result.history.append(writer.write(epoch, "valid", va))
            log.info("epoch %d train loss %.4f metric %.4f | valid loss %.4f metric %.4f",
                     epoch, tr.loss, tr.metric, va.loss, va.metric)
            if not math.isfinite(va.loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            if stopper.update(epoch, va.loss):
                save_checkpoint(model, ckpt, {"epoch": epoch})
            if stopper.should_stop:
                result.stopped_early = True
                break
    except TrainingDiverged as exc:
        result.diverged = str(exc)
        (run_dir / "DIVERGED").write_text(f"{exc}\n", encoding="utf-8")
        log.error("training diverged: %s (last good checkpoint kept)", exc)
    finally:
        writer.close()
    result.best_epoch = stopper.best_epoch
    best, _ = load_checkpoint(ckpt)
    result.model = best
    if splits.test:
        te = run_epoch(best, splits.test, cfg.data.batch_size, splits.lm)
        with open(run_dir / "metrics.csv", "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [stopper.best_epoch, "test", _fmt(te.loss), _fmt(te.metric), _fmt(te.recon)])
        result.history.append({"epoch": stopper.best_epoch, "split": "test", "loss": te.loss,
                               writer.metric_name: te.metric, "recon_loss": te.recon})
    write_analysis(best, splits.valid[:cfg.data.analysis_samples], run_dir / "analysis",
                   cfg.data.batch_size, cfg.model.kind)
    result.warnings = analysis.residual_warnings(best)
    info = {"epoch_seconds": timings, "best_epoch": stopper.best_epoch,
            "stopped_early": result.stopped_early, "diverged": result.diverged,
            "majority_baseline": result.majority, "parameters": count_parameters(best),
            "parameter_report": parameter_report(best), "warnings": result.warnings}
    (run_dir / "run_info.json").write_text(json.dumps(info, indent=2), encoding="utf-8")
    return result


# -- benchmarking ---------------------------------------------------------------------------------

@dataclass
class BenchRow:
    model: str
    length: int
    median_seconds: float
    speedup: float = math.nan


def _bench_input(model, length: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.integers(2, model.config.vocab_size, size=(1, length)), np.ones((1, length))


def time_forward(model, length: int, repeats: int = 20, warmup: int = 3, seed: int = 0) -> float:
    """Median wall time of one no-grad forward on a single random sequence."""
    return time_interleaved({"m": model}, [length], repeats, warmup, seed)[("m", length)]


def time_interleaved(models: dict, lengths: Sequence[int], repeats: int = 20, warmup: int = 3,
                     seed: int = 0) -> dict:
    """Median forward time per (model name, length), timed round-robin.

    Cycling through every configuration on each repeat spreads slow drifts in
    machine speed evenly instead of biasing whichever length ran last.
    """
    inputs = {(name, n): _bench_input(m, n, seed) for name, m in models.items() for n in lengths}
    samples: dict = {key: [] for key in inputs}
    with no_grad():
        for i in range(warmup + repeats):
            for (name, n), (tokens, mask) in inputs.items():
                t0 = time.perf_counter()
                models[name].forward(tokens, mask)
                if i >= warmup:
                    samples[(name, n)].append(time.perf_counter() - t0)
    return {key: median(v) for key, v in samples.items()}


def bench_models(layers: int, d: int, lengths: Sequence[int], experts: int = 2, heads: int = 4,
                 vocab_size: int = 32, seed: int = 0):
    max_len = max(lengths)
    tj = TransJect(TransJectConfig(layers=layers, d=d, experts=experts, vocab_size=vocab_size,
                                   max_len=max_len, seed=seed))
    van = BaselineTransformer(BaselineConfig(layers=layers, d=d, heads=heads, variant="vanilla",
                                             vocab_size=vocab_size, max_len=max_len, seed=seed))
    return tj, van


def benchmark_inference(models: dict, lengths: Sequence[int] = (256, 512, 1024, 2048),
                        repeats: int = 20, warmup: int = 3, reference: str = "vanilla"
                        ) -> list[BenchRow]:
    """Median forward time per model and length; ``speedup`` = reference time / own time."""
    if repeats < 20 or warmup < 3:
        raise ValueError("timing needs at least 20 repeats and 3 warm-up runs")
    times = time_interleaved(models, lengths, repeats, warmup)
    rows = []
    for n in lengths:
        ref = times.get((reference, n))
        for name in models:
            t = times[(name, n)]
            rows.append(BenchRow(name, n, t, ref / t if ref else math.nan))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "length", "median_seconds", "speedup"])
        for r in rows:
            w.writerow([r.model, r.length, f"{r.median_seconds:.6g}", f"{r.speedup:.4g}"])
