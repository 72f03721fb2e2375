"""Diagnostics on encoder traces: activation factors, sampled Lipschitz bounds,
k-NN differential entropy, token distance matrices, residual/expert weight stats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import digamma

from .data import Example, batchify
from .tensor import no_grad


class DegenerateInputError(ValueError):
    pass


@dataclass
class MetricsRecord:
    model: str
    layer: int
    metric: str
    statistic: str
    value: float


@dataclass
class TraceBundle:
    """Per-sample layer representations X^(0..L) (unpadded) and gate weights."""

    traces: list[list[np.ndarray]]
    gates: list[list[np.ndarray]] | None = None
    residual_weights: list[float] = field(default_factory=list)
    tag: str = "model"

    def __post_init__(self):
        for layers in self.traces:
            shapes = {x.shape for x in layers}
            if len(shapes) != 1:
                raise ValueError(f"layers of one sample disagree in shape: {shapes}")

    @property
    def depth(self) -> int:
        return len(self.traces[0]) - 1


def collect_traces(model, examples: Sequence[Example], batch_size: int = 32,
                   tag: str | None = None) -> TraceBundle:
    """Run ``model`` in evaluation mode and keep every layer of every sample."""
    traces, gates = [], []
    with no_grad():
        for batch in batchify(examples, batch_size):
            res = model.forward(batch.tokens, batch.mask)
            lengths = batch.mask.sum(axis=1).astype(int)
            for b, n in enumerate(lengths):
                traces.append([x.data[b, :n].copy() for x in res.trace])
                if res.gates is not None:
                    gates.append([g.data[b].copy() for g in res.gates])
    rw = model.residual_weights() if hasattr(model, "residual_weights") else []
    return TraceBundle(traces, gates or None, rw, tag or model.kind)


# -- summaries -----------------------------------------------------------------------

def summarize(values: np.ndarray) -> dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"mean": float(values.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "stddev": float(values.std())}


def _pair_distances(x: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(x.shape[0], k=1)
    diff = x[iu[0]] - x[iu[1]]
    return np.sqrt((diff * diff).sum(axis=1))


def activation_factor_ratios(traces: list[list[np.ndarray]], layer: int,
                             tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Ratios ||X_i^(l) - X_j^(l)|| / ||X_i^(0) - X_j^(0)|| over all samples and pairs i<j.

    Pairs whose layer-0 distance is below ``tol`` are dropped; their count is returned.
    """
    if layer < 1:
        raise ValueError("layer must be >= 1")
    ratios, excluded = [], 0
    for layers in traces:
        d0 = _pair_distances(layers[0])
        dl = _pair_distances(layers[layer])
        ok = d0 >= tol
        excluded += int((~ok).sum())
        ratios.append(dl[ok] / d0[ok])
    flat = np.concatenate(ratios) if ratios else np.empty(0)
    if flat.size == 0:
        raise DegenerateInputError("no token pair with nonzero layer-0 distance")
    return flat, excluded


def activation_factor(traces, layer: int) -> dict[str, float]:
    """Mean/median/quartiles of the layer-to-embedding pairwise distance ratio."""
    if isinstance(traces, TraceBundle):
        traces = traces.traces
    ratios, excluded = activation_factor_ratios(traces, layer)
    out = summarize(ratios)
    out["pairs"] = float(ratios.size)
    out["excluded"] = float(excluded)
    return out


def empirical_activation_bound(f: Callable[[np.ndarray], np.ndarray],
                               sampler: Callable[[np.random.Generator], np.ndarray],
                               trials: int = 1000, seed: int = 0,
                               pair: Callable | None = None) -> float:
    """Largest sampled ||f(x) - f(y)|| / ||x - y|| (a lower bound on the Lipschitz constant).

    ``sampler(rng)`` draws one input; pairs are independent draws unless
    ``pair(rng, x)`` is given to produce the partner of ``x``.
    """
    if trials < 1000:
        raise ValueError("trials must be >= 1000 for a meaningful bound")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(trials):
        x = sampler(rng)
        y = pair(rng, x) if pair is not None else sampler(rng)
        dx = np.linalg.norm(x - y)
        if dx == 0.0:
            continue
        best = max(best, float(np.linalg.norm(f(x) - f(y)) / dx))
    return best


# -- entropy ---------------------------------------------------------------------------------

@dataclass
class EntropyResult:
    value: float
    jittered: int
    degenerate: bool


def _kth_neighbor_distance(v: np.ndarray, k: int) -> np.ndarray:
    """Distance from each sorted value to its k-th nearest neighbour."""
    n = v.size
    offsets = np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])
    idx = np.arange(n)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    dist = np.where(valid, np.abs(v[np.clip(idx, 0, n - 1)] - v[:, None]), np.inf)
    dist.sort(axis=1)
    return dist[:, k - 1]


def kl_entropy_1d(values, k: int = 3, jitter: float = 1e-12) -> EntropyResult:
    """Kozachenko-Leonenko estimate of the differential entropy (nats) of 1-D samples.

    Repeated values are spread by ``jitter`` steps so every neighbour distance
    is positive; fewer than ``k + 1`` distinct values yield ``-inf``.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} samples, got {n}")
    if np.unique(v).size < k + 1:
        return EntropyResult(-math.inf, 0, True)
    dup = np.concatenate([[False], v[1:] == v[:-1]])
    n_dup = int(dup.sum())
    if n_dup:
        # j-th repeat within a run of equal values moves up by j * jitter
        run_start = np.maximum.accumulate(np.where(~dup, np.arange(n), 0))
        v = v + (np.arange(n) - run_start) * jitter
    eps = _kth_neighbor_distance(v, k)
    h = digamma(n) - digamma(k) + math.log(2.0) + float(np.log(eps).mean())
    return EntropyResult(float(h), n_dup, False)


def row_entropies(x_layer: np.ndarray, k: int = 3) -> np.ndarray:
    x_layer = np.asarray(x_layer, dtype=np.float64)
    if x_layer.ndim == 1:
        x_layer = x_layer[None, :]
    return np.array([kl_entropy_1d(row, k).value for row in x_layer])


def differential_entropy(x_layer: np.ndarray, k: int = 3) -> float:
    """Average over token rows of the 1-D k-NN entropy of that row's feature values."""
    x_layer = np.asarray(x_layer, dtype=np.float64)
    if x_layer.size < 50:
        raise ValueError(f"need at least 50 pooled values, got {x_layer.size}")
    return float(row_entropies(x_layer, k).mean())


def layer_entropies(bundle: TraceBundle, layer: int, k: int = 3) -> np.ndarray:
    """Per-sample entropy at one layer.

    Samples with a degenerate row give −inf; samples with fewer than 50 values
    give NaN (too small for the estimator) and are left out of every summary.
    """
    return np.array([differential_entropy(layers[layer], k) if layers[layer].size >= 50
                     else math.nan for layers in bundle.traces])


def mean_entropy(bundle: TraceBundle, layers: Sequence[int] | None = None, k: int = 3) -> float:
    """Mean of finite per-sample entropies over the chosen layers (default 1..L)."""
    layers = range(1, bundle.depth + 1) if layers is None else layers
    vals = np.concatenate([layer_entropies(bundle, l, k) for l in layers])
    vals = vals[~np.isnan(vals)]
    finite = vals[np.isfinite(vals)]
    return float(finite.mean()) if finite.size else -math.inf


# -- distances -------------------------------------------------------------------------------

def layer_distance_matrices(trace: list[np.ndarray], indices: Sequence[int]
                            ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Euclidean and cosine (1 - cos) distance matrices between selected tokens per layer.

    A zero-norm row has undefined cosine distance; those entries are NaN.
    """
    idx = np.asarray(indices, dtype=np.int64)
    n = trace[0].shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"token index out of range for sequence of length {n}")
    out = []
    for x in trace:
        sel = x[idx]
        diff = sel[:, None, :] - sel[None, :, :]
        euc = np.sqrt((diff * diff).sum(axis=-1))
        norms = np.linalg.norm(sel, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (sel @ sel.T) / np.outer(norms, norms)
        cosd = np.clip(1.0 - cos, 0.0, 2.0)
        zero = norms == 0
        cosd[zero, :] = np.nan
        cosd[:, zero] = np.nan
        np.fill_diagonal(euc, 0.0)
        diag = np.where(zero, np.nan, 0.0)
        cosd[np.arange(len(idx)), np.arange(len(idx))] = diag
        out.append((euc, cosd))
    return out


def write_distance_csvs(matrices, indices: Sequence[int], out_dir, prefix: str = "") -> list:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for l, (euc, cosd) in enumerate(matrices):
        for name, mat in (("euclidean", euc), ("cosine", cosd)):
            path = out_dir / f"{prefix}distance_{name}_layer{l}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["token"] + [str(i) for i in indices])
                for i, row in zip(indices, mat):
                    w.writerow([str(i)] + [repr(float(v)) for v in row])
            paths.append(path)
    return paths


# -- weight statistics --------------------------------------------------------------------------

RESIDUAL_WARN = 0.33


def weight_stats(model, bundle: TraceBundle | None = None) -> list[MetricsRecord]:
    """Residual weights per layer and, given gate traces, expert weight summaries."""
    tag = bundle.tag if bundle is not None else model.kind
    recs: list[MetricsRecord] = []
    if hasattr(model, "residual_weights"):
        for l, a in enumerate(model.residual_weights(), 1):
            recs.append(MetricsRecord(tag, l, "residual_weight", "value", a))
        for l, a in enumerate(model.ffn_residual_weights(), 1):
            recs.append(MetricsRecord(tag, l, "ffn_residual_weight", "value", a))
    if bundle is not None and bundle.gates:
        n_layers = len(bundle.gates[0])
        for l in range(n_layers):
            lam = np.array([g[l] for g in bundle.gates])
            recs.append(MetricsRecord(tag, l + 1, "gate_sum_max_error", "value",
                                      float(np.abs(lam.sum(axis=1) - 1.0).max())))
            for e in range(lam.shape[1]):
                for stat, v in summarize(lam[:, e]).items():
                    recs.append(MetricsRecord(tag, l + 1, f"expert_{e}_weight", stat, v))
    return recs


def residual_warnings(model) -> list[str]:
    msgs = []
    for l, a in enumerate(getattr(model, "residual_weights", lambda: [])(), 1):
        if a >= RESIDUAL_WARN:
            msgs.append(f"layer {l}: residual weight {a:.3f} >= {RESIDUAL_WARN}")
    return msgs


def analyze_bundle(bundle: TraceBundle) -> list[MetricsRecord]:
    """Activation factors and entropies for every layer of a trace bundle."""
    recs = []
    for l in range(bundle.depth + 1):
        ent = layer_entropies(bundle, l)
        finite = ent[np.isfinite(ent)]
        if finite.size:
            for stat, v in summarize(finite).items():
                recs.append(MetricsRecord(bundle.tag, l, "entropy", stat, v))
        else:
            recs.append(MetricsRecord(bundle.tag, l, "entropy", "mean", -math.inf))
        recs.append(MetricsRecord(bundle.tag, l, "entropy", "degenerate",
                                  float(np.isneginf(ent).sum())))
        recs.append(MetricsRecord(bundle.tag, l, "entropy", "skipped",
                                  float(np.isnan(ent).sum())))
        if l == 0:
            continue
        for stat, v in activation_factor(bundle.traces, l).items():
            recs.append(MetricsRecord(bundle.tag, l, "activation_factor", stat, v))
    return recs


CSV_HEADER = ["model", "layer", "metric", "statistic", "value"]


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.model, r.layer, r.metric, r.statistic, repr(float(r.value))])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["model"], int(r["layer"]), r["metric"], r["statistic"],
                          float(r["value"])) for r in rows]
