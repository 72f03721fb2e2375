"""Rank and linear correlation between per-layer activation factor and entropy.

    python3 scripts/correlate.py RUN_DIR [RUN_DIR ...]

Reads ``analysis/metrics.csv`` from each run directory and pairs the mean
activation factor of every layer >= 1 with that layer's mean entropy.
"""

import argparse
import math
from pathlib import Path

from scipy import stats

from transject.analysis import read_metrics_csv


def layer_pairs(run_dir: Path):
    recs = read_metrics_csv(run_dir / "analysis" / "metrics.csv")
    af = {r.layer: r.value for r in recs if r.metric == "activation_factor" and r.statistic == "mean"}
    ent = {r.layer: r.value for r in recs if r.metric == "entropy" and r.statistic == "mean"}
    return [(af[l], ent[l]) for l in sorted(af) if l in ent and math.isfinite(ent[l])]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", type=Path)
    args = ap.parse_args()
    pooled = []
    for run in args.runs:
        pairs = layer_pairs(run)
        pooled += pairs
        print(f"{run}: " + ", ".join(f"({a:.3f}, {e:.3f})" for a, e in pairs))
    if len(pooled) < 3:
        raise SystemExit("need at least three layers with finite entropy")
    af, ent = zip(*pooled)
    rho, p_rho = stats.spearmanr(af, ent)
    r, p_r = stats.pearsonr(af, ent)
    print(f"spearman {rho:.3f} (p={p_rho:.3g})  pearson {r:.3f} (p={p_r:.3g})  n={len(pooled)}")


if __name__ == "__main__":
    main()
