"""Train the desk-scale ListOps pair (TransJect and vanilla) and compare their diagnostics.

    python3 scripts/desk_listops.py [--out runs/desk] [--experts4]

Prints test accuracy, the final-layer median activation factor and the mean
layer entropy of both models; the run directories keep the full CSV output.
"""

import argparse
import logging
from pathlib import Path

from transject import analysis
from transject.config import load_config
from transject.harness import load_splits, train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--experts4", action="store_true", help="also train the E=4 TransJect")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    names = ["listops_transject", "listops_vanilla"] + (["listops_transject_e4"] * args.experts4)
    splits, rows = None, []
    for name in names:
        cfg = load_config(CONFIGS / f"{name}.ini")
        cfg.output.run_dir = str(Path(args.out) / name)
        splits = splits or load_splits(cfg)
        run = train(cfg, splits)
        bundle = analysis.collect_traces(run.model, splits.test[:256])
        depth = bundle.depth
        rows.append((name, run.last("test")["accuracy"], run.majority,
                     analysis.activation_factor(bundle, depth)["median"],
                     analysis.mean_entropy(bundle)))
    print(f"\n{'run':24s} {'test acc':>9s} {'majority':>9s} {'AF median':>10s} {'entropy':>9s}")
    for name, acc, maj, af, ent in rows:
        print(f"{name:24s} {acc:9.3f} {maj:9.3f} {af:10.3f} {ent:9.3f}")


if __name__ == "__main__":
    main()
