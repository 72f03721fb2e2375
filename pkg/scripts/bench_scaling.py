"""Forward-time scaling of TransJect against the vanilla baseline.

    python3 scripts/bench_scaling.py [--layers 2] [--d 64] [--lengths 256,512,1024,2048]
                                     [--repeats 20] [--out bench.csv]
"""

import argparse

from transject.harness import bench_models, benchmark_inference, write_bench_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--lengths", default="256,512,1024,2048")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    lengths = [int(n) for n in args.lengths.split(",")]
    tj, van = bench_models(args.layers, args.d, lengths)
    rows = benchmark_inference({"transject": tj, "vanilla": van}, lengths, args.repeats)
    by = {(r.model, r.length): r.median_seconds for r in rows}
    print(f"{'N':>6s} {'TJ ms':>9s} {'vanilla ms':>11s} {'speedup':>8s} {'TJ ratio':>9s} {'van ratio':>10s}")
    for i, n in enumerate(lengths):
        t, v = by[("transject", n)], by[("vanilla", n)]
        rt = rv = ""
        if i:
            p = lengths[i - 1]
            rt = f"{t / by[('transject', p)]:.2f}"
            rv = f"{v / by[('vanilla', p)]:.2f}"
        print(f"{n:6d} {t * 1e3:9.2f} {v * 1e3:11.2f} {v / t:8.2f} {rt:>9s} {rv:>10s}")
    if args.out:
        write_bench_csv(rows, args.out)


if __name__ == "__main__":
    main()
