"""Fusion-weight sweep on the synthetic benchmark; writes a CSV and a plot.

    python3 scripts/alpha_sweep.py --out runs/alpha --cache runs/cache
"""

import argparse
import logging

from sqpf.ablation import DEFAULT_ALPHA_GRID, RunCache, ablate
from sqpf.benchmark import BENCH_SYNTH, bench_config, synthetic_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in DEFAULT_ALPHA_GRID))
    p.add_argument("--folds", default=None, help="comma-separated; default all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default="runs/alpha")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    table = ablate(
        synthetic_dataset(BENCH_SYNTH),
        bench_config(seed=args.seed),
        modes=(),
        alpha_grid=[float(a) for a in args.alphas.split(",")],
        folds=folds,
        cache=RunCache(args.cache),
        out_dir=args.out,
    )
    print(table.sweep_csv(), end="")


if __name__ == "__main__":
    main()
