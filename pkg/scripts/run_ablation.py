"""Module ablation on the synthetic benchmark (cross-validated over folds).

    python3 scripts/run_ablation.py --out runs/ablation --folds 0,1,2,3,4
"""

import argparse
import logging

from sqpf.ablation import RunCache, ablate
from sqpf.benchmark import BENCH_SYNTH, bench_config, synthetic_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--modes", default="SSP,MSP,MSP+QP")
    p.add_argument("--folds", default=None, help="comma-separated; default all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default=None, help="directory of cached fold reports")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    table = ablate(
        synthetic_dataset(BENCH_SYNTH),
        bench_config(seed=args.seed),
        modes=args.modes.split(","),
        folds=folds,
        cache=RunCache(args.cache),
        out_dir=args.out,
    )
    print(table.table_csv(), end="")


if __name__ == "__main__":
    main()
