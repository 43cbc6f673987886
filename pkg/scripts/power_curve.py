"""Estimated power of the Kruskal-Wallis test against per-group sample size."""

import argparse

import numpy as np

from mlaudit.stats_engine import estimate_power


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shift", type=float, default=0.1, help="mean shift of the second group, in sd units")
    ap.add_argument("--groups", type=int, default=2)
    ap.add_argument("--pool", type=int, default=2000, help="observed values per group")
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 500, 1000])
    ap.add_argument("--sims", type=int, default=1000)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    groups = [rng.normal(0.0, 1.0, args.pool) for _ in range(args.groups - 1)]
    groups.append(rng.normal(args.shift, 1.0, args.pool))
    print("n_per_group,power")
    for n in args.sizes:
        print(f"{n},{estimate_power(groups, n, args.sims, args.alpha, args.seed):.3f}")


if __name__ == "__main__":
    main()
