"""Any-finding rate of the spurious-correlation miner on null score tables.

Every concept is tested once, so with a Bonferroni family of m concepts the
expected rate is 1 - (1 - alpha/m)**m, just under alpha.
"""

import argparse

from mlaudit.stats_engine import mine_spurious
from mlaudit.trace_synth import DisparityPlan, draw_scores


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--concepts", type=int, default=50)
    ap.add_argument("--n-per-group", type=int, default=300)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--alpha", type=float, default=0.05)
    args = ap.parse_args()

    concepts = tuple(f"c{i:02d}" for i in range(args.concepts))
    hits = []
    for seed in range(args.start, args.start + args.seeds):
        plan = DisparityPlan(concepts=concepts, n_per_group=args.n_per_group, seed=seed)
        found = [f for f in mine_spurious(draw_scores(plan).table(plan.group_labels, concepts), alpha=args.alpha)
                 if f.reject]
        if found:
            hits.append(seed)
            print(f"seed {seed}: " + ", ".join(f"{f.concept}/{f.top_group} p={f.p_value:.2g}" for f in found))
    m = args.concepts
    expected = 1 - (1 - args.alpha / m) ** m
    print(f"any-finding rate {len(hits)}/{args.seeds} = {len(hits) / args.seeds:.3f}  (expected {expected:.4f})")


if __name__ == "__main__":
    main()
