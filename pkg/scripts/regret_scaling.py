"""Cumulative regret against horizon on the 5-state benchmark MDP.

Prints mean R_T per horizon and the log-log slope; optionally writes JSON.
"""

import argparse
import json

import numpy as np

from rl_lab.acceptance import BENCH_TAU, REGRET_PHASES, bench_run, loglog_slope


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--phases", type=int, nargs="+", default=list(REGRET_PHASES))
    p.add_argument("--backend", default="weight-averaging")
    p.add_argument("--out")
    args = p.parse_args()

    rows = []
    for K in args.phases:
        regrets = [bench_run(K, s, args.backend).final_regret for s in range(args.seeds)]
        rows.append({"K": K, "T": K * BENCH_TAU, "mean_regret": float(np.mean(regrets)),
                     "std_regret": float(np.std(regrets))})
        print(f"K={K:4d} T={K * BENCH_TAU:6d} R_T={rows[-1]['mean_regret']:9.2f} +- {rows[-1]['std_regret']:.2f}")
    slope = loglog_slope([r["T"] for r in rows], [r["mean_regret"] for r in rows])
    print(f"slope {slope:.3f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"rows": rows, "slope": slope, "backend": args.backend}, f, indent=2)


if __name__ == "__main__":
    main()
