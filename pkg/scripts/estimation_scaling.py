"""Error of averaged one-hot fits against the exact mean Q as the number of phases grows."""

import argparse
import json

import numpy as np

from rl_lab.acceptance import estimation_errors, loglog_slope


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--phases", type=int, nargs="+", default=[4, 16, 64, 256])
    p.add_argument("--m", type=int, default=4000, help="blocks per phase")
    p.add_argument("--out")
    args = p.parse_args()

    errs = np.array([estimation_errors(s, tuple(args.phases), m=args.m) for s in range(args.seeds)])
    med = np.median(errs, axis=0)
    for K, e in zip(args.phases, med):
        print(f"K={K:4d} median error {e:.4f}")
    slopes = [loglog_slope(args.phases, e) for e in errs]
    print(f"slope of median {loglog_slope(args.phases, med):.3f}, median per-seed slope {np.median(slopes):.3f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"phases": args.phases, "errors": errs.tolist(), "slopes": slopes}, f, indent=2)


if __name__ == "__main__":
    main()
