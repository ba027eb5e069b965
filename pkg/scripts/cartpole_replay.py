"""Cart-pole with block-Fourier features and the full replay backend.

Writes traces and summaries through the harness; prints the per-phase mean
reward and the last-3 / first-phase ratio of every seed.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from rl_lab import harness


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--phases", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=300.0)
    p.add_argument("--b", type=int, default=100)
    p.add_argument("--backend", default="replay-full")
    p.add_argument("--out", default="runs/cartpole")
    args = p.parse_args()

    cfg = harness.cartpole_config(args.phases, args.eta, args.b, seed=0, repeat=args.seeds,
                                  output=args.out, alpha=args.alpha)
    cfg.politex["backend"] = args.backend
    if args.backend in ("replay-uniform", "replay-coreset"):
        cfg.politex["subsample"] = 2000
    Path(args.out).mkdir(parents=True, exist_ok=True)
    summary = harness.run_experiment(cfg, args.out)
    for run in summary["runs"]:
        if run["status"] != "ok":
            print(run["run"], run["status"], run["error"])
            continue
        trace = [json.loads(line) for line in (Path(args.out) / run["trace"]).read_text().splitlines()]
        rewards = [r["mean_reward"] for r in trace]
        ratio = np.mean(rewards[-3:]) / rewards[0]
        print(f"seed {run['seed']}: {np.round(rewards, 2).tolist()} ratio {ratio:.2f}")


if __name__ == "__main__":
    main()
