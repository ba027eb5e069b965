"""Command line entry point: ``rl-lab <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .envs import generate_random_mdp
from .mdp import NotErgodicError, Policy, TabularMdp, find_optimal_policy, mixing_coefficient, solve_values
from .politex import BACKENDS

log = logging.getLogger("rl_lab")


def _csv_list(kind):
    def parse(text: str):
        return [kind(v) for v in text.split(",") if v]
    return parse


def _load_policy(arg: str | None, mdp: TabularMdp) -> Policy:
    if arg in (None, "uniform"):
        return Policy.uniform(mdp.n_states, mdp.n_actions)
    if arg == "optimal":
        return find_optimal_policy(mdp)[0]
    data = json.loads(Path(arg).read_text())
    probs = data["probs"] if isinstance(data, dict) else data
    return Policy(np.asarray(probs, dtype=float))


def cmd_gen_mdp(args) -> int:
    mdp = generate_random_mdp(args.n_states, args.n_actions, args.mixing_floor, args.seed)
    text = mdp.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_solve(args) -> int:
    mdp = TabularMdp.load(args.mdp)
    policy = _load_policy(args.policy, mdp)
    sol = solve_values(mdp, policy)
    _, j_star = find_optimal_policy(mdp)
    out = {
        "gain": sol.gain,
        "optimal_gain": j_star,
        "mixing_coefficient": mixing_coefficient(mdp),
        "state_values": sol.state_values.tolist(),
        "action_values": sol.action_values.tolist(),
        "stationary_state": sol.stationary_state.tolist(),
    }
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _experiment(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.politex["seed"] = args.seed
    if args.backend is not None:
        cfg.politex["backend"] = args.backend
    if args.strict_invariants:
        cfg.strict = True
    return cfg


def cmd_run(args) -> int:
    cfg = _experiment(args)
    summary = harness.run_experiment(cfg, args.out, base_dir=Path(args.config).parent)
    for r in summary["runs"]:
        msg = r.get("error", f"final mean reward {r.get('final_mean_reward'):.4f}")
        print(f"run {r['run']} seed {r['seed']}: {r['status']} {msg}")
    return harness.exit_status(summary)


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    grid = {}
    if args.eta:
        grid["eta"] = args.eta
    if args.b:
        grid["b"] = args.b
    if args.backends:
        bad = [b for b in args.backends if b not in BACKENDS]
        if bad:
            raise harness.ConfigError(f"unknown backend(s) {bad}; choose from {BACKENDS}")
        grid["backend"] = args.backends
    if not grid:
        raise harness.ConfigError("sweep needs at least one of --eta, --b, --backends")
    summary = harness.run_sweep(cfg, grid, args.out, base_dir=Path(args.config).parent)
    for p in summary["points"]:
        print(p["dir"], "final reward", p["mean_final_reward"], "regret", p["mean_final_cum_regret"])
    return max((p["status"] for p in summary["points"]), default=0)


def cmd_check(args) -> int:
    from . import acceptance

    results = acceptance.run_criteria(args.criteria, seed=args.seed or 0)
    for r in results:
        print(r.line())
    report = {"criteria": [r.to_dict() for r in results], "passed": all(r.passed for r in results)}
    if args.out:
        out = Path(args.out)
        if out.is_dir():
            out = out / "acceptance.json"
        out.write_text(json.dumps(report, indent=2) + "\n")
    return 0 if report["passed"] else 1


def cmd_trace_to_csv(args) -> int:
    text = harness.trace_to_csv(Path(args.trace).read_text())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rl-lab", description="Politex experiments on average-reward MDPs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mdp", help="write a random MDP as JSON")
    g.add_argument("--n-states", type=int, required=True)
    g.add_argument("--n-actions", type=int, required=True)
    g.add_argument("--mixing-floor", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_mdp)

    s = sub.add_parser("solve", help="exact gain and values of a policy")
    s.add_argument("--mdp", required=True)
    s.add_argument("--policy", help="policy JSON file, 'uniform' (default) or 'optimal'")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_solve)

    for name, fn, help_ in (("run", cmd_run, "run an experiment config"),
                            ("sweep", cmd_sweep, "grid over eta / b / backend")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config", required=True)
        r.add_argument("--out", help="existing output directory (default: config 'output')")
        r.add_argument("--seed", type=int)
        r.add_argument("--backend", choices=BACKENDS)
        r.add_argument("--strict-invariants", action="store_true")
        r.set_defaults(fn=fn)
        if name == "sweep":
            r.add_argument("--eta", type=_csv_list(float))
            r.add_argument("--b", type=_csv_list(int))
            r.add_argument("--backends", type=_csv_list(str))

    c = sub.add_parser("check", help="run the acceptance suite")
    c.add_argument("--criteria", type=_csv_list(int), help="comma-separated criterion numbers (default all)")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", help="report path or directory")
    c.set_defaults(fn=cmd_check)

    t = sub.add_parser("trace-to-csv", help="convert a JSONL trace to CSV")
    t.add_argument("trace")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_trace_to_csv)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (harness.ConfigError, FileNotFoundError, KeyError, ValueError, NotErgodicError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
