"""Experiment orchestration: configs, environments, traces and summaries on disk."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import CartPoleEnv, TabularEnv, chain_mdp, generate_random_mdp
from .estimation import truncation_horizon
from .features import build_features
from .mdp import TabularMdp, mixing_coefficient
from .politex import InvariantViolation, PolitexConfig, RunResult, run

TRACE_KEYS = ("k", "mean_reward", "J_pi", "cum_regret", "policy_step_l1", "eta_bound", "est_error")

_num = {"type": "number"}
_nullable = {"type": ["number", "null"]}
TRACE_SCHEMA = {
    "type": "object",
    "required": list(TRACE_KEYS),
    "properties": {
        "k": {"type": "integer", "minimum": 1},
        "mean_reward": _num,
        "J_pi": _nullable,
        "cum_regret": _nullable,
        "pseudo_regret": _nullable,
        "policy_step_l1": {"type": "number", "minimum": 0},
        "eta_bound": {"type": "number", "minimum": 0},
        "step_bound_ok": {"type": "boolean"},
        "q_range": _num,
        "est_error": _nullable,
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "n_samples": {"type": "integer", "minimum": 0},
        "clamped": {"type": "integer", "minimum": 0},
    },
}

# bounds for normalising (x, x_dot, theta, theta_dot); theta is clamped well
# inside the failure angle so that the basis resolves the balanced region
CARTPOLE_FEATURES = {
    "kind": "block-fourier",
    "order": 6,
    "max_total_order": 6,
    "low": [-2.4, -3.0, -0.8, -3.5],
    "high": [2.4, 3.0, 0.8, 3.5],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    environment: dict
    politex: dict
    features: dict = field(default_factory=lambda: {"kind": "tabular-one-hot"})
    output: str = "runs/out"
    repeat: int = 1
    strict: bool = False

    def __post_init__(self):
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if "kind" not in self.environment:
            raise ConfigError("environment needs a 'kind'")

    def to_dict(self) -> dict:
        return {"environment": self.environment, "politex": self.politex, "features": self.features,
                "output": self.output, "repeat": self.repeat, "strict": self.strict}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"environment", "politex", "features", "output", "repeat", "strict"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def build_env(spec: dict, base_dir: Path | None = None):
    kind = spec["kind"]
    if kind == "random-mdp":
        return TabularEnv(generate_random_mdp(spec["n_states"], spec["n_actions"],
                                              spec["mixing_floor"], spec.get("seed", 0)))
    if kind == "chain":
        return TabularEnv(chain_mdp(spec["n_states"], spec.get("slip", 0.1), spec.get("mixing_floor", 0.01)))
    if kind == "mdp-file":
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return TabularEnv(TabularMdp.load(path), spec.get("start_state", 0))
    if kind == "cartpole":
        params = {k: v for k, v in spec.items() if k != "kind"}
        return CartPoleEnv(**params)
    raise ConfigError(f"unknown environment kind {kind!r}")


def resolve_politex(cfg: ExperimentConfig, env, seed: int) -> PolitexConfig:
    """PolitexConfig for one run; tabular runs without ``b`` get it from the mixing coefficient."""
    d = dict(cfg.politex)
    mdp = getattr(env, "mdp", None)
    if d.get("b", "auto") == "auto":
        if mdp is None:
            raise ConfigError("b = 'auto' needs a tabular environment")
        d["b"] = truncation_horizon(mixing_coefficient(mdp))
    d["seed"] = seed
    d["strict"] = bool(d.get("strict", False) or cfg.strict)
    try:
        return PolitexConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad politex config: {exc}") from exc


def build_features_for(cfg: ExperimentConfig, env):
    spec = cfg.features
    if spec.get("kind") == "cartpole-default":
        spec = CARTPOLE_FEATURES
    mdp = getattr(env, "mdp", None)
    return build_features(spec, None if mdp is None else mdp.n_states, env.n_actions)


def trace_lines(result: RunResult) -> str:
    return "".join(json.dumps(r.to_dict()) + "\n" for r in result.records)


def run_one(cfg: ExperimentConfig, index: int, base_dir: Path | None = None) -> tuple[dict, str | None]:
    """Run repeat ``index``; returns its summary entry and the trace text (None on failure)."""
    env = build_env(cfg.environment, base_dir)
    pc = resolve_politex(cfg, env, int(cfg.politex.get("seed", 0)) + index)
    features = build_features_for(cfg, env)
    entry = {"run": index, "seed": pc.seed, "b": pc.b}
    try:
        result = run(pc, env, features)
    except InvariantViolation as exc:
        entry.update(status="invariant-violation", error=str(exc))
        return entry, None
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        entry.update(status="error", error=str(exc))
        return entry, None
    recs = result.records
    entry.update(
        status="ok", eta=result.eta, optimal_gain=result.optimal_gain,
        final_cum_regret=result.final_regret, final_mean_reward=recs[-1].mean_reward,
        step_bound_violations=sum(not r.step_bound_ok for r in recs),
        max_policy_step=max(r.policy_step_l1 for r in recs),
    )
    return entry, trace_lines(result)


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("RL_LAB_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, min(n, n_jobs))


def _map(fn, args: list, workers: int):
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args)))


def _mean_std(values):
    v = [x for x in values if x is not None]
    if not v:
        return "", ""
    return repr(float(np.mean(v))), repr(float(np.std(v)))


def summary_csv(traces: list[list[dict]]) -> str:
    """Per-phase mean and std over runs of the mean reward, J_pi and cumulative regret."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("mean_reward", "J_pi", "cum_regret")
    w.writerow(["phase"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")] + ["n_runs"])
    n_phases = max((len(t) for t in traces), default=0)
    for i in range(n_phases):
        rows = [t[i] for t in traces if len(t) > i]
        out = [i + 1]
        for c in cols:
            out += _mean_std([r[c] for r in rows])
        w.writerow(out + [len(rows)])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, base_dir=None, workers: int | None = None) -> dict:
    """Execute ``cfg.repeat`` seeded runs and write traces, summary and acceptance report.

    Writes ``traces/run_XXX.jsonl``, ``summary.csv``, ``summary.json`` and
    ``acceptance.json`` under ``out_dir``, which must already exist.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    (out / "traces").mkdir(exist_ok=True)
    n = cfg.repeat
    workers = _workers(n) if workers is None else workers
    results = _map(run_one, [(cfg, i, base_dir) for i in range(n)], workers)

    traces = []
    for entry, text in results:
        path = out / "traces" / f"run_{entry['run']:03d}.jsonl"
        if text is not None:
            path.write_text(text)
            traces.append([json.loads(line) for line in text.splitlines()])
            entry["trace"] = str(path.relative_to(out))
    (out / "summary.csv").write_text(summary_csv(traces))

    runs = [e for e, _ in results]
    finals = [e["final_cum_regret"] for e in runs if e.get("final_cum_regret") is not None]
    summary = {
        "config": cfg.to_dict(),
        "runs": runs,
        "mean_final_cum_regret": float(np.mean(finals)) if finals else None,
        "mean_final_reward": (float(np.mean([e["final_mean_reward"] for e in runs if e["status"] == "ok"]))
                              if any(e["status"] == "ok" for e in runs) else None),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    checks = [
        {"name": "runs_completed", "passed": all(e["status"] == "ok" for e in runs),
         "failures": [e for e in runs if e["status"] != "ok"]},
        {"name": "policy_step_bound", "passed": all(e.get("step_bound_violations", 0) == 0 for e in runs),
         "violations": sum(e.get("step_bound_violations", 0) for e in runs)},
    ]
    report = {"strict": cfg.strict or bool(cfg.politex.get("strict")), "checks": checks,
              "passed": all(c["passed"] for c in checks)}
    (out / "acceptance.json").write_text(json.dumps(report, indent=2) + "\n")
    summary["acceptance"] = report
    return summary


def exit_status(summary: dict) -> int:
    """Nonzero when a run failed, or when strict checks are on and any check failed."""
    report = summary["acceptance"]
    if not report["checks"][0]["passed"]:
        return 1
    if report["strict"] and not report["passed"]:
        return 1
    return 0


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def sweep_points(grid: dict) -> list[dict]:
    """Cartesian product of ``{"eta": [...], "b": [...], "backend": [...]}``."""
    bad = set(grid) - {"eta", "b", "backend"}
    if bad:
        raise ConfigError(f"sweep only varies eta, b and backend, not {sorted(bad)}")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _sweep_point(cfg: ExperimentConfig, point: dict, out: Path, base_dir) -> dict:
    c = copy.deepcopy(cfg)
    c.politex.update(point)
    sub = out / "_".join(f"{k}={_fmt(v)}" for k, v in sorted(point.items()))
    sub.mkdir(exist_ok=True)
    s = run_experiment(c, sub, base_dir, workers=1)
    return {"point": point, "dir": sub.name, "mean_final_cum_regret": s["mean_final_cum_regret"],
            "mean_final_reward": s["mean_final_reward"], "passed": s["acceptance"]["passed"],
            "status": exit_status(s)}


def run_sweep(cfg: ExperimentConfig, grid: dict, out_dir=None, base_dir=None) -> dict:
    out = Path(out_dir if out_dir is not None else cfg.output)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    points = sweep_points(grid)
    rows = _map(_sweep_point, [(cfg, p, out, base_dir) for p in points], _workers(len(points)))
    summary = {"config": cfg.to_dict(), "grid": grid, "points": rows}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def trace_to_csv(jsonl_text: str) -> str:
    rows = [json.loads(line) for line in jsonl_text.splitlines() if line.strip()]
    if not rows:
        return ""
    cols = list(TRACE_KEYS) + [c for c in rows[0] if c not in TRACE_KEYS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: "" if r.get(c) is None else r.get(c) for c in cols})
    return buf.getvalue()


def cartpole_config(n_phases: int = 20, eta: float = 0.05, b: int = 100, seed: int = 0,
                    repeat: int = 1, output: str = "runs/cartpole", alpha: float = 300.0) -> ExperimentConfig:
    """The cart-pole recipe: tau = 10^4, block-Fourier features, replay backend.

    eta is far below the usual 5..160 grid. b-step action-value gaps are of
    order 10 here, and with a large eta the policy turns near-deterministic
    within a phase or two. Actions that then get no fresh data keep the
    values fitted in older, lower-gain phases, which are centred at a lower
    gain and so look better than the greedy action's fresh values. The
    policy then switches to them and usually locks into a poor controller.
    The strong ridge (alpha = 300 rather than sqrt(tau/K)) damps the same
    effect while the policy is still soft.
    """
    return ExperimentConfig(
        environment={"kind": "cartpole"},
        politex={"tau": 10_000, "n_phases": n_phases, "eta": eta, "b": b, "alpha": alpha, "backend": "replay-full",
                 "capacity": 2_000_000, "seed": seed},
        features=dict(CARTPOLE_FEATURES), output=output, repeat=repeat,
    )
