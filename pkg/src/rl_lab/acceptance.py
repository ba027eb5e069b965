"""Acceptance criteria as runnable checks.

Each ``criterion_N`` returns a :class:`CriterionResult`; ``run_criteria`` runs
a selection. ``tests/test_acceptance.py`` and ``rl-lab check`` share them.
"""

from __future__ import annotations

import contextlib
import io
import itertools
import json
import tempfile
import time
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from . import harness
from .envs import generate_random_mdp
from .estimation import PhaseDataset, b_step_returns, block_schedule, empirical_gain, lsmc_fit, truncation_horizon
from .features import OneHotFeatures
from .mdp import (Policy, ergodicity_coefficient, mixing_coefficient, performance_difference,
                  policy_transition, simulate_chains, solve_values, stationary_distribution)
from .politex import PolitexConfig, _Estimator, softmax_policy
from .replay import (PhaseSamples, block_loss, coreset_probabilities, coreset_subsample,
                     importance_estimate_variance, uniform_estimate_variance, uniform_subsample)

# tabular benchmark shared by criteria 3, 5, 8 and 10
BENCH_MDP = dict(n_states=5, n_actions=3, mixing_floor=0.05, seed=0)
BENCH_TAU = 500
BENCH_Q_MAX = 1.0
REGRET_PHASES = (16, 33, 66, 131)  # K * 500 ~ 2^13 .. 2^16


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    summary: str
    seconds: float = 0.0
    budget: float | None = None
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        budget = f" (budget {self.budget:g}s)" if self.budget else ""
        return f"[{tag}] criterion {self.number} {self.name}: {self.summary} [{self.seconds:.1f}s{budget}]"

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(number: int, name: str, budget: float | None = None):
    def wrap(fn):
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            passed, summary, details = fn(*args, **kwargs)
            dt = time.perf_counter() - t0
            ok = passed and (budget is None or dt < budget)
            if passed and not ok:
                summary += f"; over the {budget:g}s budget"
            return CriterionResult(number, name, bool(ok), summary, dt, budget, details)
        inner.number = number
        return inner
    return wrap


def _random_policy(rng, S, A) -> Policy:
    return Policy(rng.dirichlet(np.ones(A), size=S))


def bench_mdp():
    return generate_random_mdp(**BENCH_MDP)


@_timed(1, "performance-difference identity", budget=10)
def criterion_1(seed: int = 0, n_mdps: int = 100, tol: float = 1e-8):
    rng = np.random.default_rng(seed)
    gaps = []
    for i in range(n_mdps):
        S, A = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        mdp = generate_random_mdp(S, A, float(rng.uniform(0.01, 1.0 / S)), int(rng.integers(2**31)))
        lhs, rhs = performance_difference(mdp, _random_policy(rng, S, A), _random_policy(rng, S, A))
        gaps.append(abs(lhs - rhs))
    worst = max(gaps)
    return worst <= tol, f"max |lhs - rhs| = {worst:.2e} over {n_mdps} MDPs (tol {tol:g})", {"max_gap": worst}


def _random_stochastic(rng, n) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        H = rng.dirichlet(np.ones(n), size=n)
    elif kind == 1:  # sparse rows
        H = rng.dirichlet(np.full(n, 0.2), size=n)
    else:  # near-deterministic with a little mass spread
        H = np.eye(n)[rng.integers(n, size=n)] * 0.9 + 0.1 * rng.dirichlet(np.ones(n), size=n)
    return H / H.sum(axis=1, keepdims=True)


@_timed(2, "contraction", budget=10)
def criterion_2(seed: int = 0, n_cases: int = 1000, slack: float = 1e-12):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n_cases):
        n = int(rng.integers(2, 9))
        H = _random_stochastic(rng, n)
        v1, v2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        m = int(rng.choice([1, 2, 5]))
        lhs = np.abs(np.linalg.matrix_power(H, m).T @ (v1 - v2)).sum()
        rhs = ergodicity_coefficient(H) ** m * np.abs(v1 - v2).sum()
        worst = max(worst, lhs - rhs)
    return worst <= slack, f"max(lhs - rhs) = {worst:.2e} over {n_cases} cases (slack {slack:g})", {"worst": worst}


def bench_config(K: int, seed: int, backend: str = "weight-averaging", strict: bool = False) -> PolitexConfig:
    b = truncation_horizon(mixing_coefficient(bench_mdp()))
    return PolitexConfig(tau=BENCH_TAU, n_phases=K, eta="auto", q_max=BENCH_Q_MAX, b=b,
                         backend=backend, seed=seed, strict=strict)


def bench_run(K: int, seed: int, backend: str = "weight-averaging", strict: bool = False):
    from .envs import TabularEnv
    from .politex import run

    mdp = bench_mdp()
    return run(bench_config(K, seed, backend, strict), TabularEnv(mdp), OneHotFeatures(mdp.n_states, mdp.n_actions))


@_timed(3, "mirror-descent step bound")
def criterion_3(seed: int = 0):
    # strict runs raise InvariantViolation at the first state that breaks the bound
    n_ok, n_phases = 0, 0
    for backend in ("weight-averaging", "replay-full"):
        res = bench_run(64, seed, backend, strict=True)
        n_ok += sum(r.step_bound_ok for r in res.records)
        n_phases += len(res.records)
    return n_ok == n_phases, f"{n_ok}/{n_phases} phases satisfy the bound at every state (slack 1e-10)", {}


def estimation_errors(seed: int, phases=(4, 16, 64, 256), m: int = 4000, floor: float = 0.15):
    """Errors of averaged one-hot ridge fits against the exact mean Q, for one seed.

    A fixed sequence of random policies is simulated phase by phase (each
    phase starting from the previous policy's stationary law); estimates use
    the odd blocks of the block schedule and ``alpha = sqrt(tau / K)``.
    """
    mdp = generate_random_mdp(5, 3, floor, seed=0)
    F = OneHotFeatures(5, 3)
    b = truncation_horizon(mixing_coefficient(mdp))
    tau = 2 * m * b
    K_max = max(phases)
    rng = np.random.default_rng(1000 + seed)
    pols = 0.5 / 3 + 0.5 * rng.dirichlet(np.ones(3), size=(K_max, 5))
    exact = np.array([F.weights_from_table(solve_values(mdp, Policy(p)).action_values) for p in pols])
    mus = [stationary_distribution(policy_transition(mdp, Policy(p))[0]) for p in pols]
    starts = [rng.choice(5, p=mus[i - 1] if i else mus[0]) for i in range(K_max)]
    S, A = simulate_chains(mdp, pols, tau, starts, rng)
    sched = block_schedule(tau, b, m)
    fits = []
    for i in range(K_max):
        d = PhaseDataset(i + 1, S[i], A[i], mdp.rewards[S[i], A[i]])
        t, R = b_step_returns(d, b, empirical_gain(d, sched), starts=sched.odd_starts)
        fits.append((F.featurize_batch(d.states[t], d.actions[t]), R))
    errs = []
    for K in phases:
        alpha = np.sqrt(tau / K)
        w = np.mean([lsmc_fit(phi, R, alpha).w for phi, R in fits[:K]], axis=0)
        errs.append(float(np.linalg.norm(w - exact[:K].mean(axis=0))))
    return np.array(errs)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@_timed(4, "estimation-error scaling", budget=120)
def criterion_4(seed: int = 0, n_seeds: int = 10, threshold: float = -0.35):
    Ks = (4, 16, 64, 256)
    errs = np.array([estimation_errors(seed + i, Ks) for i in range(n_seeds)])
    slopes = [loglog_slope(Ks, e) for e in errs]
    med_slope = float(np.median(slopes))
    slope_of_median = loglog_slope(Ks, np.median(errs, axis=0))
    ok = med_slope <= threshold and slope_of_median <= threshold
    return ok, (f"median per-seed slope {med_slope:.3f}, slope of median error {slope_of_median:.3f} "
                f"(<= {threshold}, theory -0.5)"), {"slopes": slopes, "median_errors": np.median(errs, 0).tolist()}


@_timed(5, "regret sublinearity", budget=300)
def criterion_5(seed: int = 0, n_seeds: int = 10, threshold: float = 0.75):
    T, R = [], []
    for K in REGRET_PHASES:
        regrets = [bench_run(K, seed + i).final_regret for i in range(n_seeds)]
        T.append(K * BENCH_TAU)
        R.append(float(np.mean(regrets)))
    positive = all(r > 0 for r in R)
    slope = loglog_slope(T, R) if positive else float("nan")
    ok = positive and slope <= threshold
    return ok, f"slope of log R_T vs log T = {slope:.3f} (<= {threshold}); R_T = {np.round(R, 1).tolist()}", \
        {"T": T, "R": R, "slope": slope}


class _FixedChoice:
    """Stands in for a Generator: ``choice`` returns a preset index tuple."""

    def __init__(self, idx):
        self.idx = np.asarray(idx, dtype=np.int64)

    def choice(self, n, size=None, replace=True, p=None):
        return self.idx.copy()


def exact_subsample_expectations(block: PhaseSamples, w_eval, w_ref, s: int):
    """Exact ``E[block_loss]`` under uniform and coreset subsampling, by enumerating draws."""
    n = len(block)
    e_uni = 0.0
    for idx in itertools.combinations(range(n), s):
        e_uni += block_loss(w_eval, uniform_subsample(block, s, _FixedChoice(idx))) / comb(n, s)
    q = coreset_probabilities(block, w_ref)
    e_core = 0.0
    for idx in itertools.product(range(n), repeat=s):
        p = float(np.prod(q[list(idx)]))
        if p > 0:
            e_core += p * block_loss(w_eval, coreset_subsample(block, s, w_ref, _FixedChoice(idx)))
    return e_uni, e_core


def random_phase(rng, n: int, d: int = 3) -> PhaseSamples:
    return PhaseSamples.full(int(rng.integers(1, 50)), rng.normal(size=(n, d)), rng.normal(size=n))


@_timed(6, "unbiased subsampled loss")
def criterion_6(seed: int = 0, n_phases: int = 200, tol: float = 1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_phases):
        n = int(rng.integers(2, 5))
        block = random_phase(rng, n)
        w_eval, w_ref = rng.normal(size=3), rng.normal(size=3)
        full = block_loss(w_eval, block)
        for s in (1, 2):
            e_uni, e_core = exact_subsample_expectations(block, w_eval, w_ref, s)
            worst = max(worst, abs(e_uni - full), abs(e_core - full))
    return worst <= tol, f"max |E[loss estimate] - loss| = {worst:.2e} (tol {tol:g})", {"worst": worst}


def mc_estimates(y, q, s: int, draws: int, rng):
    """Monte-Carlo draws of the uniform and importance estimates of ``mean(y)``."""
    n = len(y)
    keys = rng.random((draws, n))
    uni_idx = np.argsort(keys, axis=1)[:, :s]
    uni = y[uni_idx].mean(axis=1)
    core_idx = rng.choice(n, size=(draws, s), p=q)
    core = (y[core_idx] / (s * q[core_idx])).sum(axis=1) / n
    return uni, core


@_timed(7, "coreset variance reduction")
def criterion_7(seed: int = 0, n_phases: int = 50, draws: int = 10_000):
    rng = np.random.default_rng(seed)
    closed_ok, ratios = True, []
    for _ in range(n_phases):
        n = int(rng.integers(4, 13))
        block = random_phase(rng, n)
        w = rng.normal(size=3)
        y = (block.phi @ w - block.returns) ** 2
        if np.ptp(y) == 0:
            continue
        s = int(rng.integers(1, n))
        q = coreset_probabilities(block, w)
        v_core = importance_estimate_variance(y, q, s)
        v_uni = uniform_estimate_variance(y, s)
        closed_ok &= v_core <= v_uni
        uni, core = mc_estimates(y, q, s, draws, rng)
        ratios.append(core.var() / uni.var())
    med, mx = float(np.median(ratios)), float(max(ratios))
    ok = closed_ok and med < 1 and mx <= 1.05
    return ok, (f"closed form coreset <= uniform: {closed_ok}; MC variance ratio median {med:.3g}, "
                f"max {mx:.3g} over {len(ratios)} phases"), {"ratios": ratios}


def balanced_phases(rng, k: int, S: int = 4, A: int = 3, per_pair: int = 5):
    """``k`` synthetic phases with identical per-(x, a) counts and random returns."""
    pairs = np.array([(x, a) for x in range(S) for a in range(A)] * per_pair)
    F = OneHotFeatures(S, A)
    out = []
    for _ in range(k):
        order = rng.permutation(len(pairs))
        phi = F.featurize_batch(pairs[order, 0], pairs[order, 1])
        out.append((phi, rng.normal(size=len(pairs)) * 3))
    return F, out


def balanced_policy_gap(seed: int, k: int = 6, eta: float = 0.7) -> float:
    rng = np.random.default_rng(seed)
    F, phases = balanced_phases(rng, k)
    tau = len(phases[0][1])
    est = {b: _Estimator(PolitexConfig(tau=tau + 1, n_phases=k, backend=b), F.dim)
           for b in ("weight-averaging", "replay-full")}
    gap = 0.0
    for i, (phi, R) in enumerate(phases, start=1):
        pols = [softmax_policy(F.q_table(e.update(i, phi, R, rng)), eta * i).probs for e in est.values()]
        gap = max(gap, float(np.abs(pols[0] - pols[1]).max()))
    return gap


@_timed(8, "backend agreement")
def criterion_8(seed: int = 0, n_seeds: int = 20, K: int = 64):
    finals = {b: [bench_run(K, seed + i, b).records[-1].mean_reward for i in range(n_seeds)]
              for b in ("weight-averaging", "replay-full")}
    a, b = (float(np.mean(v)) for v in finals.values())
    rel = abs(a - b) / max(abs(a), abs(b))
    gap = max(balanced_policy_gap(seed + i) for i in range(10))
    ok = rel <= 0.10 and gap <= 1e-8
    return ok, (f"final-phase mean reward {a:.4f} vs {b:.4f} (rel diff {rel:.3%} <= 10%); "
                f"balanced-count policy gap {gap:.1e} (<= 1e-8)"), {"finals": finals, "rel": rel, "gap": gap}


def cartpole_ratio(seed: int, n_phases: int = 20) -> tuple[float, list[float]]:
    cfg = harness.cartpole_config(n_phases=n_phases, seed=seed)
    env = harness.build_env(cfg.environment)
    pc = harness.resolve_politex(cfg, env, seed)
    from .politex import run

    res = run(pc, env, harness.build_features_for(cfg, env))
    rewards = [r.mean_reward for r in res.records]
    return float(np.mean(rewards[-3:]) / rewards[0]), rewards


@_timed(9, "cart-pole learning", budget=900)
def criterion_9(seed: int = 0, n_seeds: int = 20, factor: float = 3.0, needed: int = 15):
    ratios, curves = [], []
    for i in range(n_seeds):
        r, curve = cartpole_ratio(seed + i)
        ratios.append(r)
        curves.append(curve)
    wins = sum(r >= factor for r in ratios)
    return wins >= needed, (f"{wins}/{n_seeds} seeds reach last-3 / phase-1 reward >= {factor:g} "
                            f"(need {needed}); median ratio {np.median(ratios):.2f}"), \
        {"ratios": ratios, "curves": curves}


def determinism_configs() -> list[dict]:
    tab = {"environment": {"kind": "random-mdp", **BENCH_MDP},
           "politex": {"tau": 300, "n_phases": 6, "eta": "auto", "backend": "replay-coreset",
                       "subsample": 50, "capacity": 600, "seed": 3},
           "features": {"kind": "tabular-one-hot"}, "repeat": 2}
    cp = harness.cartpole_config(n_phases=3, seed=5).to_dict()
    cp["politex"]["tau"] = 1500
    cp["repeat"] = 1
    return [tab, cp]


@_timed(10, "determinism")
def criterion_10(seed: int = 0):
    from .cli import main

    identical, n_files = True, 0
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for j, cfg in enumerate(determinism_configs()):
            path = tmp / f"cfg{j}.json"
            path.write_text(json.dumps(cfg))
            outs = []
            for rep in range(2):
                out = tmp / f"out{j}_{rep}"
                out.mkdir()
                with contextlib.redirect_stdout(io.StringIO()):
                    status = main(["run", "--config", str(path), "--out", str(out), "--seed", str(seed + j)])
                if status != 0:
                    return False, f"run failed for config {j}", {}
                outs.append(out)
            for trace in sorted((outs[0] / "traces").glob("*.jsonl")):
                n_files += 1
                identical &= trace.read_bytes() == (outs[1] / "traces" / trace.name).read_bytes()
    return identical and n_files > 0, f"{n_files} trace files compared, byte-identical: {identical}", {}


CRITERIA = {f.number: f for f in (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
                                  criterion_6, criterion_7, criterion_8, criterion_9, criterion_10)}


def run_criteria(numbers=None, seed: int = 0) -> list[CriterionResult]:
    numbers = sorted(CRITERIA) if not numbers else numbers
    unknown = [n for n in numbers if n not in CRITERIA]
    if unknown:
        raise ValueError(f"unknown criteria {unknown}; choose from {sorted(CRITERIA)}")
    return [CRITERIA[n](seed=seed) for n in numbers]
