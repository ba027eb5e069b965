"""Politex: phased policy iteration with mirror-descent (softmax) policy updates.

In phase ``k`` the current policy is executed for ``tau`` steps, an estimate
``Qhat_k`` of the average Q-function ``(1/k) sum_{i<=k} Q_{pi_i}`` is formed,
and the next policy is ``pi_{k+1}(a|x) ∝ exp(eta * k * Qhat_k(x, a))``.
With linear features everything is carried by weight vectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimation import (PhaseDataset, b_step_returns, block_schedule, empirical_gain,
                         lsmc_fit)
from .features import BlockFeatures, OneHotFeatures
from .mdp import Policy, TabularMdp, find_optimal_policy, solve_values
from .replay import (PhaseSamples, ReplayBuffer, coreset_subsample, evict, fit_average_q,
                     uniform_subsample)

BACKENDS = ("weight-averaging", "replay-full", "replay-uniform", "replay-coreset")
STEP_BOUND_SLACK = 1e-10


class InvariantViolation(AssertionError):
    pass


@dataclass
class PolitexConfig:
    tau: int
    n_phases: int
    eta: float | str = "auto"
    q_max: float | None = None
    b: int = 10
    m: int | None = None
    alpha: float | None = None
    backend: str = "weight-averaging"
    subsample: int | None = None
    capacity: int | None = None
    weight_clip: float | None = None
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if self.tau < 1 or self.n_phases < 1:
            raise ValueError("tau and n_phases must be >= 1")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.backend in ("replay-uniform", "replay-coreset") and not self.subsample:
            raise ValueError(f"backend {self.backend} needs a subsample size")
        if isinstance(self.eta, str) and self.eta != "auto":
            raise ValueError("eta must be a positive number or 'auto'")
        if not isinstance(self.eta, str) and self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.q_max is not None and self.q_max <= 0:
            raise ValueError("q_max must be positive")
        if self.m is not None:
            block_schedule(self.tau, self.b, self.m)
        elif self.b >= self.tau:
            raise ValueError("b must be smaller than tau")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    @property
    def ridge(self) -> float:
        return math.sqrt(self.tau / self.n_phases) if self.alpha is None else self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolitexConfig":
        return cls(**d)


def softmax_rows(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite action values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_policy(q_table, coef: float) -> Policy:
    """``pi(a|x) ∝ exp(coef * Q(x, a))`` for an ``(S, A)`` table; ``coef`` is ``eta * k``."""
    return Policy(softmax_rows(coef * np.asarray(q_table, dtype=float)))


def compute_eta(n_phases: int, q_max: float, n_actions: int) -> float:
    """``sqrt(8 log|A|) / (Q_max sqrt(K))``."""
    if n_phases < 1 or q_max <= 0:
        raise ValueError("need n_phases >= 1 and q_max > 0")
    if n_actions < 2:
        raise ValueError("eta is degenerate with a single action (log|A| = 0)")
    return math.sqrt(8.0 * math.log(n_actions)) / (q_max * math.sqrt(n_phases))


class LinearSoftmaxPolicy:
    """``pi(a|x) ∝ exp(theta . phi(x, a))``, evaluated lazily per state."""

    def __init__(self, features: BlockFeatures, theta):
        self.features = features
        self.theta = np.asarray(theta, dtype=float)
        self._W = self.theta.reshape(features.n_actions, features.block_dim)

    def probs(self, states) -> np.ndarray:
        return softmax_rows(self.features.q_values(self.theta, states))

    def probs_one(self, state) -> np.ndarray:
        z = self._W @ self.features.state_features_one(state)
        e = np.exp(z - z.max())
        return e / e.sum()

    def table(self, n_states: int) -> Policy:
        return Policy(self.probs(np.arange(n_states)))


def policy_step_diagnostic(p_prev, p_next, eta: float, q_hat_pi) -> tuple[np.ndarray, np.ndarray]:
    """Per-state ``||pi_next - pi_prev||_1`` and the bound ``eta ||Qhat_pi(x, .)||_inf``."""
    lhs = np.abs(np.asarray(p_next) - np.asarray(p_prev)).sum(axis=-1)
    rhs = eta * np.abs(np.asarray(q_hat_pi)).max(axis=-1)
    return lhs, rhs


@dataclass
class PhaseRecord:
    k: int
    mean_reward: float
    J_pi: float | None
    cum_regret: float | None
    pseudo_regret: float | None
    policy_step_l1: float
    eta_bound: float
    step_bound_ok: bool
    q_range: float
    est_error: float | None
    eta: float
    n_samples: int
    clamped: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: PolitexConfig
    records: list[PhaseRecord]
    policy: LinearSoftmaxPolicy
    weights: np.ndarray
    eta: float
    optimal_gain: float | None = None
    policies: list[np.ndarray] = field(default_factory=list)

    @property
    def final_regret(self) -> float | None:
        return self.records[-1].cum_regret if self.records else None


class _Estimator:
    """Running estimate of the average-Q weights for one backend."""

    def __init__(self, config: PolitexConfig, dim: int):
        self.config = config
        self.mean_w = np.zeros(dim)
        self.buffer = ReplayBuffer()

    def update(self, k: int, phi: np.ndarray, R: np.ndarray, rng) -> np.ndarray:
        cfg = self.config
        if cfg.backend == "weight-averaging":
            est = lsmc_fit(phi, R, cfg.ridge, max_norm=cfg.weight_clip, phase=k)
            self.mean_w = self.mean_w + (est.w - self.mean_w) / k
            return self.mean_w
        block = PhaseSamples.full(k, phi, R)
        est = fit_average_q(block, self.buffer, cfg.ridge, max_norm=cfg.weight_clip)
        if cfg.backend == "replay-full":
            keep = block
        elif cfg.backend == "replay-uniform":
            keep = uniform_subsample(block, min(cfg.subsample, len(block)), rng)
        else:
            keep = coreset_subsample(block, cfg.subsample, est.w, rng)
        self.buffer.add(keep)
        if cfg.capacity is not None:
            self.buffer = evict(self.buffer, cfg.capacity, rng)
        self.mean_w = est.w
        return self.mean_w


def phase_samples(data: PhaseDataset, features: BlockFeatures, config: PolitexConfig):
    """Gain estimate, sample times, features and returns for one phase."""
    if config.m is None:
        gain = empirical_gain(data)
        t_idx, R = b_step_returns(data, config.b, gain)
    else:
        sched = block_schedule(data.tau, config.b, config.m)
        gain = empirical_gain(data, sched)
        t_idx, R = b_step_returns(data, config.b, gain, starts=sched.odd_starts)
    phi = features.featurize_batch(data.states[t_idx], data.actions[t_idx])
    return gain, t_idx, phi, R


def run(config: PolitexConfig, env, features: BlockFeatures, exact_oracle: bool = True) -> RunResult:
    """Run ``n_phases`` phases of Politex on ``env``.

    Tabular environments (those exposing an ``mdp``) get exact per-phase
    gains, regret against the optimal gain and, with one-hot features, the
    error of the averaged weights against the exact average Q-function.
    """
    rng = np.random.default_rng(config.seed)
    K = config.n_phases
    mdp: TabularMdp | None = getattr(env, "mdp", None)
    tabular = mdp is not None
    optimal_gain = None
    if tabular and exact_oracle:
        _, optimal_gain = find_optimal_policy(mdp)
    realizable = tabular and isinstance(features, OneHotFeatures)
    eta = None if config.eta == "auto" else float(config.eta)
    if eta is None and config.q_max is not None:
        eta = compute_eta(K, config.q_max, features.n_actions)

    estimator = _Estimator(config, features.dim)
    theta = np.zeros(features.dim)
    prev_w = np.zeros(features.dim)
    exact_w_sum = np.zeros(features.dim)
    total_reward = 0.0
    pseudo = 0.0
    records: list[PhaseRecord] = []
    policies: list[np.ndarray] = []
    env.reset(rng)

    for k in range(1, K + 1):
        policy = LinearSoftmaxPolicy(features, theta)
        J_pi = None
        if tabular:
            table = policy.table(mdp.n_states)
            policies.append(table.probs)
            data = env.rollout(table, config.tau, rng, k)
            sol = solve_values(mdp, table)
            J_pi = sol.gain
            if realizable:
                exact_w_sum += features.weights_from_table(sol.action_values)
        else:
            data = env.rollout(policy, config.tau, rng, k)

        gain, t_idx, phi, R = phase_samples(data, features, config)
        if len(R) == 0:
            raise RuntimeError(f"phase {k}: no valid {config.b}-step returns")
        if eta is None:
            # Q_max heuristic: largest observed |R_t| in the first phase
            eta = compute_eta(K, max(float(np.abs(R).max()), 1e-8), features.n_actions)
        try:
            mean_w = estimator.update(k, phi, R, rng)
        except Exception as exc:
            raise RuntimeError(f"phase {k}: {config.backend} backend failed: {exc}") from exc

        q_hat_pi_w = k * mean_w - (k - 1) * prev_w
        theta_next = eta * k * mean_w
        if tabular:
            diag_states = np.arange(mdp.n_states)
            clamped = 0
        else:
            diag_states = data.states
            clamped = features.spec.normalize(data.states)[1] if hasattr(features, "spec") else 0
        p_prev = softmax_rows(features.q_values(theta, diag_states))
        p_next = softmax_rows(features.q_values(theta_next, diag_states))
        q_hat_pi = features.q_values(q_hat_pi_w, diag_states)
        lhs, rhs = policy_step_diagnostic(p_prev, p_next, eta, q_hat_pi)
        step_ok = bool(np.all(lhs <= rhs + STEP_BOUND_SLACK))
        q_range = float((q_hat_pi.max(axis=1) - q_hat_pi.min(axis=1)).max())
        if config.strict:
            if not step_ok:
                bad = int(np.argmax(lhs - rhs))
                raise InvariantViolation(
                    f"phase {k}: policy step {lhs[bad]:.6g} exceeds eta*||Qhat||_inf = {rhs[bad]:.6g}")
            if config.weight_clip is not None:
                growth = 1 if config.backend == "weight-averaging" else 2 * k - 1
                limit = 2 * features.bound * growth * config.weight_clip
                if q_range > limit + 1e-9:
                    raise InvariantViolation(f"phase {k}: Qhat range {q_range:.6g} exceeds {limit:.6g}")

        total_reward += float(data.rewards.sum())
        cum_regret = None
        pseudo_regret = None
        if optimal_gain is not None:
            cum_regret = k * config.tau * optimal_gain - total_reward
            pseudo += config.tau * (optimal_gain - J_pi)
            pseudo_regret = pseudo
        est_error = None
        if realizable:
            est_error = float(np.linalg.norm(mean_w - exact_w_sum / k))

        records.append(PhaseRecord(
            k=k, mean_reward=data.mean_reward, J_pi=J_pi, cum_regret=cum_regret,
            pseudo_regret=pseudo_regret, policy_step_l1=float(lhs.max()), eta_bound=float(rhs.max()),
            step_bound_ok=step_ok, q_range=q_range, est_error=est_error, eta=eta,
            n_samples=int(len(R)), clamped=int(clamped),
        ))
        theta, prev_w = theta_next, mean_w

    final = LinearSoftmaxPolicy(features, theta)
    if tabular:
        policies.append(final.table(mdp.n_states).probs)
    return RunResult(config, records, final, prev_w, eta, optimal_gain, policies)
