"""Finite ergodic average-reward MDPs.

Exact gain/bias evaluation, stationary distributions, the Dobrushin
ergodicity coefficient and a fast trajectory sampler. Everything on the
learning side is checked against these solvers.

Conventions
-----------
* ``transitions[x, a, y] = P(y | x, a)``, ``rewards[x, a] = r(x, a)``.
* State-action pairs are flattened state-major: ``(x, a) -> x * n_actions + a``.
* Bias values are normalised so that ``sum_x mu_pi(x) V_pi(x) = 0``.
"""

from __future__ import annotations

import bisect
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12
POWER_TOL = 1e-12
POWER_MAX_ITER = 10**6
RESIDUAL_TOL = 1e-9


class ShapeError(ValueError):
    """Array shapes or probability constraints are inconsistent."""


class NotErgodicError(RuntimeError):
    """A chain failed to mix or a Poisson equation was singular."""


class SizeLimitError(RuntimeError):
    """Problem too large for an exact oracle."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _check_row_stochastic(m: np.ndarray, what: str) -> None:
    if np.any(m < 0):
        raise ShapeError(f"{what} has negative entries")
    dev = np.abs(m.sum(axis=-1) - 1.0).max(initial=0.0)
    if dev > PROB_ATOL:
        raise ShapeError(f"{what} rows do not sum to 1 (max deviation {dev:.3e})")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        r = np.array(self.rewards, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ShapeError(f"transitions must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ShapeError(f"rewards must have shape {P.shape[:2]}, got {r.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ShapeError("need at least one state and one action")
        _check_row_stochastic(P, "transitions")
        if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
            raise ShapeError("rewards must lie in [0, 1]")
        object.__setattr__(self, "transitions", _readonly(P))
        object.__setattr__(self, "rewards", _readonly(r))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(d["transitions"], d["rewards"])
        if (mdp.n_states, mdp.n_actions) != (d.get("n_states", mdp.n_states), d.get("n_actions", mdp.n_actions)):
            raise ShapeError("declared n_states/n_actions disagree with arrays")
        return mdp

    def to_json(self) -> str:
        # json emits repr() floats, which round-trip exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic table ``probs[x, a] = pi(a | x)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ShapeError(f"policy table must be 2-D, got shape {p.shape}")
        _check_row_stochastic(p, "policy")
        object.__setattr__(self, "probs", _readonly(p))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((len(actions), n_actions))
        p[np.arange(len(actions)), actions] = 1.0
        return cls(p)


@dataclass(frozen=True, eq=False)
class ExactSolution:
    gain: float
    state_values: np.ndarray
    action_values: np.ndarray
    stationary_state: np.ndarray
    stationary_state_action: np.ndarray


def _check_policy(mdp: TabularMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_transition(mdp: TabularMdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """State chain ``P_pi`` and state-action chain ``H_pi`` induced by a policy."""
    _check_policy(mdp, policy)
    P, pi = mdp.transitions, policy.probs
    P_pi = np.einsum("xa,xay->xy", pi, P)
    S, A = pi.shape
    H = (P.reshape(S * A, S)[:, :, None] * pi[None, :, :]).reshape(S * A, S * A)
    return P_pi, H


def ergodicity_coefficient(H) -> float:
    """Dobrushin coefficient ``max ||z^T H||_1`` over ``z^T 1 = 0, ||z||_1 = 1``.

    The feasible set is a polytope whose vertices are ``(e_i - e_j) / 2``, so
    the maximum is half the largest L1 distance between two rows.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {H.shape}")
    best = 0.0
    for i in range(H.shape[0] - 1):
        d = np.abs(H[i + 1 :] - H[i]).sum(axis=1).max()
        best = max(best, float(d))
    return min(1.0, 0.5 * best)


def mixing_coefficient(mdp: TabularMdp) -> float:
    """Uniform bound on ``gamma(H_pi)`` over all policies.

    Rows of ``H_pi`` for pairs (x, a) and (x', a') differ by
    ``sum_y |P(y|x,a) - P(y|x',a')|`` whatever ``pi`` is, so the coefficient is
    policy independent and equals that of the flattened transition table.
    """
    S, A = mdp.n_states, mdp.n_actions
    return ergodicity_coefficient(mdp.transitions.reshape(S * A, S))


def stationary_distribution(M, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> np.ndarray:
    """Left fixed point of a row-stochastic matrix, by power iteration."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {M.shape}")
    _check_row_stochastic(M, "matrix")
    mu = np.full(M.shape[0], 1.0 / M.shape[0])
    for _ in range(max_iter):
        nxt = mu @ M
        delta = np.abs(nxt - mu).sum()
        mu = nxt
        if delta < tol:
            return mu / mu.sum()
    coef = ergodicity_coefficient(M)
    raise NotErgodicError(
        f"power iteration did not converge in {max_iter} iterations (ergodicity coefficient {coef:.6f})"
    )


def solve_values(mdp: TabularMdp, policy: Policy) -> ExactSolution:
    """Gain, bias and action values of ``policy`` from the Poisson equation."""
    P_pi, _ = policy_transition(mdp, policy)
    pi = policy.probs
    r_pi = (pi * mdp.rewards).sum(axis=1)
    mu = stationary_distribution(P_pi)
    n = mdp.n_states
    # [I - P_pi, 1; mu^T, 0] [V; J] = [r_pi; 0]
    system = np.zeros((n + 1, n + 1))
    system[:n, :n] = np.eye(n) - P_pi
    system[:n, n] = 1.0
    system[n, :n] = mu
    rhs = np.append(r_pi, 0.0)
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise NotErgodicError(f"Poisson equation is singular: {exc}") from exc
    residual = np.abs(system @ sol - rhs).max()
    if not np.isfinite(residual) or residual > RESIDUAL_TOL:
        raise NotErgodicError(f"Poisson equation residual {residual:.3e} too large")
    V = sol[:n]
    gain = float(mu @ r_pi)
    Q = mdp.rewards - gain + mdp.transitions @ V
    return ExactSolution(
        gain=gain,
        state_values=_readonly(V),
        action_values=_readonly(Q),
        stationary_state=_readonly(mu),
        stationary_state_action=_readonly(mu[:, None] * pi),
    )


def truncated_action_values(mdp: TabularMdp, policy: Policy, b: int) -> np.ndarray:
    """``Q^b(x, a) = sum_{i=0}^{b} (e_{xa} - nu)^T H^i r``, the b-step truncation of Q."""
    _, H = policy_transition(mdp, policy)
    sol = solve_values(mdp, policy)
    nu = sol.stationary_state_action.ravel()
    r = mdp.rewards.ravel()
    acc = np.zeros_like(r)
    Hr = r.copy()
    for _ in range(b + 1):
        acc += Hr - nu @ Hr
        Hr = H @ Hr
    return acc.reshape(mdp.n_states, mdp.n_actions)


def performance_difference(mdp: TabularMdp, pi_ref: Policy, pi: Policy) -> tuple[float, float]:
    """Both sides of ``J_ref - J_pi = E_{x~mu_ref}[Q_pi(x, pi_ref) - Q_pi(x, pi)]``."""
    ref = solve_values(mdp, pi_ref)
    sol = solve_values(mdp, pi)
    lhs = ref.gain - sol.gain
    advantage = ((pi_ref.probs - pi.probs) * sol.action_values).sum(axis=1)
    rhs = float(ref.stationary_state @ advantage)
    return lhs, rhs


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_state: int


def _cumulative_rows(p: np.ndarray) -> list[list[float]]:
    cum = np.cumsum(p, axis=-1)
    cum[..., -1] = np.inf
    return cum.tolist()


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def simulate(mdp: TabularMdp, policy: Policy, steps: int, start: int = 0, rng=None) -> Trajectory:
    """Sample ``steps`` transitions of ``mdp`` under ``policy`` from ``start``.

    ``rng`` is a seed or a ``numpy.random.Generator``; equal seeds give equal
    trajectories.
    """
    _check_policy(mdp, policy)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = as_generator(rng)
    S, A = mdp.n_states, mdp.n_actions
    cum_P = _cumulative_rows(mdp.transitions.reshape(S * A, S))
    cum_pi = _cumulative_rows(policy.probs)
    u = rng.random((steps, 2)).tolist()
    states = [0] * steps
    actions = [0] * steps
    x = int(start)
    br = bisect.bisect_right
    for t in range(steps):
        ua, ux = u[t]
        a = br(cum_pi[x], ua)
        states[t] = x
        actions[t] = a
        x = br(cum_P[x * A + a], ux)
    s = np.array(states, dtype=np.int64)
    a = np.array(actions, dtype=np.int64)
    return Trajectory(s, a, mdp.rewards[s, a], x)


def simulate_chains(mdp: TabularMdp, policies, steps: int, starts, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Run many independent chains in lock-step.

    ``policies`` has shape ``(C, S, A)`` (one policy per chain) and ``starts``
    shape ``(C,)``. Returns state and action arrays of shape ``(C, steps)``.
    """
    rng = as_generator(rng)
    pol = np.asarray(policies, dtype=float)
    C = pol.shape[0]
    S, A = mdp.n_states, mdp.n_actions
    if pol.shape != (C, S, A):
        raise ShapeError(f"policies must have shape (C, {S}, {A}), got {pol.shape}")
    cum_P = np.cumsum(mdp.transitions.reshape(S * A, S), axis=1)
    cum_P[:, -1] = np.inf
    cum_pi = np.cumsum(pol, axis=2)
    cum_pi[:, :, -1] = np.inf
    states = np.empty((C, steps), dtype=np.int64)
    actions = np.empty((C, steps), dtype=np.int64)
    rows = np.arange(C)
    x = np.asarray(starts, dtype=np.int64).copy()
    for t in range(steps):
        u = rng.random((2, C))
        a = (cum_pi[rows, x] <= u[0][:, None]).sum(axis=1)
        states[:, t] = x
        actions[:, t] = a
        x = (cum_P[x * A + a] <= u[1][:, None]).sum(axis=1)
    return states, actions


def find_optimal_policy(mdp: TabularMdp, max_pairs: int = 5000, max_iter: int = 1000) -> tuple[Policy, float]:
    """Gain-optimal deterministic policy by Howard policy iteration.

    Starts from the greedy-reward policy; a state switches action only on a
    strict improvement, and the switch goes to the lowest maximising index.
    """
    S, A = mdp.n_states, mdp.n_actions
    if S * A > max_pairs:
        raise SizeLimitError(
            f"|X||A| = {S * A} exceeds the exact-oracle limit {max_pairs}; "
            "disable regret against J* for this environment"
        )
    actions = mdp.rewards.argmax(axis=1)
    rows = np.arange(S)
    for _ in range(max_iter):
        policy = Policy.deterministic(actions, A)
        sol = solve_values(mdp, policy)
        lookahead = mdp.rewards + mdp.transitions @ sol.state_values
        best = lookahead.max(axis=1)
        improve = best > lookahead[rows, actions] + 1e-12
        if not improve.any():
            return policy, sol.gain
        actions = np.where(improve, lookahead.argmax(axis=1), actions)
    raise RuntimeError("policy iteration did not terminate")


def enumerate_deterministic_gains(mdp: TabularMdp):
    """Yield ``(actions, gain)`` for every deterministic policy. Exponential; tests only."""
    for acts in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        yield acts, solve_values(mdp, Policy.deterministic(acts, mdp.n_actions)).gain
