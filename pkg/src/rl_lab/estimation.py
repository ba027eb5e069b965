"""Least-squares Monte Carlo estimation of Q-function weights.

A phase of data is regressed with ridge regression onto ``b``-step centred
returns; averaging the per-phase weight vectors estimates the running mean
of the Q-functions of all policies played so far.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

SOLVE_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class PhaseDataset:
    """Data from one phase of ``tau`` environment steps.

    ``failed[t]`` marks a step that ended its episode by failure; rewards
    after a failure count as zero until the episode would have timed out
    (``padding`` counts those phantom steps). ``cut[t]`` marks an episode
    ended by its time limit, across which returns are not defined.
    """

    k: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    failed: np.ndarray | None = None
    cut: np.ndarray | None = None
    padding: int = 0

    @property
    def tau(self) -> int:
        return len(self.rewards)

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.sum() / (self.tau + self.padding))

    def to_jsonl(self, t_idx, returns) -> str:
        """Rows ``{t, x, a, r, R}`` for the samples that have a return."""
        lines = []
        for t, R in zip(np.asarray(t_idx).tolist(), np.asarray(returns).tolist()):
            x = self.states[t]
            x = x.tolist() if isinstance(x, np.ndarray) else int(x)
            lines.append(json.dumps({"t": t, "x": x, "a": int(self.actions[t]),
                                     "r": float(self.rewards[t]), "R": R}))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class BlockSchedule:
    b: int
    m: int
    odd_starts: np.ndarray
    even_starts: np.ndarray


def block_schedule(tau: int, b: int, m: int) -> BlockSchedule:
    """Split a phase into ``2m`` blocks of length ``b``.

    Odd blocks start at ``0, 2b, 4b, ...`` and even blocks at ``b, 3b, ...``
    (indices relative to the phase).
    """
    if b < 1 or m < 1:
        raise ValueError("b and m must be >= 1")
    if 2 * m * b > tau:
        raise ValueError(f"2*m*b = {2 * m * b} exceeds the phase length {tau}")
    odd = np.arange(m, dtype=np.int64) * 2 * b
    return BlockSchedule(b, m, odd, odd + b)


def empirical_gain(data: PhaseDataset, schedule: BlockSchedule | None = None) -> float:
    """Average-reward estimate for one phase.

    With a schedule, the mean reward at even-block starts; without one, the
    all-steps mean (phantom post-failure steps included as zeros).
    """
    if schedule is None:
        return data.mean_reward
    if len(schedule.even_starts) == 0:
        raise ValueError("schedule has no even-block starts")
    return float(data.rewards[schedule.even_starts].mean())


def _next_index(flags: np.ndarray) -> np.ndarray:
    """For each t, the smallest j >= t with flags[j] set (len(flags) if none)."""
    n = len(flags)
    out = np.full(n + 1, n, dtype=np.int64)
    pos = np.flatnonzero(flags)
    out[pos] = pos
    return np.minimum.accumulate(out[::-1])[::-1][:n]


def b_step_returns(data: PhaseDataset, b: int, gain: float, starts=None) -> tuple[np.ndarray, np.ndarray]:
    """Centred returns ``R_t = sum_{j=t}^{t+b} (r_j - gain)``.

    Returns ``(t_idx, R)`` for every valid ``t`` (or only those in ``starts``).
    A window is valid if it stays inside the phase and its episode; windows
    reaching a failure are completed with zero rewards, windows crossing a
    time-limit cut are dropped.
    """
    tau = data.tau
    if b < 1:
        raise ValueError("b must be >= 1")
    if b >= tau:
        raise ValueError(f"b = {b} must be smaller than the phase length {tau}")
    r = np.asarray(data.rewards, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(r)])
    t = np.arange(tau, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64)
    end = t + b
    failed = np.zeros(tau, bool) if data.failed is None else np.asarray(data.failed, bool)
    cut = np.zeros(tau, bool) if data.cut is None else np.asarray(data.cut, bool)
    next_fail = _next_index(failed)[t]
    next_cut = _next_index(cut)[t]
    stop = np.minimum(end, next_fail)
    hits_failure = next_fail <= np.minimum(end, tau - 1)
    valid = np.where(hits_failure, next_fail <= next_cut, (end <= tau - 1) & (next_cut >= end))
    t, stop = t[valid], stop[valid]
    R = csum[stop + 1] - csum[t] - (b + 1) * gain
    return t, R


@dataclass(frozen=True, eq=False)
class WeightEstimate:
    w: np.ndarray
    alpha: float
    phases: tuple[int, ...] = field(default=())
    clipped: bool = False

    @property
    def dim(self) -> int:
        return len(self.w)


def clip_norm(w: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, bool]:
    if max_norm is None:
        return w, False
    norm = float(np.linalg.norm(w))
    if norm <= max_norm:
        return w, False
    return w * (max_norm / norm), True


def ridge_solve(gram: np.ndarray, moment: np.ndarray, alpha: float) -> np.ndarray:
    """Solve ``(gram + alpha I) w = moment`` by Cholesky with a residual check."""
    d = len(moment)
    A = gram + alpha * np.eye(d)
    try:
        factor = linalg.cho_factor(A, check_finite=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge system is singular (alpha={alpha}): {exc}") from exc
    w = linalg.cho_solve(factor, moment)
    resid = np.abs(A @ w - moment).max(initial=0.0)
    scale = max(1.0, np.abs(moment).max(initial=0.0), np.abs(A).max(initial=0.0) * np.abs(w).max(initial=0.0))
    if not np.all(np.isfinite(w)) or resid > SOLVE_RESIDUAL_TOL * scale:
        raise np.linalg.LinAlgError(f"ridge solve residual {resid:.3e} too large")
    return w


def lsmc_fit(phi, returns, alpha: float, max_norm: float | None = None, phase: int | None = None) -> WeightEstimate:
    """Ridge regression ``(sum phi phi^T + alpha I)^{-1} sum phi R``."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    R = np.asarray(returns, dtype=float)
    if len(phi) != len(R):
        raise ValueError("phi and returns differ in length")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    w = ridge_solve(phi.T @ phi, phi.T @ R, alpha)
    w, clipped = clip_norm(w, max_norm)
    return WeightEstimate(w, alpha, () if phase is None else (phase,), clipped)


def average_weights(estimates) -> WeightEstimate:
    """Arithmetic mean of weight vectors."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("need at least one estimate")
    dims = {e.dim for e in estimates}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")
    w = np.mean([e.w for e in estimates], axis=0)
    phases = tuple(p for e in estimates for p in e.phases)
    return WeightEstimate(w, float(np.mean([e.alpha for e in estimates])), phases,
                          any(e.clipped for e in estimates))


def q_value(estimate, phi) -> float:
    w = estimate.w if isinstance(estimate, WeightEstimate) else np.asarray(estimate, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != w.shape:
        raise ValueError(f"dimension mismatch: {phi.shape} vs {w.shape}")
    return float(w @ phi)


def truncation_horizon(gamma: float, tol: float = 1e-3) -> int:
    """Smallest ``b`` with ``gamma^b <= tol`` (1 when the chain mixes in one step)."""
    if gamma <= 0:
        return 1
    if gamma >= 1:
        raise ValueError("chain does not contract; no finite truncation horizon")
    return max(1, int(np.ceil(np.log(tol) / np.log(gamma))))
