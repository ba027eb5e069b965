"""Replay buffer for fitting a single Q-function to the average of past phases.

Each phase ``i`` contributes a squared loss ``l_i(w) = (1/n_i) sum_t (phi_t.w - R_t)^2``
over its ``n_i`` samples. When only a weighted subsample is kept, the
importance-weighted loss ``(1/n_i) sum_kept omega_t (phi_t.w - R_t)^2`` is an
unbiased estimate of ``l_i``. Two subsampling schemes are provided: uniform
without replacement, and a coreset drawn i.i.d. with ``q_t`` proportional to
the squared residual of a reference fit.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import comb
from typing import Iterator, NamedTuple

import numpy as np

from .estimation import WeightEstimate, clip_norm, ridge_solve


class ReplaySample(NamedTuple):
    phase: int
    phi: np.ndarray
    R: float
    weight: float


@dataclass(eq=False)
class PhaseSamples:
    """Samples kept from one phase.

    ``size`` is the number of samples the phase originally produced; it is
    the loss normaliser and does not change under subsampling or eviction.
    """

    phase: int
    phi: np.ndarray
    returns: np.ndarray
    weights: np.ndarray
    size: int

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.returns = np.asarray(self.returns, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if not (len(self.phi) == len(self.returns) == len(self.weights)):
            raise ValueError("phi, returns and weights differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("sample weights must be positive")
        if not np.all(np.isfinite(self.returns)):
            raise ValueError("returns must be finite")
        self._moments = None

    @classmethod
    def full(cls, phase: int, phi, returns) -> "PhaseSamples":
        returns = np.asarray(returns, dtype=float)
        return cls(phase, phi, returns, np.ones(len(returns)), len(returns))

    def __len__(self) -> int:
        return len(self.returns)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Weighted ``(Phi^T W Phi, Phi^T W R)``, cached."""
        if self._moments is None:
            pw = self.phi * self.weights[:, None]
            self._moments = (pw.T @ self.phi, pw.T @ self.returns)
        return self._moments

    def subset(self, idx, weights) -> "PhaseSamples":
        idx = np.asarray(idx, dtype=np.int64)
        return PhaseSamples(self.phase, self.phi[idx], self.returns[idx], weights, self.size)

    def samples(self) -> Iterator[ReplaySample]:
        for phi, R, w in zip(self.phi, self.returns, self.weights):
            yield ReplaySample(self.phase, phi, float(R), float(w))


def phase_loss(w, phi, returns, weights=None, size: int | None = None) -> float:
    """``(1/size) sum_t weight_t (phi_t.w - R_t)^2``; plain mean squared error by default."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    R = np.asarray(returns, dtype=float)
    if len(R) == 0:
        raise ValueError("empty phase")
    res2 = (phi @ np.asarray(w, dtype=float) - R) ** 2
    if weights is None:
        return float(res2.sum() / (len(R) if size is None else size))
    return float((np.asarray(weights) * res2).sum() / (len(R) if size is None else size))


def block_loss(w, block: PhaseSamples) -> float:
    return phase_loss(w, block.phi, block.returns, block.weights, block.size)


class ReplayBuffer:
    """Per-phase sample store. Single writer; reads between phases only."""

    def __init__(self, blocks=()):
        self.blocks: list[PhaseSamples] = [b for b in blocks if len(b)]

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)

    def add(self, block: PhaseSamples) -> None:
        if len(block):
            self.blocks.append(block)

    @property
    def phases(self) -> list[int]:
        return [b.phase for b in self.blocks]

    def weight_sums(self) -> dict[int, float]:
        return {b.phase: float(b.weights.sum()) for b in self.blocks}

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"phase": s.phase, "phi": s.phi.tolist(), "R": s.R, "weight": s.weight,
                        "phase_size": b.size})
            for b in self.blocks for s in b.samples()
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "ReplayBuffer":
        rows: dict[int, list[dict]] = {}
        for line in text.splitlines():
            if line.strip():
                row = json.loads(line)
                rows.setdefault(row["phase"], []).append(row)
        blocks = []
        for phase, rs in rows.items():
            size = rs[0].get("phase_size", len(rs))
            blocks.append(PhaseSamples(phase, [r["phi"] for r in rs], [r["R"] for r in rs],
                                       [r["weight"] for r in rs], size))
        return cls(blocks)


def fit_average_q(current: PhaseSamples, buffer: ReplayBuffer, alpha: float,
                  max_norm: float | None = None) -> WeightEstimate:
    """Minimise ``(1/k) sum_i l_i(w) + (alpha / n_k) ||w||^2`` over the current phase and the buffer.

    ``n_k`` is the current phase's sample count, so with a single phase this
    is exactly the per-phase ridge fit with penalty ``alpha``.
    """
    blocks = list(buffer.blocks) + [current]
    k = len({b.phase for b in blocks})
    d = current.phi.shape[1]
    gram = np.zeros((d, d))
    moment = np.zeros(d)
    for b in blocks:
        g, m = b.moments()
        gram += g / b.size
        moment += m / b.size
    w = ridge_solve(gram / k, moment / k, alpha / current.size)
    w, clipped = clip_norm(w, max_norm)
    return WeightEstimate(w, alpha, tuple(sorted({b.phase for b in blocks})), clipped)


def uniform_subsample(block: PhaseSamples, s: int, rng) -> PhaseSamples:
    """``s`` samples without replacement, each weighted ``n/s``."""
    n = len(block)
    if not 1 <= s <= n:
        raise ValueError(f"subsample size {s} outside [1, {n}]")
    idx = np.sort(rng.choice(n, size=s, replace=False))
    return block.subset(idx, block.weights[idx] * (n / s))


def coreset_probabilities(block: PhaseSamples, w) -> np.ndarray:
    res2 = (block.phi @ np.asarray(w, dtype=float) - block.returns) ** 2
    total = res2.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(len(block), 1.0 / len(block))
    return res2 / total


def coreset_subsample(block: PhaseSamples, s: int, w, rng) -> PhaseSamples:
    """``s`` i.i.d. draws with ``q_t`` proportional to the squared residual of ``w``.

    Draw weights are ``1 / (s q_t)``, so ``block_loss`` of the result is an
    unbiased estimate of the full phase loss for any fixed ``w``.
    """
    if s < 1:
        raise ValueError("subsample size must be >= 1")
    q = coreset_probabilities(block, w)
    idx = np.sort(rng.choice(len(block), size=s, replace=True, p=q))
    return block.subset(idx, block.weights[idx] / (s * q[idx]))


def evict(buffer: ReplayBuffer, capacity: int, rng) -> ReplayBuffer:
    """Drop samples uniformly at random until at most ``capacity`` remain.

    Survivors of each phase are rescaled so that the phase's weight sum is
    unchanged; phases with no survivors disappear.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    total = len(buffer)
    if total <= capacity:
        return buffer
    keep = np.zeros(total, dtype=bool)
    keep[rng.choice(total, size=capacity, replace=False)] = True
    blocks, start = [], 0
    for b in buffer.blocks:
        mask = keep[start:start + len(b)]
        start += len(b)
        if mask.any():
            kept = b.weights[mask]
            blocks.append(b.subset(np.flatnonzero(mask), kept * (b.weights.sum() / kept.sum())))
    return ReplayBuffer(blocks)


# Exact moments of the subsampled loss, used to check unbiasedness and variance.

def enumerate_uniform_estimates(losses, s: int):
    """Yield ``(probability, estimate)`` over all size-``s`` subsets of per-sample losses."""
    y = np.asarray(losses, dtype=float)
    n = len(y)
    p = 1.0 / comb(n, s)
    for idx in itertools.combinations(range(n), s):
        yield p, float(y[list(idx)].sum() / s)


def enumerate_importance_estimates(losses, q, s: int):
    """Yield ``(probability, estimate)`` over all ordered i.i.d. ``s``-draws from ``q``."""
    y = np.asarray(losses, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(y)
    support = np.flatnonzero(q > 0)
    for idx in itertools.product(support, repeat=s):
        idx = list(idx)
        p = float(np.prod(q[idx]))
        yield p, float((y[idx] / (s * q[idx])).sum() / n)


def exact_moments(weighted_values) -> tuple[float, float]:
    pv = list(weighted_values)
    p = np.array([a for a, _ in pv])
    v = np.array([b for _, b in pv])
    mean = float(p @ v)
    return mean, float(p @ (v - mean) ** 2)


def uniform_estimate_variance(losses, s: int) -> float:
    """Variance of the mean of ``s`` draws without replacement (finite-population correction)."""
    y = np.asarray(losses, dtype=float)
    n = len(y)
    if n == 1:
        return 0.0
    return float(y.var() / s * (n - s) / (n - 1))


def importance_estimate_variance(losses, q, s: int) -> float:
    """Variance of ``(1/(n s)) sum_draws y_t / q_t`` for ``s`` i.i.d. draws from ``q``."""
    y = np.asarray(losses, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(y)
    support = q > 0
    second = float((y[support] ** 2 / q[support]).sum()) / n**2
    return max(0.0, (second - y.mean() ** 2) / s)
