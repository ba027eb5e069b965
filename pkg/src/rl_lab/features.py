"""State-action feature maps with a block-per-action layout.

Every map here has the form ``phi(x, a) = e_a (kron) psi(x)``: the vector is
split into ``n_actions`` blocks and only block ``a`` is non-zero. A weight
vector ``w`` therefore reshapes to an ``(n_actions, block_dim)`` matrix and
``Q(x, .) = W @ psi(x)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mdp import Policy, ShapeError, TabularMdp, solve_values


@dataclass(frozen=True)
class FourierSpec:
    order: int
    low: tuple[float, ...]
    high: tuple[float, ...]
    max_total_order: int | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("Fourier order must be >= 1")
        object.__setattr__(self, "low", tuple(float(v) for v in self.low))
        object.__setattr__(self, "high", tuple(float(v) for v in self.high))
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("low/high must be non-empty and the same length")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("need low < high on every coordinate")

    @property
    def n_dims(self) -> int:
        return len(self.low)

    def coefficients(self) -> np.ndarray:
        """Integer frequency vectors ``c`` in ``{0..order}^dims``, optionally with ``sum(c) <= max_total_order``."""
        cap = self.order * self.n_dims if self.max_total_order is None else self.max_total_order
        grid = [c for c in itertools.product(range(self.order + 1), repeat=self.n_dims) if sum(c) <= cap]
        return np.array(grid, dtype=float)

    def normalize(self, states) -> tuple[np.ndarray, int]:
        """Map states to ``[0, 1]^dims``; returns the clamped array and how many rows were out of range."""
        s = np.atleast_2d(np.asarray(states, dtype=float))
        lo, hi = np.array(self.low), np.array(self.high)
        z = (s - lo) / (hi - lo)
        outside = int(np.any((z < 0) | (z > 1), axis=1).sum())
        return np.clip(z, 0.0, 1.0), outside

    def to_dict(self) -> dict:
        return {"order": self.order, "low": list(self.low), "high": list(self.high),
                "max_total_order": self.max_total_order}

    @classmethod
    def from_dict(cls, d: dict) -> "FourierSpec":
        return cls(d["order"], tuple(d["low"]), tuple(d["high"]), d.get("max_total_order"))


class BlockFeatures:
    kind = "block"

    def __init__(self, n_actions: int, block_dim: int, bound: float):
        if n_actions < 1:
            raise ValueError("n_actions must be >= 1")
        self.n_actions = n_actions
        self.block_dim = block_dim
        self.dim = n_actions * block_dim
        self.bound = bound

    def state_features(self, states) -> np.ndarray:
        raise NotImplementedError

    def featurize(self, x, a: int) -> np.ndarray:
        if not 0 <= a < self.n_actions:
            raise ShapeError(f"action {a} out of range")
        out = np.zeros(self.dim)
        out[a * self.block_dim:(a + 1) * self.block_dim] = self.state_features([x])[0]
        return out

    def featurize_batch(self, states, actions) -> np.ndarray:
        psi = self.state_features(states)
        actions = np.asarray(actions, dtype=np.int64)
        out = np.zeros((len(actions), self.n_actions, self.block_dim))
        out[np.arange(len(actions)), actions] = psi
        return out.reshape(len(actions), self.dim)

    def q_values(self, w, states) -> np.ndarray:
        """``Q[i, a] = w . phi(states[i], a)`` for every action."""
        W = np.asarray(w, dtype=float).reshape(self.n_actions, self.block_dim)
        return self.state_features(states) @ W.T

    def all_pairs(self, states) -> np.ndarray:
        """Feature matrix for every (state, action) pair, rows ordered state-major."""
        states = list(states)
        xs = [x for x in states for _ in range(self.n_actions)]
        acts = [a for _ in states for a in range(self.n_actions)]
        return self.featurize_batch(xs, acts)


class OneHotFeatures(BlockFeatures):
    """Indicator of (x, a) at linear index ``a * n_states + x``."""

    kind = "tabular-one-hot"

    def __init__(self, n_states: int, n_actions: int):
        super().__init__(n_actions, n_states, 1.0)
        self.n_states = n_states

    def state_features(self, states) -> np.ndarray:
        idx = np.asarray(states, dtype=np.int64).ravel()
        return np.eye(self.n_states)[idx]

    def q_table(self, w) -> np.ndarray:
        return np.asarray(w, dtype=float).reshape(self.n_actions, self.n_states).T

    def weights_from_table(self, q) -> np.ndarray:
        """Inverse of :meth:`q_table`: an ``(S, A)`` table to a weight vector."""
        return np.asarray(q, dtype=float).T.ravel().copy()


class BlockFourierFeatures(BlockFeatures):
    """Cosine Fourier basis ``cos(pi c . s)`` of the normalised state, one block per action."""

    kind = "block-fourier"

    def __init__(self, spec: FourierSpec, n_actions: int):
        self.spec = spec
        self.coef = spec.coefficients()
        super().__init__(n_actions, len(self.coef), float(np.sqrt(len(self.coef))))
        self._lo = np.array(spec.low)
        self._scale = np.array(spec.high) - self._lo

    def state_features(self, states) -> np.ndarray:
        z, _ = self.spec.normalize(states)
        return np.cos(np.pi * z @ self.coef.T)

    def state_features_one(self, s) -> np.ndarray:
        z = np.clip((np.asarray(s, dtype=float) - self._lo) / self._scale, 0.0, 1.0)
        return np.cos(np.pi * (self.coef @ z))


def feature_excitation(mdp: TabularMdp, policy: Policy, features: BlockFeatures) -> float:
    """Smallest eigenvalue of ``E_{(x,a)~nu_pi}[phi phi^T]``."""
    nu = solve_values(mdp, policy).stationary_state_action.ravel()
    Phi = features.all_pairs(range(mdp.n_states))
    second_moment = (Phi * nu[:, None]).T @ Phi
    return float(np.linalg.eigvalsh(second_moment)[0])


def build_features(spec: dict, n_states: int | None, n_actions: int) -> BlockFeatures:
    kind = spec.get("kind", "tabular-one-hot")
    if kind in ("tabular-one-hot", "one-hot"):
        if n_states is None:
            raise ValueError("one-hot features need a finite state space")
        return OneHotFeatures(n_states, n_actions)
    if kind == "block-fourier":
        return BlockFourierFeatures(FourierSpec.from_dict(spec), n_actions)
    raise ValueError(f"unknown feature kind {kind!r}")
