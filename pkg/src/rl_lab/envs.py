"""Environments: generated tabular MDPs and a discrete-force cart-pole."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .estimation import PhaseDataset
from .mdp import Policy, TabularMdp, simulate


def generate_random_mdp(n_states: int, n_actions: int, mixing_floor: float, seed=None) -> TabularMdp:
    """Random MDP whose every transition probability is at least ``mixing_floor``.

    Each row is ``(1 - eps * S) * Dirichlet(1) + eps``; rewards are uniform
    on [0, 1]. The floor bounds the ergodicity coefficient of every policy
    by ``1 - eps * S``.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    if not 0 < mixing_floor <= 1.0 / n_states:
        raise ValueError(f"mixing_floor must lie in (0, 1/{n_states}]")
    rng = np.random.default_rng(seed)
    slack = 1.0 - mixing_floor * n_states
    P = slack * rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)) + mixing_floor
    if slack == 0.0:
        P = np.full((n_states, n_actions, n_states), 1.0 / n_states)
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(P, r)


def chain_mdp(n_states: int, slip: float = 0.1, mixing_floor: float = 0.01) -> TabularMdp:
    """Two-action chain: action 1 moves right, action 0 moves left, both slip with prob ``slip``.

    Reward 1 at the right end, 0.1 at the left end. A uniform floor keeps the
    chain ergodic.
    """
    if n_states < 2:
        raise ValueError("chain needs at least two states")
    if not 0 < mixing_floor <= 1.0 / n_states:
        raise ValueError(f"mixing_floor must lie in (0, 1/{n_states}]")
    P = np.zeros((n_states, 2, n_states))
    for x in range(n_states):
        left, right = max(x - 1, 0), min(x + 1, n_states - 1)
        P[x, 0, left] += 1 - slip
        P[x, 0, right] += slip
        P[x, 1, right] += 1 - slip
        P[x, 1, left] += slip
    P = (1 - mixing_floor * n_states) * P + mixing_floor
    r = np.zeros((n_states, 2))
    r[0, :] = 0.1
    r[-1, :] = 1.0
    return TabularMdp(P, r)


class TabularEnv:
    """Continuing environment backed by a :class:`TabularMdp`."""

    def __init__(self, mdp: TabularMdp, start_state: int = 0):
        self.mdp = mdp
        self.start_state = start_state
        self.state = start_state

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self, rng=None) -> int:
        self.state = self.start_state
        return self.state

    def rollout(self, policy_table: Policy, steps: int, rng, k: int = 0) -> PhaseDataset:
        traj = simulate(self.mdp, policy_table, steps, self.state, rng)
        self.state = traj.next_state
        return PhaseDataset(k, traj.states, traj.actions, traj.rewards)


@dataclass
class CartPoleEnv:
    """Cart-pole with the Barto-Sutton-Anderson equations of motion.

    One control step lasts ``dt`` and is integrated with ``substeps``
    semi-implicit Euler steps (a single step at 0.01 s loses a few percent of
    the energy over one swing). Actions are the integer levels in
    ``forces`` times ``force_unit`` newtons. Reward is ``(1 + cos theta) / 2``;
    an episode fails when the reward drops below 0.5 or the cart leaves the
    track, and otherwise times out after ``episode_length`` steps.
    """

    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    half_length: float = 0.5
    dt: float = 0.01
    substeps: int = 10
    force_unit: float = 5.0
    forces: tuple = (-2, -1, 0, 1, 2)
    episode_length: int = 1000
    x_limit: float = 2.4
    fall_reward: float = 0.5
    init_noise: float = 0.05

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.forces = tuple(self.forces)
        self.state = np.zeros(4)
        self.t = 0

    @property
    def n_actions(self) -> int:
        return len(self.forces)

    def reset(self, rng) -> np.ndarray:
        self.state = rng.uniform(-self.init_noise, self.init_noise, size=4)
        self.t = 0
        return self.state.copy()

    def dynamics(self, state, force: float):
        x, x_dot, theta, theta_dot = state
        total = self.masscart + self.masspole
        pml = self.masspole * self.half_length
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            sin, cos = math.sin(theta), math.cos(theta)
            temp = (force + pml * theta_dot * theta_dot * sin) / total
            theta_acc = (self.gravity * sin - cos * temp) / (
                self.half_length * (4.0 / 3.0 - self.masspole * cos * cos / total))
            x_acc = temp - pml * theta_acc * cos / total
            x_dot = x_dot + h * x_acc
            x = x + h * x_dot
            theta_dot = theta_dot + h * theta_acc
            theta = theta + h * theta_dot
        return x, x_dot, theta, theta_dot

    def energy(self, state) -> float:
        """Total mechanical energy (uniform rod of half-length ``half_length``)."""
        x, x_dot, theta, theta_dot = state
        m, l = self.masspole, self.half_length
        kinetic = (0.5 * (self.masscart + m) * x_dot**2 + m * l * x_dot * theta_dot * math.cos(theta)
                   + 0.5 * (4.0 / 3.0) * m * l**2 * theta_dot**2)
        return kinetic + m * self.gravity * l * math.cos(theta)

    def reward(self, state) -> float:
        return min(1.0, max(0.0, 0.5 * (1.0 + math.cos(state[2]))))

    def step(self, action: int):
        """Advance one step; returns ``(obs, reward, failed, cut)``."""
        s = self.dynamics(self.state, self.forces[action] * self.force_unit)
        self.state = np.array(s)
        self.t += 1
        r = self.reward(s)
        failed = r < self.fall_reward or abs(s[0]) > self.x_limit
        cut = not failed and self.t >= self.episode_length
        return self.state.copy(), r, failed, cut

    def rollout(self, policy, steps: int, rng, k: int = 0) -> PhaseDataset:
        """Run ``steps`` interactions, resetting after every episode end.

        ``policy.probs_one(obs)`` gives the action distribution. Steps an
        episode loses to failure are counted in ``padding`` as zero reward.
        """
        states = np.empty((steps, 4))
        actions = np.empty(steps, dtype=np.int64)
        rewards = np.empty(steps)
        failed = np.zeros(steps, dtype=bool)
        cut = np.zeros(steps, dtype=bool)
        padding = 0
        u = rng.random(steps).tolist()
        obs = self.state.copy()
        for t in range(steps):
            cum = np.cumsum(policy.probs_one(obs)).tolist()
            cum[-1] = math.inf
            a = bisect.bisect_right(cum, u[t])
            states[t] = obs
            actions[t] = a
            obs, rewards[t], failed[t], cut[t] = self.step(a)
            if failed[t]:
                padding += self.episode_length - self.t
            if failed[t] or cut[t]:
                obs = self.reset(rng)
        return PhaseDataset(k, states, actions, rewards, failed, cut, padding)
