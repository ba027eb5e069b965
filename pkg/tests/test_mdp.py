import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import mdp_and_policy, random_policy, small_mdps
from rl_lab.envs import generate_random_mdp
from rl_lab.mdp import (NotErgodicError, Policy, ShapeError, SizeLimitError, TabularMdp,
                        enumerate_deterministic_gains, ergodicity_coefficient, find_optimal_policy,
                        mixing_coefficient, performance_difference, policy_transition, simulate,
                        simulate_chains, solve_values, stationary_distribution)


def test_tabular_mdp_rejects_bad_rows():
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[0.5, 0.6]]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.array([[1.5]]))
    with pytest.raises(ShapeError):
        TabularMdp(np.ones((2, 1, 1)), np.zeros((2, 1)))  # rows must index n_states targets


def test_arrays_are_read_only(mdp4):
    with pytest.raises(ValueError):
        mdp4.transitions[0, 0, 0] = 1.0


def test_json_round_trip_is_exact(mdp4, tmp_path):
    again = TabularMdp.from_json(mdp4.to_json())
    assert np.array_equal(again.transitions, mdp4.transitions)
    assert np.array_equal(again.rewards, mdp4.rewards)
    path = tmp_path / "m.json"
    mdp4.save(path)
    assert np.array_equal(TabularMdp.load(path).transitions, mdp4.transitions)


# policy_transition

def test_one_state_chain_is_trivial():
    mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[0.2, 0.7]]))
    P_pi, H = policy_transition(mdp, Policy(np.array([[0.3, 0.7]])))
    assert np.array_equal(P_pi, [[1.0]])
    assert np.allclose(H.sum(axis=1), 1)


def test_action_independent_rows_average_to_themselves(rng):
    rows = rng.dirichlet(np.ones(3), size=3)
    P = np.repeat(rows[:, None, :], 2, axis=1)
    mdp = TabularMdp(P, rng.uniform(size=(3, 2)))
    P_pi, _ = policy_transition(mdp, Policy.uniform(3, 2))
    assert np.allclose(P_pi, rows, atol=1e-15)


def test_policy_shape_mismatch(mdp4):
    with pytest.raises(ShapeError):
        policy_transition(mdp4, Policy.uniform(3, 2))


@given(mdp_and_policy())
def test_transition_matrices_are_row_stochastic(case):
    mdp, pi, _ = case
    P_pi, H = policy_transition(mdp, pi)
    assert np.allclose(P_pi.sum(axis=1), 1, atol=1e-12)
    assert np.allclose(H.sum(axis=1), 1, atol=1e-12)
    # brute force entry check
    S, A = mdp.n_states, mdp.n_actions
    for x, a, y, b in [(0, 0, S - 1, A - 1), (S - 1, A - 1, 0, 0)]:
        assert H[x * A + a, y * A + b] == pytest.approx(mdp.transitions[x, a, y] * pi.probs[y, b])


# stationary distribution and ergodicity coefficient

def test_stationary_uniform_chain():
    assert np.allclose(stationary_distribution([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5], atol=1e-12)


def test_stationary_two_state_chain():
    # mu = (0.2, 0.1) / 0.3 balances the flows 0 -> 1 and 1 -> 0
    assert np.allclose(stationary_distribution([[0.9, 0.1], [0.2, 0.8]]), [2 / 3, 1 / 3], atol=1e-10)


def test_stationary_relabelling(rng):
    M = rng.dirichlet(np.ones(4), size=4)
    perm = rng.permutation(4)
    mu = stationary_distribution(M)
    mu_perm = stationary_distribution(M[np.ix_(perm, perm)])
    assert np.allclose(mu_perm, mu[perm], atol=1e-10)


def test_stationary_rejects_periodic_chain():
    # period 2 with a non-uniform stationary law, so the uniform start oscillates
    M = [[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    with pytest.raises(NotErgodicError):
        stationary_distribution(M, max_iter=1000)


def test_coefficient_examples():
    assert ergodicity_coefficient(np.tile([0.2, 0.3, 0.5], (3, 1))) == 0.0
    assert ergodicity_coefficient(np.eye(3)) == 1.0
    assert ergodicity_coefficient([[0.9, 0.1], [0.2, 0.8]]) == pytest.approx(0.7, abs=1e-15)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_coefficient_matches_vertex_enumeration(n, seed):
    r = np.random.default_rng(seed)
    H = r.dirichlet(np.full(n, 0.5), size=n)
    best = 0.0
    for i in range(n):
        for j in range(n):
            z = np.zeros(n)
            z[i] += 0.5
            z[j] -= 0.5
            best = max(best, np.abs(z @ H).sum())
    assert ergodicity_coefficient(H) == pytest.approx(best, abs=1e-14)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 5]))
def test_contraction(n, seed, m):
    r = np.random.default_rng(seed)
    H = r.dirichlet(np.full(n, 0.3), size=n)
    v1, v2 = r.dirichlet(np.ones(n)), r.dirichlet(np.ones(n))
    lhs = np.abs(np.linalg.matrix_power(H, m).T @ (v1 - v2)).sum()
    assert lhs <= ergodicity_coefficient(H) ** m * np.abs(v1 - v2).sum() + 1e-12


@given(small_mdps(), st.integers(0, 2**31 - 1))
def test_mixing_coefficient_bounds_every_policy(mdp, seed):
    r = np.random.default_rng(seed)
    gamma = mixing_coefficient(mdp)
    assert gamma < 1
    for _ in range(5):
        _, H = policy_transition(mdp, random_policy(r, mdp.n_states, mdp.n_actions))
        assert ergodicity_coefficient(H) == pytest.approx(gamma, abs=1e-12)


# solve_values

def test_constant_reward_has_no_advantage(rng):
    P = rng.dirichlet(np.ones(3), size=(3, 2))
    sol = solve_values(TabularMdp(P, np.full((3, 2), 0.4)), Policy.uniform(3, 2))
    assert sol.gain == pytest.approx(0.4, abs=1e-12)
    assert np.allclose(sol.state_values, 0, atol=1e-12)
    assert np.allclose(sol.action_values, 0, atol=1e-12)


def test_one_state_bandit():
    mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]))
    sol = solve_values(mdp, Policy.uniform(1, 2))
    assert sol.gain == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(sol.action_values, [[-0.5, 0.5]], atol=1e-12)


@given(mdp_and_policy())
def test_bellman_consistency(case):
    mdp, pi, _ = case
    sol = solve_values(mdp, pi)
    Q_rhs = mdp.rewards - sol.gain + mdp.transitions @ sol.state_values
    assert np.abs(sol.action_values - Q_rhs).max() <= 1e-9
    assert np.abs(sol.state_values - (pi.probs * sol.action_values).sum(axis=1)).max() <= 1e-9
    assert abs(sol.stationary_state @ sol.state_values) <= 1e-9
    P_pi, _ = policy_transition(mdp, pi)
    assert np.abs(sol.stationary_state @ P_pi - sol.stationary_state).max() <= 1e-10
    assert sol.gain == pytest.approx((sol.stationary_state_action * mdp.rewards).sum(), abs=1e-12)


def test_state_values_match_monte_carlo():
    # V(x) = E[sum_t (r_t - J) | x_0 = x]; fast mixing so 15 steps suffice
    mdp = generate_random_mdp(4, 2, 0.2, seed=11)
    pi = Policy(np.random.default_rng(0).dirichlet(np.ones(2), size=4))
    sol = solve_values(mdp, pi)
    n_chains, steps = 200_000, 15
    rng = np.random.default_rng(1)
    for x in range(4):
        S, A = simulate_chains(mdp, np.broadcast_to(pi.probs, (n_chains, 4, 2)), steps,
                               np.full(n_chains, x), rng)
        v_hat = (mdp.rewards[S, A] - sol.gain).sum(axis=1).mean()
        assert v_hat == pytest.approx(sol.state_values[x], abs=1e-2)


# performance difference

def test_performance_difference_same_policy(mdp4):
    pi = Policy.uniform(4, 2)
    lhs, rhs = performance_difference(mdp4, pi, pi)
    assert lhs == 0.0
    assert abs(rhs) <= 1e-15


@given(mdp_and_policy())
def test_performance_difference_identity(case):
    mdp, pi, r = case
    lhs, rhs = performance_difference(mdp, random_policy(r, mdp.n_states, mdp.n_actions), pi)
    assert abs(lhs - rhs) <= 1e-9


def test_optimal_reference_dominates(rng):
    mdp = generate_random_mdp(3, 2, 0.05, seed=4)
    best = max(enumerate_deterministic_gains(mdp), key=lambda t: t[1])[0]
    pi_star = Policy.deterministic(best, 2)
    for _ in range(20):
        lhs, _ = performance_difference(mdp, pi_star, random_policy(rng, 3, 2))
        assert lhs >= 0


# simulation

def test_deterministic_simulation_is_hand_unrolled():
    # cycle 0 -> 1 -> 2 -> 0 under action 0, stay under action 1
    P = np.zeros((3, 2, 3))
    for x in range(3):
        P[x, 0, (x + 1) % 3] = 1
        P[x, 1, x] = 1
    r = np.array([[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]])
    traj = simulate(TabularMdp(P, r), Policy.deterministic([0, 0, 0], 2), 5, start=1, rng=0)
    assert traj.states.tolist() == [1, 2, 0, 1, 2]
    assert traj.actions.tolist() == [0] * 5
    assert np.allclose(traj.rewards, [0.2, 0.3, 0.1, 0.2, 0.3])
    assert traj.next_state == 0


def test_simulation_is_seeded(mdp4):
    a = simulate(mdp4, Policy.uniform(4, 2), 200, rng=9)
    b = simulate(mdp4, Policy.uniform(4, 2), 200, rng=9)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)


def test_long_run_reward_matches_gain(mdp4):
    pi = Policy(np.random.default_rng(2).dirichlet(np.ones(2), size=4))
    J = solve_values(mdp4, pi).gain
    traj = simulate(mdp4, pi, 10**6, rng=5)
    # batch means absorb the autocorrelation
    batches = traj.rewards.reshape(1000, 1000).mean(axis=1)
    se = batches.std(ddof=1) / np.sqrt(len(batches))
    assert abs(traj.rewards.mean() - J) <= 3 * se


# optimal policy

def test_one_state_optimal_is_argmax():
    mdp = TabularMdp(np.ones((1, 3, 1)), np.array([[0.2, 0.9, 0.4]]))
    pi, J = find_optimal_policy(mdp)
    assert pi.probs.tolist() == [[0.0, 1.0, 0.0]]
    assert J == pytest.approx(0.9)


@given(st.integers(0, 2**31 - 1))
def test_optimal_matches_enumeration(seed):
    mdp = generate_random_mdp(3, 2, 0.02, seed)
    _, J = find_optimal_policy(mdp)
    assert J == pytest.approx(max(g for _, g in enumerate_deterministic_gains(mdp)), abs=1e-10)


def test_reward_shift_shifts_gain():
    base = generate_random_mdp(4, 3, 0.05, seed=8)
    half = TabularMdp(base.transitions, 0.5 * base.rewards)
    shifted = TabularMdp(base.transitions, 0.5 * base.rewards + 0.3)
    pi1, J1 = find_optimal_policy(half)
    pi2, J2 = find_optimal_policy(shifted)
    assert np.array_equal(pi1.probs, pi2.probs)
    assert J2 == pytest.approx(J1 + 0.3, abs=1e-12)


def test_size_limit(mdp4):
    with pytest.raises(SizeLimitError, match="disable regret"):
        find_optimal_policy(mdp4, max_pairs=4)
