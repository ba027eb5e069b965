import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import mdp_and_policy
from rl_lab.envs import generate_random_mdp
from rl_lab.estimation import (PhaseDataset, WeightEstimate, average_weights, b_step_returns,
                               block_schedule, empirical_gain, lsmc_fit, q_value, truncation_horizon)
from rl_lab.features import OneHotFeatures
from rl_lab.mdp import (Policy, mixing_coefficient, simulate_chains, solve_values,
                        truncated_action_values)


def data(rewards, **kw):
    r = np.asarray(rewards, dtype=float)
    return PhaseDataset(1, np.zeros(len(r), dtype=int), np.zeros(len(r), dtype=int), r, **kw)


# block schedule

def test_schedule_examples():
    s = block_schedule(8, 2, 2)
    assert s.odd_starts.tolist() == [0, 4] and s.even_starts.tolist() == [2, 6]
    s = block_schedule(10, 3, 1)
    assert s.odd_starts.tolist() == [0] and s.even_starts.tolist() == [3]
    with pytest.raises(ValueError):
        block_schedule(10, 3, 2)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 50))
def test_schedule_invariants(b, m, extra):
    s = block_schedule(2 * m * b + extra, b, m)
    assert len(s.odd_starts) == len(s.even_starts) == m
    assert not set(s.odd_starts) & set(s.even_starts)
    assert np.all(np.diff(s.odd_starts) == 2 * b) and np.all(np.diff(s.even_starts) == 2 * b)


# gain

def test_gain_examples():
    assert empirical_gain(data([0.3] * 6)) == pytest.approx(0.3)
    sched = block_schedule(4, 1, 2)
    assert sched.even_starts.tolist() == [1, 3]
    assert empirical_gain(data([1, 0, 1, 0]), sched) == 0.0
    assert empirical_gain(data([1, 0, 1, 0])) == 0.5


def test_gain_counts_phantom_failure_steps():
    assert empirical_gain(data([1, 1], padding=2)) == 0.5


# b-step returns

def test_returns_example():
    t, R = b_step_returns(data([1, 0, 1]), 1, 0.5)
    assert t.tolist() == [0, 1]
    assert np.allclose(R, [0.0, 0.0])


def test_returns_centred_at_gain():
    _, R = b_step_returns(data([0.25] * 10), 3, 0.25)
    assert np.allclose(R, 0.0)


def test_returns_bad_horizon():
    with pytest.raises(ValueError):
        b_step_returns(data([1, 0, 1]), 0, 0.5)
    with pytest.raises(ValueError):
        b_step_returns(data([1, 0, 1]), 3, 0.5)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=40), st.integers(1, 10), st.floats(0, 1))
def test_returns_match_direct_sum(rewards, b, gain):
    if b >= len(rewards):
        return
    t, R = b_step_returns(data(rewards), b, gain)
    assert t.tolist() == list(range(len(rewards) - b))
    for ti, Ri in zip(t, R):
        assert Ri == pytest.approx(sum(r - gain for r in rewards[ti:ti + b + 1]), abs=1e-12)


def test_returns_zero_pad_after_failure():
    failed = np.array([False, True, False, False, False])
    t, R = b_step_returns(data([1, 1, 1, 1, 1], failed=failed), 2, 0.5)
    # windows from 0 and 1 reach the failure at step 1 and are completed with zeros
    assert t.tolist() == [0, 1, 2]
    assert np.allclose(R, [2 - 1.5, 1 - 1.5, 3 - 1.5])


def test_returns_drop_windows_across_time_limit():
    cut = np.array([False, False, True, False, False])
    t, _ = b_step_returns(data([0.0] * 5, cut=cut), 1, 0.0)
    assert t.tolist() == [0, 1, 3]


def test_analysis_mode_starts():
    sched = block_schedule(12, 2, 3)
    t, R = b_step_returns(data(np.arange(12) % 2), 2, 0.0, starts=sched.odd_starts)
    assert t.tolist() == [0, 4, 8]
    assert R.tolist() == [1.0, 1.0, 1.0]


def test_jsonl_rows_validate():
    schema = {"type": "object", "required": ["t", "x", "a", "r", "R"],
              "properties": {"t": {"type": "integer"}, "x": {"type": "integer"}, "a": {"type": "integer"},
                             "r": {"type": "number"}, "R": {"type": "number"}},
              "additionalProperties": False}
    d = data([1, 0, 1, 1])
    t, R = b_step_returns(d, 1, 0.5)
    lines = d.to_jsonl(t, R).splitlines()
    assert len(lines) == 3
    for line in lines:
        jsonschema.validate(json.loads(line), schema)


# ridge fit

def test_scalar_least_squares_is_mean():
    R = np.array([1.0, 2.0, 6.0])
    assert lsmc_fit(np.ones((3, 1)), R, 0.0).w[0] == pytest.approx(R.mean())


def test_heavy_ridge_shrinks(rng):
    phi = rng.uniform(-1, 1, size=(40, 3))
    R = rng.uniform(-1, 1, size=40)
    w = lsmc_fit(phi, R, 1e9).w
    assert np.linalg.norm(w) <= 1e-6 * np.linalg.norm(phi.T @ R)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0))
def test_ridge_matches_normal_equations(seed, alpha):
    r = np.random.default_rng(seed)
    phi, R = r.normal(size=(50, 3)), r.normal(size=50)
    expect = np.linalg.solve(phi.T @ phi + alpha * np.eye(3), phi.T @ R)
    assert np.allclose(lsmc_fit(phi, R, alpha).w, expect, atol=1e-10)


def test_singular_without_ridge():
    phi = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(np.linalg.LinAlgError):
        lsmc_fit(phi, np.ones(2), 0.0)


def test_clipping():
    est = lsmc_fit(np.ones((2, 1)), np.array([10.0, 10.0]), 0.0, max_norm=1.0)
    assert est.clipped and est.w[0] == pytest.approx(1.0)


# averaging and q_value

def test_average_examples(rng):
    w = rng.normal(size=4)
    e = WeightEstimate(w, 1.0, (1,))
    assert np.array_equal(average_weights([e]).w, w)
    assert np.allclose(average_weights([e, WeightEstimate(-w, 1.0, (2,))]).w, 0)
    ws = rng.normal(size=(3, 4))
    got = average_weights([WeightEstimate(v, 1.0) for v in ws]).w
    assert np.allclose(got, [(ws[0, j] + ws[1, j] + ws[2, j]) / 3 for j in range(4)])
    with pytest.raises(ValueError):
        average_weights([WeightEstimate(np.zeros(2), 1.0), WeightEstimate(np.zeros(3), 1.0)])
    with pytest.raises(ValueError):
        average_weights([])


def test_q_value_examples(rng):
    assert q_value(np.zeros(3), rng.normal(size=3)) == 0.0
    w = np.array([0.5, -2.0, 3.0])
    assert q_value(w, OneHotFeatures(3, 1).featurize(1, 0)) == -2.0
    phi = rng.normal(size=3)
    assert q_value(WeightEstimate(w, 1.0), phi) == pytest.approx(0.5 * phi[0] - 2.0 * phi[1] + 3.0 * phi[2])
    with pytest.raises(ValueError):
        q_value(w, np.ones(2))


# truncation

def test_truncation_horizon():
    assert truncation_horizon(0.0) == 1
    assert truncation_horizon(0.5, 1e-3) == 10  # 0.5^10 < 1e-3 < 0.5^9
    with pytest.raises(ValueError):
        truncation_horizon(1.0)


@given(mdp_and_policy(), st.integers(0, 30))
def test_truncation_bias_bound(case, b):
    mdp, pi, _ = case
    gamma = mixing_coefficient(mdp)
    gap = np.abs(truncated_action_values(mdp, pi, b) - solve_values(mdp, pi).action_values).max()
    assert gap <= 2 * gamma ** (b + 1) / (1 - gamma) + 1e-12


def test_fit_converges_with_phase_length():
    # median error over 10 seeds decreases as the number of blocks doubles
    mdp = generate_random_mdp(4, 2, 0.1, seed=5)
    pi = Policy(np.random.default_rng(7).dirichlet(np.ones(2) * 3, size=4))
    F = OneHotFeatures(4, 2)
    exact = F.weights_from_table(solve_values(mdp, pi).action_values)
    b = truncation_horizon(mixing_coefficient(mdp), 1e-4)
    ms = [2**j for j in range(4, 11)]
    tau = 2 * ms[-1] * b
    S, A = simulate_chains(mdp, np.broadcast_to(pi.probs, (10, 4, 2)), tau, np.zeros(10, int),
                           np.random.default_rng(3))
    med = []
    for m in ms:
        errs = []
        for c in range(10):
            n = 2 * m * b
            d = PhaseDataset(1, S[c, :n], A[c, :n], mdp.rewards[S[c, :n], A[c, :n]])
            sched = block_schedule(n, b, m)
            t, R = b_step_returns(d, b, empirical_gain(d, sched), starts=sched.odd_starts)
            w = lsmc_fit(F.featurize_batch(d.states[t], d.actions[t]), R, 1e-3).w
            errs.append(np.linalg.norm(w - exact))
        med.append(np.median(errs))
    assert all(x > y for x, y in zip(med, med[1:])), med
