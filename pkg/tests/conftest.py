import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from rl_lab.envs import generate_random_mdp
from rl_lab.mdp import Policy

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def small_mdps(draw, max_states=5, max_actions=3):
    S = draw(st.integers(1, max_states))
    A = draw(st.integers(1, max_actions))
    floor = draw(st.floats(0.01, 1.0)) / S
    seed = draw(st.integers(0, 2**31 - 1))
    return generate_random_mdp(S, A, floor, seed)


@st.composite
def mdp_and_policy(draw, max_states=5, max_actions=3):
    mdp = draw(small_mdps(max_states, max_actions))
    rng = np.random.default_rng(draw(st.integers(0, 2**31 - 1)))
    return mdp, Policy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)), rng


def random_policy(rng, S, A):
    return Policy(rng.dirichlet(np.ones(A), size=S))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mdp4():
    return generate_random_mdp(4, 2, 0.05, seed=3)
