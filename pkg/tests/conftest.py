import sys

import numpy as np
import pytest

from sharelora.data import generate_dataset, synthesize_ground_truth
from sharelora.mdp import make_random_mdp, uniform_policy
from sharelora.reward import LINEAR
from sharelora.rng import stream


def make_problem(seed=0, d1=4, d2=2, n_users=3, n_pairs=20, k=2, spectrum=(3.0, 2.0),
                 n_states=3, n_actions=2, horizon=2, head=LINEAR, theta_init="zero"):
    mdp = make_random_mdp(n_states, n_actions, horizon, 1.0, stream(seed, "mdp"), dims=(d1, d2))
    truth = synthesize_ground_truth(d1, d2, n_users, k, list(spectrum), theta_init, 1e6,
                                    stream(seed, "truth"))
    pol = uniform_policy(mdp)
    ds = generate_dataset(mdp, truth, n_pairs, pol, pol, head, seed)
    return mdp, truth, ds


@pytest.fixture
def problem():
    return make_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[num])
