import numpy as np
import pytest

from assortment_opt import oracle_assortment
from estimation import OptimizerConfig
from policies import Policy, PolicySetup, RoundDiagnostics
from simulator import Environment, make_realizable_env
from utility_models import LinearUtility, TwoLayerSigmoidNet


class OraclePolicy(Policy):
    """Truth-aware policy: offers the optimal set under the true utilities."""

    name = "oracle"

    def __init__(self, setup: PolicySetup, env: Environment):
        super().__init__(setup)
        self.env = env

    def choose(self, context, revenues, rng):
        self.diagnostics = RoundDiagnostics()
        return oracle_assortment(self.env.true_utilities(context), revenues, self.capacity).assortment

    def update(self, record):
        self.t += 1


def setup_for(env: Environment, estimator=None, optimizer=None, schedule=None) -> PolicySetup:
    return PolicySetup(
        dim=env.dim,
        capacity=env.capacity,
        horizon=env.horizon,
        estimator=estimator or TwoLayerSigmoidNet(env.dim, 3),
        optimizer=optimizer or OptimizerConfig(iterations=100, per_round_iterations=5),
        schedule=schedule or {},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_env():
    return make_realizable_env(d=3, m_hidden=3, seed=0, n_items=8, capacity=3, horizon=40)


@pytest.fixture
def oracle_policy(small_env):
    return OraclePolicy(setup_for(small_env), small_env)


@pytest.fixture
def linear_model():
    return LinearUtility(2)


@pytest.fixture
def net():
    return TwoLayerSigmoidNet(3, 4)
