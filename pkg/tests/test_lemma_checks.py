import numpy as np
import pandas as pd
import pytest

from conftest import setup_for
from errors import ValidationError
from lemma_checks import (
    check_elliptical_potential,
    check_gram_drift,
    check_optimism_rate,
    check_pilot_convergence,
    check_reverse_lipschitz,
    optimism_fraction,
    pilot_error_table,
)
from policies import OnlMnlPolicy
from simulator import RngStreams, make_realizable_env, run_episode


class TestReverseLipschitz:
    def test_one_dimensional_passes(self, rng):
        result = check_reverse_lipschitz(1, 1.0, 10_000, rng)
        assert result.passed
        assert result.margins.size == 10_000

    def test_inflated_constant_fails(self, rng):
        result = check_reverse_lipschitz(1, 1.0, 1_000, rng, kappa_scale=10.0)
        assert not result.passed
        assert result.witness["margin"] < 0

    def test_dimension_limit(self, rng):
        with pytest.raises(ValidationError):
            check_reverse_lipschitz(7, 1.0, 10, rng)


class TestEllipticalPotential:
    def test_empty(self):
        assert check_elliptical_potential([], [], 1.0, 4, 1.0).passed

    def test_first_bad_round(self):
        result = check_elliptical_potential([0.0, 0.0, 1.0, 1.0], [11, 12, 13, 14], 100.0, 2, 1.0)
        assert not result.passed
        assert result.witness["round"] == 13


class TestGramDrift:
    def rows(self, drifts):
        return pd.DataFrame({
            "round": [100, 200, 300],
            "min_eig": [5.0, 6.0, 7.0],
            "inv_drift": drifts,
            "beta_t": [0.1] * 3,
            "lhs_potential": [0.1] * 3,
            "rhs_potential": [1.0] * 3,
        })

    def test_healthy(self):
        assert check_gram_drift(self.rows([1e-12, 1e-11, 1e-12]), lam=5.0).passed

    def test_corrupted_log_names_first_bad_round(self):
        result = check_gram_drift(self.rows([1e-12, 0.5, 0.9]), lam=5.0)
        assert not result.passed
        assert result.witness["round"] == 200

    def test_eigenvalue_below_lambda(self):
        result = check_gram_drift(self.rows([0.0, 0.0, 0.0]), lam=5.5)
        assert result.witness["round"] == 100


class TestOptimismRate:
    def run(self, c_beta):
        env = make_realizable_env(d=2, m_hidden=2, seed=0, n_items=6, capacity=2, horizon=25)
        setup = setup_for(env, schedule={"t0_override": 10, "c_beta": c_beta})
        policy = OnlMnlPolicy(setup, RngStreams(0).generator("init"))
        return run_episode(env, policy, seed=0).frame()

    def test_huge_radius_is_always_optimistic(self):
        frame = self.run(1e6)
        assert optimism_fraction(frame) == 1.0
        assert check_optimism_rate({"a": frame}).passed

    def test_zero_radius_is_informational(self):
        frame = self.run(0.0)
        fraction = optimism_fraction(frame)
        assert 0.0 <= fraction <= 1.0
        result = check_optimism_rate({"a": frame}, threshold=0.9)
        assert result.details["runs"]["a"] == pytest.approx(fraction)

    def test_no_phase_two(self):
        frame = pd.DataFrame({"optimism_frac": [np.nan], "assortment": ["0 1"]})
        assert np.isnan(optimism_fraction(frame))


class TestPilotConvergence:
    def test_ratio_table(self):
        table = pd.DataFrame({
            "t0": [50, 100, 200] * 2,
            "seed": [0, 0, 0, 1, 1, 1],
            "error": [1.0, 0.5, 0.25, 2.0, 1.0, 0.5],
        })
        result = check_pilot_convergence(table)
        assert result.passed
        assert result.details["median_ratios"] == {"50->100": 0.5, "100->200": 0.5}

    def test_flat_errors_fail(self):
        table = pd.DataFrame({"t0": [50, 100], "seed": [0, 0], "error": [1.0, 1.0]})
        assert not check_pilot_convergence(table).passed

    def test_truth_initialised_linear_fit_is_accurate(self):
        table = pilot_error_table([400], [0], dim=2, n_items=10, capacity=3, samples=2000, estimator="linear", init_from_truth=True)
        assert table["error"].iloc[0] < 0.2

    def test_linear_error_decays(self):
        table = pilot_error_table([100, 400], [0, 1, 2], dim=2, n_items=10, capacity=3, samples=2000, estimator="linear")
        medians = table.groupby("t0")["error"].median()
        assert medians[400] < medians[100]
