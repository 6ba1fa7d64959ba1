import math

import numpy as np
import pytest

from confidence import (
    GramState,
    Schedule,
    elliptical_potential_check,
    elliptical_potential_curve,
    mahalanobis_inv_norm,
    mahalanobis_inv_norms,
    optimistic_utility,
)
from errors import ScheduleOutOfRange, ValidationError


class TestGramState:
    def test_empty_update_is_noop(self):
        state = GramState(2, 1.0)
        state.update(np.zeros((0, 2)))
        np.testing.assert_array_equal(state.V, np.eye(2))
        assert state.round_count == 0

    def test_single_update(self):
        state = GramState(2, 1.0).update([np.array([1.0, 0.0])])
        np.testing.assert_allclose(state.V, np.diag([2.0, 1.0]))
        np.testing.assert_allclose(state.V_inv, np.diag([0.5, 1.0]))

    @pytest.mark.parametrize("d_w", [5, 16, 64])
    def test_sherman_morrison_matches_direct_inverse(self, rng, d_w):
        state = GramState(d_w, 0.5, reinvert_every=None)
        for _ in range(1000):
            state.update(rng.standard_normal((1, d_w)))
        np.testing.assert_allclose(state.V_inv, np.linalg.inv(state.V), atol=1e-8)
        assert state.update_count == 1000
        assert state.audit().inv_drift < 1e-8

    def test_periodic_audit(self, rng):
        state = GramState(3, 1.0, reinvert_every=10)
        for _ in range(25):
            state.update(rng.standard_normal((2, 3)))
        assert [audit.round_count for audit in state.audits] == [10, 20]
        assert all(audit.inv_drift < 1e-8 for audit in state.audits)
        assert all(audit.min_eig >= 1.0 - 1e-9 for audit in state.audits)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValidationError):
            GramState(2, 0.0)


class TestMahalanobis:
    def test_zero(self):
        assert mahalanobis_inv_norm(GramState(3, 2.0), np.zeros(3)) == 0.0

    def test_isotropic(self):
        assert mahalanobis_inv_norm(GramState(3, 4.0), np.array([1.0, 0.0, 0.0])) == pytest.approx(0.5)

    def test_matches_solve(self, rng):
        state = GramState(4, 0.3)
        state.update(rng.standard_normal((6, 4)))
        G = rng.standard_normal((5, 4))
        expected = np.sqrt(np.einsum("nd,nd->n", G, np.linalg.solve(state.V, G.T).T))
        np.testing.assert_allclose(mahalanobis_inv_norms(state, G), expected, atol=1e-10)


class TestSchedule:
    def test_formulas(self):
        schedule = Schedule(horizon=1000, d_w=16, kappa=0.25, c_lambda=1.0, c_beta=1.0)
        assert schedule.t0_formula == math.ceil(8 * 16 * math.sqrt(1000))
        assert schedule.t0 == 1000
        assert schedule.lam == pytest.approx(32 * 16 * math.sqrt(1000))
        assert schedule.beta(500) == pytest.approx(256 * 16 * 0.5)

    def test_t0_clamped_to_horizon(self):
        schedule = Schedule(horizon=100, d_w=16, kappa=0.1)
        assert schedule.t0_formula > 100
        assert schedule.t0 == 100

    def test_override(self):
        assert Schedule(horizon=1000, d_w=16, t0_override=50).t0 == 50

    def test_constant_mode(self):
        schedule = Schedule(horizon=1000, d_w=4, kappa=0.25, mu=2.0, c_beta=1.0, beta_mode="constant")
        assert schedule.beta(10) == schedule.beta(900) == pytest.approx(256 * 4 / 4)

    def test_rejects_kappa(self):
        with pytest.raises(ValidationError):
            Schedule(horizon=10, d_w=2, kappa=0.3)


class TestOptimisticUtility:
    def schedule(self, c_beta):
        return Schedule(horizon=100, d_w=2, kappa=0.25, c_lambda=1.0, c_beta=c_beta, t0_override=10)

    def test_zero_radius(self):
        state = GramState(2, 4.0)
        z = optimistic_utility(state, self.schedule(0.0), 20, 0.7, np.array([1.0, 0.0]), C_h=3.0)
        assert z == pytest.approx(0.7)

    def test_closed_form(self):
        # beta_t = c_beta * 256 * 2 * t / 100 = 4 at t = 50
        schedule = self.schedule(4.0 / (256 * 2 * 0.5))
        assert schedule.beta(50) == pytest.approx(4.0)
        z = optimistic_utility(GramState(2, 4.0), schedule, 50, 0.3, np.array([1.0, 0.0]), C_h=0.0)
        assert z == pytest.approx(1.3)

    def test_phase_one_rounds_rejected(self):
        with pytest.raises(ScheduleOutOfRange):
            optimistic_utility(GramState(2, 1.0), self.schedule(1.0), 10, 0.0, np.zeros(2), 0.0)
        with pytest.raises(ScheduleOutOfRange):
            optimistic_utility(GramState(2, 1.0), self.schedule(1.0), 101, 0.0, np.zeros(2), 0.0)


class TestEllipticalPotential:
    def schedule(self):
        return Schedule(horizon=1000, d_w=4, kappa=0.25, c_lambda=1e-3, t0_override=10)

    def test_empty(self):
        assert elliptical_potential_check([], self.schedule(), C_g=1.0)

    def test_recorded_potentials_hold(self, rng):
        schedule = self.schedule()
        state = GramState(4, schedule.lam)
        potentials = []
        for _ in range(200):
            G = rng.standard_normal((3, 4))
            G /= np.maximum(1.0, np.linalg.norm(G, axis=1, keepdims=True))
            potentials.append(float(np.max(mahalanobis_inv_norms(state, G) ** 2)))
            state.update(G)
        assert elliptical_potential_check(potentials, schedule, C_g=1.0)

    def test_adversarial_trace_fails(self):
        assert not elliptical_potential_check([1.0] * 500, self.schedule(), C_g=0.01)

    def test_bound_uses_the_round_index(self):
        lhs, rhs = elliptical_potential_curve([0.5, 2.0, 0.25], [11, 12, 13], lam=10.0, d_w=2, C_g=2.0)
        np.testing.assert_allclose(lhs, [0.5, 1.5, 1.75])
        np.testing.assert_allclose(rhs, [4.0 * math.log1p(t * 4.0 / 20.0) for t in (11, 12, 13)])

    def test_bound_is_zero_before_any_round(self):
        _, rhs = elliptical_potential_curve([0.0], [0], lam=1.0, d_w=3, C_g=1.0)
        assert rhs[0] == 0.0
