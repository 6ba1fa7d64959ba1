import math
from itertools import combinations

import numpy as np
import pytest

from assortment_opt import AssortmentSolver, best_assortment, oracle_assortment, oracle_optimal_reward
from errors import BruteForceLimitExceeded, InvalidK, LengthMismatch, MethodRevenueMismatch, NonFiniteUtility
from mnl_choice import expected_reward
from mnl_types import RevenueVector


def exhaustive(u, r, K):
    best = -math.inf
    for size in range(1, K + 1):
        sets = np.array(list(combinations(range(len(u)), size)))
        weights = np.exp(u[sets])
        best = max(best, float(np.max((weights * r[sets]).sum(axis=1) / (1.0 + weights.sum(axis=1)))))
    return best


class TestBestAssortment:
    def test_top_k_uniform(self):
        solution = best_assortment([3.0, 1.0, 2.0, 0.0], RevenueVector.uniform(4), 2)
        assert solution.assortment.item_indices == (0, 2)
        expected = (math.exp(3) + math.exp(2)) / (1 + math.exp(3) + math.exp(2))
        assert solution.reward == pytest.approx(expected)

    def test_single_item(self):
        solution = best_assortment([0.0], [1.0], 1)
        assert solution.assortment.item_indices == (0,)
        assert solution.reward == pytest.approx(0.5)

    def test_low_utility_high_revenue_item_wins(self):
        u, r = [2.0, 1.9, 0.0], [0.1, 0.1, 1.0]
        for method in ("brute_force", "revenue_ordered", "auto"):
            solution = best_assortment(u, r, 1, AssortmentSolver(method))
            assert solution.assortment.item_indices == (2,)

    def test_methods_bounded_by_brute_force(self, rng):
        for _ in range(20):
            u = rng.uniform(-2, 2, 8)
            r = rng.uniform(0, 1, 8)
            optimum = best_assortment(u, r, 3, AssortmentSolver("brute_force"))
            assert optimum.reward == pytest.approx(exhaustive(u, r, 3))
            heuristic = best_assortment(u, r, 3, AssortmentSolver("revenue_ordered"))
            assert heuristic.reward <= optimum.reward + 1e-12
            assert not heuristic.certified
            top = best_assortment(u, np.ones(8), 3)
            assert expected_reward(u[top.assortment.as_array()], r[top.assortment.as_array()]) <= optimum.reward + 1e-12

    def test_uniform_equals_top_k_reward(self, rng):
        u = rng.standard_normal(100)
        solution = best_assortment(u, RevenueVector.uniform(100), 5)
        top = np.sort(np.argsort(-u)[:5])
        np.testing.assert_array_equal(solution.assortment.as_array(), top)
        assert solution.reward == pytest.approx(expected_reward(u[top], np.ones(5)))

    def test_ties_prefer_smaller_index(self):
        assert best_assortment([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 2).assortment.item_indices == (0, 1)

    def test_large_utilities(self):
        solution = best_assortment([800.0, 799.0, -5.0], [1.0, 1.0, 1.0], 2)
        assert solution.reward == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(InvalidK):
            best_assortment([0.0, 1.0], [1.0, 1.0], 0)
        with pytest.raises(InvalidK):
            best_assortment([0.0, 1.0], [1.0, 1.0], 3)
        with pytest.raises(LengthMismatch):
            best_assortment([0.0, 1.0], [1.0], 1)
        with pytest.raises(NonFiniteUtility):
            best_assortment([np.inf, 1.0], [1.0, 1.0], 1)
        with pytest.raises(MethodRevenueMismatch):
            best_assortment([0.0, 1.0], [1.0, 0.5], 1, AssortmentSolver("top_k_uniform"))
        with pytest.raises(BruteForceLimitExceeded):
            best_assortment(np.zeros(5), np.linspace(0, 1, 5), 2, AssortmentSolver("brute_force", brute_force_limit=4))


class TestOracle:
    def test_non_uniform_uses_enumeration(self, rng):
        u = rng.uniform(-2, 2, 6)
        r = rng.uniform(0, 1, 6)
        assert oracle_optimal_reward(u, r, 2) == pytest.approx(exhaustive(u, r, 2))

    def test_uniform(self):
        assert oracle_assortment([0.0, 5.0, 1.0], [1.0, 1.0, 1.0], 1).assortment.item_indices == (1,)

    def test_matches_enumeration_on_small_instances(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            K = int(rng.integers(1, min(n, 4) + 1))
            u = rng.uniform(-3, 3, n)
            r = rng.uniform(0, 1, n)
            solution = oracle_assortment(u, r, K)
            assert len(solution.assortment) <= K
            assert solution.reward == pytest.approx(exhaustive(u, r, K), abs=1e-12)

    def test_uniform_revenue_offers_top_k(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            K = int(rng.integers(1, min(n, 4) + 1))
            u = rng.uniform(-3, 3, n)
            solution = oracle_assortment(u, np.ones(n), K)
            np.testing.assert_array_equal(solution.assortment.as_array(), np.sort(np.argsort(-u)[:K]))
            assert solution.reward == pytest.approx(exhaustive(u, np.ones(n), K), abs=1e-12)

    def test_optimal_value_monotone_in_utilities(self, rng):
        for _ in range(500):
            n = int(rng.integers(1, 9))
            K = int(rng.integers(1, min(n, 3) + 1))
            u = rng.uniform(-3, 3, n)
            r = rng.uniform(0, 1, n)
            raised = u + rng.exponential(0.5, n) * (rng.random(n) < 0.5)
            assert oracle_optimal_reward(raised, r, K) >= oracle_optimal_reward(u, r, K) - 1e-12
