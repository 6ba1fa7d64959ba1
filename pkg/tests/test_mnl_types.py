import math
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import chisquare

from errors import CapacityExceeded, DimensionMismatch, DuplicateIndex, EmptyAssortment, IndexOutOfRange, ValidationError
from mnl_types import (
    ChoiceRecord,
    ParamVector,
    RevenueVector,
    assortment_size_weights,
    make_assortment,
    make_context_set,
    project_to_ball,
    uniform_assortment_sample,
)


class TestMakeAssortment:
    def test_sorts_indices(self):
        assert make_assortment([2, 0], 5, 10).item_indices == (0, 2)

    def test_minimal_case(self):
        assert make_assortment([0], 1, 1).item_indices == (0,)

    def test_capacity_exceeded(self):
        with pytest.raises(CapacityExceeded):
            make_assortment([0, 1, 2, 3, 4, 5], 5, 10)

    def test_empty(self):
        with pytest.raises(EmptyAssortment):
            make_assortment([], 2, 4)

    def test_duplicate(self):
        with pytest.raises(DuplicateIndex):
            make_assortment([1, 1], 2, 4)

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            make_assortment([4], 2, 4)

    def test_canonical_form_is_stable(self, rng):
        for _ in range(100):
            size = int(rng.integers(1, 6))
            indices = rng.choice(12, size=size, replace=False)
            once = make_assortment(indices, 5, 12)
            assert make_assortment(once.item_indices, 5, 12) == once
            assert make_assortment(reversed(once.item_indices), 5, 12) == once

    def test_errors_are_value_errors(self):
        with pytest.raises(ValueError):
            make_assortment([], 2, 4)


class TestUniformAssortmentSample:
    def test_single_item(self, rng):
        for _ in range(20):
            assert uniform_assortment_sample(1, 1, rng).item_indices == (0,)

    def test_singletons_equally_likely(self, rng):
        counts = np.zeros(3)
        draws = 100_000
        for _ in range(draws):
            counts[uniform_assortment_sample(3, 1, rng).item_indices[0]] += 1
        np.testing.assert_allclose(counts / draws, 1 / 3, atol=0.01)

    def test_size_law(self, rng):
        np.testing.assert_allclose(assortment_size_weights(4, 2), [0.4, 0.6])
        draws = 100_000
        pairs = sum(len(uniform_assortment_sample(4, 2, rng)) == 2 for _ in range(draws))
        assert abs(pairs / draws - 0.6) < 0.01

    def test_uniform_over_every_set(self, rng):
        n_items, capacity, draws = 5, 2, 100_000
        sets = [s for k in range(1, capacity + 1) for s in combinations(range(n_items), k)]
        index = {s: i for i, s in enumerate(sets)}
        counts = np.zeros(len(sets))
        for _ in range(draws):
            counts[index[uniform_assortment_sample(n_items, capacity, rng).item_indices]] += 1
        assert len(sets) == 15
        assert chisquare(counts).pvalue > 1e-3

    def test_capacity_above_n(self, rng):
        S = uniform_assortment_sample(2, 5, rng)
        assert 1 <= len(S) <= 2


class TestContextSet:
    def test_shape(self):
        context = make_context_set(np.zeros((4, 2)), 3)
        assert (context.n_items, context.dim, context.round_index) == (4, 2, 3)

    def test_read_only(self):
        context = make_context_set(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            context.items[0, 0] = 1.0

    def test_rejects_vector(self):
        with pytest.raises(DimensionMismatch):
            make_context_set(np.zeros(3))

    def test_unit_ball(self):
        make_context_set([[0.6, 0.8]], enforce_unit_ball=True)
        with pytest.raises(ValidationError):
            make_context_set([[1.0, 1.0]], enforce_unit_ball=True)


class TestChoiceRecord:
    def test_positions(self):
        context = make_context_set(np.eye(4))
        record = ChoiceRecord.from_position(context, make_assortment([3, 1], 2, 4), 1)
        assert record.chosen == 3
        np.testing.assert_array_equal(record.one_hot, [0, 0, 1])

    def test_outside_option(self):
        context = make_context_set(np.eye(4))
        record = ChoiceRecord.from_position(context, make_assortment([0], 1, 4), None)
        assert record.position is None
        np.testing.assert_array_equal(record.one_hot, [1, 0])

    def test_chosen_must_be_offered(self):
        context = make_context_set(np.eye(4))
        with pytest.raises(ValidationError):
            ChoiceRecord(context, make_assortment([0], 1, 4), 2)


class TestRevenueAndParams:
    def test_revenue_range(self):
        assert RevenueVector.uniform(3).is_uniform
        with pytest.raises(ValidationError):
            RevenueVector(np.array([0.5, 1.5]))

    def test_param_bytes_are_little_endian(self):
        params = ParamVector(np.array([1.0, -2.5]))
        assert params.to_bytes()[:8] == np.array([1.0], dtype="<f8").tobytes()
        np.testing.assert_array_equal(ParamVector.from_bytes(params.to_bytes()).values, params.values)

    def test_param_radius(self):
        with pytest.raises(ValidationError):
            ParamVector(np.array([3.0, 4.0]), radius=1.0)

    def test_projection(self):
        np.testing.assert_allclose(project_to_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(project_to_ball(np.array([3.0, 4.0]), math.inf), [3.0, 4.0])
