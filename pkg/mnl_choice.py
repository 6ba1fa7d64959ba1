"""MNL probability maths: choice probabilities, sampling, expected reward and
the reverse-Lipschitz constant of the item-probability map.

The outside option always takes part as utility 0; normalisers are computed
with a max-shift so utilities in the hundreds neither overflow nor break the
sum-to-one property.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from errors import LengthMismatch, NonFiniteUtility, ValidationError
from mnl_types import uniform_assortment_sample

MAX_GRID_POINTS = 200_000


@dataclass(frozen=True)
class ChoiceDistribution:
    p_outside: float
    p_items: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        """(outside, item_0, item_1, ...)"""
        return np.concatenate([[self.p_outside], self.p_items])


def _as_utilities(utilities) -> np.ndarray:
    u = np.asarray(utilities, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(u)):
        raise NonFiniteUtility(f"utilities must be finite, got {u}")
    return u


def choice_probabilities(utilities) -> ChoiceDistribution:
    u = _as_utilities(utilities)
    probabilities = softmax(np.concatenate([[0.0], u]))
    return ChoiceDistribution(float(probabilities[0]), probabilities[1:])


def log_normalizer(utilities: np.ndarray, axis: int = -1) -> np.ndarray:
    """log(1 + sum_j exp(u_j)) along ``axis``; -inf entries are absent items."""
    return np.logaddexp(0.0, logsumexp(utilities, axis=axis))


def item_probabilities(A: np.ndarray) -> np.ndarray:
    """The map h(a)_i = exp(a_i) / (1 + sum_j exp(a_j)), row-wise."""
    A = np.asarray(A, dtype=np.float64)
    return np.exp(A - log_normalizer(A)[..., None])


def sample_choice(dist: ChoiceDistribution, rng: np.random.Generator) -> int | None:
    """One multinomial draw: None for the outside option, else the item's
    position within the offered set."""
    probabilities = dist.probabilities
    draw = int(rng.choice(probabilities.size, p=probabilities / probabilities.sum()))
    return None if draw == 0 else draw - 1


def expected_reward(utilities, revenues) -> float:
    u = _as_utilities(utilities)
    r = np.asarray(revenues, dtype=np.float64).reshape(-1)
    if u.size != r.size:
        raise LengthMismatch(f"{u.size} utilities but {r.size} revenues")
    if u.size == 0:
        return 0.0
    return float(choice_probabilities(u).p_items @ r)


def reward_gap_bound_check(u, v, revenues) -> bool:
    """|R(u) - R(v)| <= max_i |u_i - v_i| for revenues bounded by 1."""
    u = _as_utilities(u)
    v = _as_utilities(v)
    r = np.asarray(revenues, dtype=np.float64).reshape(-1)
    if not (u.size == v.size == r.size):
        raise LengthMismatch(f"lengths differ: {u.size}, {v.size}, {r.size}")
    if u.size == 0:
        return True
    gap = abs(expected_reward(u, r) - expected_reward(v, r))
    return gap <= float(np.max(np.abs(u - v))) + 1e-12


def _curvature(points: np.ndarray) -> np.ndarray:
    h = item_probabilities(points)
    outside = 1.0 - h.sum(axis=-1)
    return (h * outside[..., None]).min(axis=-1)


def reverse_lipschitz_constant(dim: int, utility_cap: float, grid_resolution: int = 21) -> float:
    """Minimum of h_i(a) (1 - sum_j h_j(a)) over the ball ||a|| <= C.

    Grid points outside the ball are pulled radially onto the sphere, where
    the minimum lives. A one-parameter family a = (-C cos t, C sin t / sqrt(dim - 1), ...)
    covering the symmetric extremal directions is evaluated as well, and the
    smaller of the two minima is returned.
    """
    if dim < 1:
        raise ValidationError(f"dimension must be >= 1, got {dim}")
    if utility_cap < 0:
        raise ValidationError(f"utility cap must be non-negative, got {utility_cap}")
    C = float(utility_cap)
    resolution = max(2, int(grid_resolution))
    resolution = min(resolution, max(2, int(MAX_GRID_POINTS ** (1.0 / dim))))
    axis = np.linspace(-C, C, resolution)
    grid = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    norms = np.linalg.norm(grid, axis=1)
    outside = norms > C
    grid[outside] *= (C / norms[outside])[:, None]
    best = float(_curvature(grid).min())

    angles = np.linspace(0.0, np.pi, 8 * resolution + 1)
    family = np.zeros((angles.size, dim))
    family[:, 0] = -C * np.cos(angles)
    if dim > 1:
        family[:, 1:] = (C * np.sin(angles) / math.sqrt(dim - 1))[:, None]
    return min(best, float(_curvature(family).min()))


def sample_kappa(
    values: Callable[[np.ndarray, np.ndarray], np.ndarray],
    sample_params: Callable[[np.random.Generator], np.ndarray],
    sample_context: Callable[[np.random.Generator], np.ndarray],
    capacity: int,
    rng: np.random.Generator,
    n_samples: int = 1000,
) -> float:
    """Smallest p(0|X,S,w) p(i|X,S,w) seen over random (w, X, S) draws.

    The instance constant is a minimum over the whole parameter class; the
    sampled value is an estimate to guide the schedule's ``kappa`` setting.
    """
    smallest = 0.25
    for _ in range(n_samples):
        w = sample_params(rng)
        X = sample_context(rng)
        S = uniform_assortment_sample(X.shape[0], capacity, rng)
        dist = choice_probabilities(values(w, X[S.as_array()]))
        smallest = min(smallest, float(dist.p_outside * dist.p_items.min()))
    return smallest
