"""Domain value types shared by every module: contexts, assortments, choices,
revenues and parameter vectors.

All types are frozen dataclasses over read-only numpy arrays, so they can be
shared between threads and pickled to worker processes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from errors import (
    CapacityExceeded,
    DimensionMismatch,
    DuplicateIndex,
    EmptyAssortment,
    IndexOutOfRange,
    ValidationError,
)

UNIT_BALL_SLACK = 1e-9


def frozen_array(values: Any, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ContextSet:
    items: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        items = self.items
        if not isinstance(items, np.ndarray) or items.flags.writeable:
            items = frozen_array(items)
            object.__setattr__(self, "items", items)
        if items.ndim != 2 or items.shape[0] < 1 or items.shape[1] < 1:
            raise DimensionMismatch(
                f"context must be an N x d matrix with N, d >= 1, got shape {items.shape}"
            )
        if self.round_index < 0:
            raise ValidationError(f"round index must be non-negative, got {self.round_index}")

    @property
    def n_items(self) -> int:
        return int(self.items.shape[0])

    @property
    def dim(self) -> int:
        return int(self.items.shape[1])

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        return self.items[np.asarray(indices, dtype=np.int64)]


def make_context_set(items: Any, round_index: int = 0, enforce_unit_ball: bool = False) -> ContextSet:
    context = ContextSet(frozen_array(items), round_index)
    if enforce_unit_ball:
        norms = np.linalg.norm(context.items, axis=1)
        worst = int(np.argmax(norms))
        if norms[worst] > 1.0 + UNIT_BALL_SLACK:
            raise ValidationError(
                f"feature vector {worst} has norm {norms[worst]:.6g} outside the unit ball"
            )
    return context


@dataclass(frozen=True)
class Assortment:
    item_indices: tuple[int, ...]
    capacity: int

    def __len__(self) -> int:
        return len(self.item_indices)

    def __iter__(self):
        return iter(self.item_indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.item_indices, dtype=np.int64)

    def label(self) -> str:
        return " ".join(str(i) for i in self.item_indices)


def make_assortment(indices: Iterable[int], capacity: int, n_items: int) -> Assortment:
    """Validate and canonicalise an offered set (sorted, distinct, within capacity)."""
    values = [int(i) for i in indices]
    if not values:
        raise EmptyAssortment("an assortment must offer at least one item")
    if len(set(values)) != len(values):
        raise DuplicateIndex(f"duplicate item index in {values}")
    for index in values:
        if index < 0 or index >= n_items:
            raise IndexOutOfRange(f"item index {index} outside [0, {n_items})")
    if capacity < 1 or len(values) > capacity:
        raise CapacityExceeded(f"{len(values)} items offered with capacity {capacity}")
    return Assortment(tuple(sorted(values)), int(capacity))


def assortment_size_weights(n_items: int, capacity: int) -> np.ndarray:
    """P(|S| = k) for k = 1..min(K, N) under the uniform law on non-empty sets."""
    top = min(capacity, n_items)
    counts = np.array([float(math.comb(n_items, k)) for k in range(1, top + 1)])
    return counts / counts.sum()


def uniform_assortment_sample(n_items: int, capacity: int, rng: np.random.Generator) -> Assortment:
    if n_items < 1 or capacity < 1:
        raise ValidationError(f"need n_items >= 1 and capacity >= 1, got {n_items}, {capacity}")
    weights = assortment_size_weights(n_items, capacity)
    size = int(rng.choice(weights.size, p=weights)) + 1
    chosen = rng.choice(n_items, size=size, replace=False)
    return Assortment(tuple(sorted(int(i) for i in chosen)), int(capacity))


@dataclass(frozen=True)
class ChoiceRecord:
    """One round of feedback. ``chosen`` is None for the outside option,
    otherwise the chosen item's index in [0, N)."""

    context: ContextSet
    assortment: Assortment
    chosen: int | None

    def __post_init__(self):
        if self.chosen is not None and self.chosen not in self.assortment.item_indices:
            raise ValidationError(
                f"chosen item {self.chosen} is not in the offered set {self.assortment.item_indices}"
            )

    @classmethod
    def from_position(cls, context: ContextSet, assortment: Assortment, position: int | None) -> "ChoiceRecord":
        chosen = None if position is None else assortment.item_indices[position]
        return cls(context, assortment, chosen)

    @property
    def position(self) -> int | None:
        if self.chosen is None:
            return None
        return self.assortment.item_indices.index(self.chosen)

    @property
    def one_hot(self) -> np.ndarray:
        """Indicator over (outside, S[0], S[1], ...)."""
        y = np.zeros(len(self.assortment) + 1)
        position = self.position
        y[0 if position is None else position + 1] = 1.0
        return y

    @property
    def item_one_hot(self) -> np.ndarray:
        return self.one_hot[1:]


@dataclass(frozen=True)
class RevenueVector:
    revenues: np.ndarray

    def __post_init__(self):
        values = self.revenues
        if not isinstance(values, np.ndarray) or values.flags.writeable:
            values = frozen_array(values)
            object.__setattr__(self, "revenues", values)
        if values.ndim != 1 or values.size < 1:
            raise DimensionMismatch("revenues must be a non-empty vector")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("revenues must lie in [0, 1]")

    @classmethod
    def uniform(cls, n_items: int, value: float = 1.0) -> "RevenueVector":
        return cls(frozen_array(np.full(n_items, float(value))))

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.revenues == self.revenues[0]))

    def __len__(self) -> int:
        return int(self.revenues.size)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    radius: float | None = field(default=None, compare=False)

    def __post_init__(self):
        values = self.values
        if not isinstance(values, np.ndarray) or values.flags.writeable:
            values = frozen_array(values)
            object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise DimensionMismatch("parameter vector must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValidationError("parameter vector has non-finite entries")
        if self.radius is not None and np.linalg.norm(values) > self.radius * (1.0 + UNIT_BALL_SLACK):
            raise ValidationError(f"parameter norm exceeds projection radius {self.radius}")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        return cls(frozen_array(np.frombuffer(data, dtype="<f8")))


def project_to_ball(values: np.ndarray, radius: float | None) -> np.ndarray:
    if radius is None or not math.isfinite(radius):
        return values
    norm = float(np.linalg.norm(values))
    if norm <= radius:
        return values
    return values * (radius / norm)
