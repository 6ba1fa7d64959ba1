"""Assortment selection: maximise sum_i r_i e^{u_i} / (1 + sum_i e^{u_i})
over non-empty sets of at most K items."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, islice

import numpy as np

from errors import (
    BruteForceLimitExceeded,
    InvalidK,
    LengthMismatch,
    MethodRevenueMismatch,
    NonFiniteUtility,
    ValidationError,
)
from mnl_types import Assortment, RevenueVector

SOLVER_METHODS = {"brute_force", "top_k_uniform", "revenue_ordered", "auto"}
BRUTE_FORCE_CHUNK = 65_536


@dataclass(frozen=True)
class AssortmentSolver:
    method: str = "top_k_uniform"
    brute_force_limit: int = 20

    def __post_init__(self):
        if self.method not in SOLVER_METHODS:
            raise ValidationError(f"solver method must be one of {sorted(SOLVER_METHODS)}, got {self.method!r}")
        if self.brute_force_limit < 1:
            raise ValidationError("brute_force_limit must be >= 1")


@dataclass(frozen=True)
class AssortmentSolution:
    assortment: Assortment
    reward: float
    # False when the set came from the revenue-ordered heuristic under a binding capacity
    certified: bool = True


def _inputs(utilities, revenues, K: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(utilities, dtype=np.float64).reshape(-1)
    r = revenues.revenues if isinstance(revenues, RevenueVector) else np.asarray(revenues, dtype=np.float64).reshape(-1)
    if u.size < 1:
        raise ValidationError("at least one item is required")
    if u.size != r.size:
        raise LengthMismatch(f"{u.size} utilities but {r.size} revenues")
    if not np.all(np.isfinite(u)):
        raise NonFiniteUtility("utilities must be finite")
    if K < 1 or K > u.size:
        raise InvalidK(f"K must lie in [1, {u.size}], got {K}")
    return u, r


def _is_uniform(r: np.ndarray) -> bool:
    return bool(np.all(r == r[0]))


def set_rewards(u: np.ndarray, r: np.ndarray, sets: np.ndarray) -> np.ndarray:
    """Expected reward of each row of ``sets`` (index arrays of equal length)."""
    shift = max(float(u.max()), 0.0)
    weights = np.exp(u - shift)
    w = weights[sets]
    return (w * r[sets]).sum(axis=1) / (math.exp(-shift) + w.sum(axis=1))


def _solution(u, r, indices, K: int, certified: bool) -> AssortmentSolution:
    chosen = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    reward = float(set_rewards(u, r, chosen[None, :])[0])
    return AssortmentSolution(Assortment(tuple(int(i) for i in chosen), K), reward, certified)


def _top_k(scores: np.ndarray, K: int, among: np.ndarray | None = None) -> np.ndarray:
    """Indices of the K largest scores, ties to the smaller index."""
    pool = np.arange(scores.size) if among is None else np.sort(among)
    order = np.argsort(-scores[pool], kind="stable")
    return pool[order[:K]]


def _brute_force(u, r, K: int, limit: int) -> AssortmentSolution:
    N = u.size
    if N > limit:
        raise BruteForceLimitExceeded(f"brute force is limited to N <= {limit}, got N = {N}")
    best_reward, best_set = -math.inf, None
    for size in range(1, K + 1):
        subsets = combinations(range(N), size)
        while True:
            chunk = np.array(list(islice(subsets, BRUTE_FORCE_CHUNK)), dtype=np.int64)
            if chunk.size == 0:
                break
            rewards = set_rewards(u, r, chunk)
            j = int(np.argmax(rewards))
            if rewards[j] > best_reward:
                best_reward, best_set = float(rewards[j]), chunk[j]
    return AssortmentSolution(Assortment(tuple(int(i) for i in best_set), K), best_reward, True)


def _revenue_ordered(u, r, K: int) -> AssortmentSolution:
    N = u.size
    by_revenue = np.argsort(-r, kind="stable")
    candidates = [_top_k(u, K), _top_k(r * np.exp(u - u.max()), K)]
    for j in range(1, N + 1):
        candidates.append(_top_k(u, K, among=by_revenue[:j]))
    certified = K >= N
    best = None
    for candidate in candidates:
        solution = _solution(u, r, candidate, K, certified)
        if best is None or solution.reward > best.reward:
            best = solution
    return best


def best_assortment(utilities, revenues, K: int, solver: AssortmentSolver | None = None) -> AssortmentSolution:
    solver = solver or AssortmentSolver()
    u, r = _inputs(utilities, revenues, K)
    method = solver.method
    if method == "auto":
        if _is_uniform(r):
            method = "top_k_uniform"
        elif u.size <= solver.brute_force_limit:
            method = "brute_force"
        else:
            method = "revenue_ordered"
    if method == "top_k_uniform":
        if not _is_uniform(r):
            raise MethodRevenueMismatch("top_k_uniform requires equal revenues for every item")
        return _solution(u, r, _top_k(u, K), K, True)
    if method == "brute_force":
        return _brute_force(u, r, K, solver.brute_force_limit)
    return _revenue_ordered(u, r, K)


def oracle_assortment(true_utilities, revenues, K: int, brute_force_limit: int = 20) -> AssortmentSolution:
    """Exact optimum: the top-K path under equal revenues, brute force otherwise."""
    u, r = _inputs(true_utilities, revenues, K)
    if _is_uniform(r):
        return _solution(u, r, _top_k(u, K), K, True)
    return _brute_force(u, r, K, brute_force_limit)


def oracle_optimal_reward(true_utilities, revenues, K: int, brute_force_limit: int = 20) -> float:
    return oracle_assortment(true_utilities, revenues, K, brute_force_limit).reward
