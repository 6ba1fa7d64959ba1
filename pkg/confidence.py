"""Confidence geometry for Phase II: the Gram matrix V_t with a
Sherman-Morrison-maintained inverse, the lambda / beta_t / t0 schedules,
Mahalanobis norms, optimistic utilities and the elliptical-potential audit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from errors import DimensionMismatch, ScheduleOutOfRange, ValidationError

AUDIT_COLUMNS = ["round", "min_eig", "inv_drift", "beta_t", "lhs_potential", "rhs_potential"]
BETA_MODES = {"growing", "constant"}


@dataclass(frozen=True)
class GramAudit:
    round_count: int
    min_eig: float
    inv_drift: float


class GramState:
    """V = lam I + sum g g^T and its inverse, updated one rank-1 term at a time.

    Every ``reinvert_every`` rounds the maintained inverse is compared with a
    direct inverse (recorded in ``audits``) and then replaced by it.
    """

    def __init__(self, d_w: int, lam: float, reinvert_every: int | None = 100):
        if lam <= 0:
            raise ValidationError(f"lambda must be positive, got {lam}")
        self.d_w = int(d_w)
        self.lam = float(lam)
        self.reinvert_every = reinvert_every
        self.V = self.lam * np.eye(self.d_w)
        self.V_inv = np.eye(self.d_w) / self.lam
        self.update_count = 0
        self.round_count = 0
        self.audits: list[GramAudit] = []

    def update(self, gradients: Sequence[np.ndarray] | np.ndarray) -> "GramState":
        gradients = np.asarray(gradients, dtype=np.float64)
        if gradients.size == 0:
            return self
        gradients = gradients.reshape(-1, gradients.shape[-1])
        if gradients.shape[1] != self.d_w:
            raise DimensionMismatch(f"gradients must have {self.d_w} entries, got {gradients.shape[1]}")
        for g in gradients:
            Vg = self.V_inv @ g
            self.V_inv -= np.outer(Vg, Vg) / (1.0 + g @ Vg)
            self.V += np.outer(g, g)
            self.update_count += 1
        self.round_count += 1
        if self.reinvert_every and self.round_count % self.reinvert_every == 0:
            self.audits.append(self.audit())
            self.V_inv = np.linalg.inv(self.V)
            self.V_inv = 0.5 * (self.V_inv + self.V_inv.T)
        return self

    def audit(self) -> GramAudit:
        min_eig = float(np.linalg.eigvalsh(self.V).min())
        drift = float(np.max(np.abs(self.V @ self.V_inv - np.eye(self.d_w))))
        return GramAudit(self.round_count, min_eig, drift)


def gram_update(state: GramState, gradients) -> GramState:
    return state.update(gradients)


@dataclass(frozen=True)
class Schedule:
    """lambda = c_lambda kappa^(-5/2) d_w sqrt(T);
    beta_t = c_beta kappa^(-4) d_w t / T ("growing") or
             c_beta mu^(-2) kappa^(-4) d_w ("constant");
    t0 = ceil(kappa^(-3/2) d_w sqrt(T)) unless overridden, at most T."""

    horizon: int
    d_w: int
    kappa: float = 0.1
    mu: float = 1.0
    c_lambda: float = 1e-5
    c_beta: float = 1e-6
    t0_override: int | None = None
    beta_mode: str = "growing"

    def __post_init__(self):
        problems = []
        if self.horizon < 1:
            problems.append(f"horizon must be >= 1, got {self.horizon}")
        if self.d_w < 1:
            problems.append(f"d_w must be >= 1, got {self.d_w}")
        if not (0.0 < self.kappa <= 0.25):
            problems.append(f"kappa must lie in (0, 1/4], got {self.kappa}")
        if self.mu <= 0:
            problems.append(f"mu must be positive, got {self.mu}")
        if self.c_lambda <= 0:
            problems.append(f"c_lambda must be positive, got {self.c_lambda}")
        if self.c_beta < 0:
            problems.append(f"c_beta must be non-negative, got {self.c_beta}")
        if self.t0_override is not None and self.t0_override < 1:
            problems.append(f"t0 must be >= 1, got {self.t0_override}")
        if self.beta_mode not in BETA_MODES:
            problems.append(f"beta_mode must be one of {sorted(BETA_MODES)}, got {self.beta_mode!r}")
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def t0_formula(self) -> int:
        return math.ceil(self.kappa ** -1.5 * self.d_w * math.sqrt(self.horizon))

    @property
    def t0(self) -> int:
        t0 = self.t0_override if self.t0_override is not None else self.t0_formula
        return min(t0, self.horizon)

    @property
    def lam(self) -> float:
        return self.c_lambda * self.kappa ** -2.5 * self.d_w * math.sqrt(self.horizon)

    def beta(self, t: int) -> float:
        if self.beta_mode == "constant":
            return self.c_beta * self.mu ** -2 * self.kappa ** -4 * self.d_w
        return self.c_beta * self.kappa ** -4 * self.d_w * t / self.horizon


def mahalanobis_inv_norm(state: GramState, g) -> float:
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.shape != (state.d_w,):
        raise DimensionMismatch(f"gradient must have {state.d_w} entries, got {g.size}")
    return math.sqrt(max(float(g @ state.V_inv @ g), 0.0))


def mahalanobis_inv_norms(state: GramState, G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != state.d_w:
        raise DimensionMismatch(f"gradients must be (n, {state.d_w}), got shape {G.shape}")
    quadratic = np.einsum("nd,de,ne->n", G, state.V_inv, G)
    return np.sqrt(np.clip(quadratic, 0.0, None))


def _check_phase_two(schedule: Schedule, t: int):
    if t <= schedule.t0 or t > schedule.horizon:
        raise ScheduleOutOfRange(
            f"optimistic utilities are defined for t0 < t <= T ({schedule.t0} < t <= {schedule.horizon}), got t={t}"
        )


def optimistic_utility(state: GramState, schedule: Schedule, t: int, f_hat: float, g, C_h: float) -> float:
    """z = f_hat + sqrt(beta_t) ||g||_{V^-1} + beta_t C_h / lambda"""
    _check_phase_two(schedule, t)
    beta = schedule.beta(t)
    return float(f_hat) + math.sqrt(beta) * mahalanobis_inv_norm(state, g) + beta * C_h / state.lam


def optimistic_utilities(state: GramState, schedule: Schedule, t: int, f_hat, G, C_h: float) -> np.ndarray:
    _check_phase_two(schedule, t)
    beta = schedule.beta(t)
    bonus = math.sqrt(beta) * mahalanobis_inv_norms(state, G)
    return np.asarray(f_hat, dtype=np.float64) + bonus + beta * C_h / state.lam


def elliptical_potential_curve(
    potentials: Sequence[float],
    rounds: Sequence[int],
    lam: float,
    d_w: int,
    C_g: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Running sum of the capped per-round potentials next to the log-determinant
    bound 2 d_w log(1 + t C_g^2 / (d_w lam)) at absolute round t."""
    q = np.asarray(potentials, dtype=np.float64)
    t = np.asarray(rounds, dtype=np.float64)
    lhs = np.cumsum(np.minimum(1.0, q))
    rhs = 2.0 * d_w * np.log1p(t * C_g * C_g / (d_w * lam))
    return lhs, rhs


def elliptical_potential_check(
    potentials: Sequence[float],
    schedule: Schedule,
    C_g: float,
    rounds: Sequence[int] | None = None,
    tolerance: float = 1e-9,
) -> bool:
    if len(potentials) == 0:
        return True
    if rounds is None:
        rounds = schedule.t0 + 1 + np.arange(len(potentials))
    lhs, rhs = elliptical_potential_curve(potentials, rounds, schedule.lam, schedule.d_w, C_g)
    return bool(np.all(lhs <= rhs + tolerance))
