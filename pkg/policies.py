"""Bandit policies behind one interface.

A policy sees the round's context and revenues in ``choose``, then the
revealed choice in ``update``. It never sees the environment's parameters.
After ``choose`` the policy's ``diagnostics`` describe the decision it just
made (confidence radius, self-normalised gradient potential, optimistic
utilities of the offered items) so the run loop can log them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from assortment_opt import AssortmentSolver, best_assortment
from confidence import GramAudit, GramState, Schedule, gram_update, mahalanobis_inv_norms, optimistic_utilities
from errors import ConfigError, ValidationError
from estimation import (
    Adam,
    ChoiceBatch,
    Checkpoint,
    LinearizedLoss,
    OptimizerConfig,
    PilotLoss,
    adam_minimize,
    fit_pilot,
    fit_round,
    linear_mnl_newton,
)
from helpers import run_log
from mnl_types import Assortment, ChoiceRecord, ContextSet, RevenueVector, uniform_assortment_sample
from utility_models import LinearUtility, UtilityModel

POLICY_NAMES = ("onl-mnl", "ucb-mnl", "ts-mnl", "eps-greedy-mnl", "uniform")


@dataclass
class RoundDiagnostics:
    beta_t: float = math.nan
    potential: float = math.nan
    max_grad_norm: float = math.nan
    optimistic: np.ndarray | None = None


@dataclass(frozen=True)
class PolicySetup:
    """Everything a policy may know about the problem besides the feedback."""

    dim: int
    capacity: int
    horizon: int
    estimator: UtilityModel
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: AssortmentSolver = field(default_factory=AssortmentSolver)
    schedule: Mapping[str, Any] = field(default_factory=dict)


class Policy:
    name = "abstract"
    defaults: dict[str, Any] = {}

    def __init__(self, setup: PolicySetup):
        self.setup = setup
        self.capacity = setup.capacity
        self.t = 0
        self.diagnostics = RoundDiagnostics()

    def choose(self, context: ContextSet, revenues: RevenueVector, rng: np.random.Generator) -> Assortment:
        raise NotImplementedError

    def update(self, record: ChoiceRecord):
        raise NotImplementedError

    def describe(self) -> dict[str, Any]:
        return {"name": self.name}


class UniformPolicy(Policy):
    name = "uniform"

    def choose(self, context, revenues, rng):
        self.diagnostics = RoundDiagnostics()
        return uniform_assortment_sample(context.n_items, self.capacity, rng)

    def update(self, record):
        self.t += 1


@dataclass
class OnlMnlState:
    phase: str
    t: int
    pilot_records: list[ChoiceRecord]
    w_pilot: np.ndarray | None = None
    w_hat: np.ndarray | None = None
    gram: GramState | None = None
    loss: LinearizedLoss | None = None
    optimizer: Adam | None = None
    fit_rounds: list[int] = field(default_factory=list)
    uniform_rounds: int = 0
    audit_rounds: dict[int, GramAudit] = field(default_factory=dict)


class OnlMnlPolicy(Policy):
    """Uniform exploration for t0 rounds, a pilot MLE, then optimistic play on

        z_ti = f(x_ti; w_t) + sqrt(beta_t) ||grad f||_{V_t^-1} + beta_t C_h / lam

    with w_t refit on the linearised loss after every ``refit_every`` rounds.
    """

    name = "onl-mnl"
    defaults = {"refit_every": 1, "reinvert_every": 100}

    def __init__(self, setup: PolicySetup, rng: np.random.Generator, refit_every: int = 1, reinvert_every: int = 100):
        super().__init__(setup)
        if refit_every < 1:
            raise ValidationError("refit_every must be >= 1")
        self.model = setup.estimator
        self.schedule = Schedule(horizon=setup.horizon, d_w=self.model.d_w, **dict(setup.schedule))
        self.cfg = setup.optimizer
        self.refit_every = int(refit_every)
        self.reinvert_every = int(reinvert_every)
        self.C_h = self.model.bound_constants().C_h
        self.init_rng = rng
        self.state = OnlMnlState(phase="I", t=0, pilot_records=[])
        self._pending: tuple[Assortment, np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def t0(self) -> int:
        return self.schedule.t0

    def choose(self, context, revenues, rng):
        t = self.state.t + 1
        self._pending = None
        if t <= self.t0:
            self.diagnostics = RoundDiagnostics()
            self.state.uniform_rounds += 1
            return uniform_assortment_sample(context.n_items, self.capacity, rng)
        state = self.state
        f_hat = self.model.values(state.w_hat, context.items)
        G = self.model.gradients(state.w_hat, context.items)
        z = optimistic_utilities(state.gram, self.schedule, t, f_hat, G, self.C_h)
        solution = best_assortment(z, revenues, self.capacity, self.setup.solver)
        offered = solution.assortment.as_array()
        norms = mahalanobis_inv_norms(state.gram, G[offered])
        self.diagnostics = RoundDiagnostics(
            beta_t=self.schedule.beta(t),
            potential=float(np.max(norms * norms)),
            max_grad_norm=float(np.max(np.linalg.norm(G[offered], axis=1))),
            optimistic=z[offered],
        )
        self._pending = (solution.assortment, f_hat[offered], G[offered], state.w_hat.copy())
        return solution.assortment

    def _start_phase_two(self):
        state = self.state
        loss = PilotLoss(state.pilot_records, self.model)
        result = fit_pilot(loss, self.model.initial_params(self.init_rng), self.cfg, self.init_rng)
        run_log(f"onl-mnl pilot fit on {len(loss)} records: loss {result.initial_loss:.6g} -> {result.loss:.6g}")
        state.fit_rounds.append(state.t)
        state.w_pilot = result.params.copy()
        state.w_hat = result.params.copy()
        lam = self.schedule.lam
        state.gram = GramState(self.model.d_w, lam, self.reinvert_every)
        state.loss = LinearizedLoss(self.model.d_w, self.capacity, lam, state.w_pilot)
        state.optimizer = Adam(self.cfg.round_learning_rate, self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon)
        state.phase = "II"

    def update(self, record):
        state = self.state
        state.t += 1
        self.t = state.t
        if state.phase == "I":
            state.pilot_records.append(record)
            if state.t == self.t0:
                self._start_phase_two()
            return
        if self._pending is None or self._pending[0] != record.assortment:
            raise ValidationError(f"round {state.t} feedback does not match the offered assortment")
        _, f_values, gradients, w_anchor = self._pending
        self._pending = None
        state.loss.append(record, f_values, gradients, w_anchor)
        audits_before = len(state.gram.audits)
        gram_update(state.gram, gradients)
        if len(state.gram.audits) > audits_before:
            state.audit_rounds[state.t] = state.gram.audits[-1]
        if (state.t - self.t0) % self.refit_every == 0:
            result = fit_round(state.loss, state.w_hat, self.cfg, state.optimizer)
            state.w_hat = result.params.copy()
            state.fit_rounds.append(state.t)

    def checkpoint(self) -> Checkpoint:
        state = self.state
        w_hat = state.w_hat if state.w_hat is not None else np.zeros(self.model.d_w)
        moments = state.optimizer.state() if state.optimizer is not None else {}
        return Checkpoint(state.t, w_hat.copy(), None if state.w_pilot is None else state.w_pilot.copy(), moments)

    def describe(self):
        return {
            "name": self.name,
            "model": self.model.describe(),
            "d_w": self.model.d_w,
            "t0": self.t0,
            "lambda": self.schedule.lam,
            "beta_mode": self.schedule.beta_mode,
            "refit_every": self.refit_every,
        }


class EpsGreedyPolicy(Policy):
    """With probability eps offer a uniform random set, else the best set
    under the fitted utilities. Refits on the latest epoch's records after
    t = 2^k - 1; eps decays by ``decay`` per round down to ``floor``."""

    name = "eps-greedy-mnl"
    defaults = {"epsilon": 0.1, "decay": 0.995, "floor": 0.001}

    def __init__(self, setup: PolicySetup, rng: np.random.Generator, epsilon: float = 0.1, decay: float = 0.995, floor: float = 0.001):
        super().__init__(setup)
        if epsilon < 0 or not (0 < decay <= 1) or floor < 0:
            raise ValidationError("epsilon and floor must be >= 0 and decay in (0, 1]")
        self.model = setup.estimator
        self.cfg = setup.optimizer
        self.epsilon = float(epsilon)
        self.decay = float(decay)
        self.floor = float(floor)
        self.init_rng = rng
        self.w = self.model.initial_params(rng)
        self.epoch = 0
        self.epoch_records: list[ChoiceRecord] = []
        self.refit_rounds: list[int] = []

    @staticmethod
    def is_epoch_boundary(t: int) -> bool:
        return t >= 1 and (t + 1) & t == 0

    def choose(self, context, revenues, rng):
        self.diagnostics = RoundDiagnostics()
        if self.epsilon >= 1.0:
            explore = True
        elif self.epsilon <= 0.0:
            explore = False
        else:
            explore = bool(rng.random() < self.epsilon)
        if explore:
            return uniform_assortment_sample(context.n_items, self.capacity, rng)
        utilities = self.model.values(self.w, context.items)
        return best_assortment(utilities, revenues, self.capacity, self.setup.solver).assortment

    def update(self, record):
        self.t += 1
        self.epoch_records.append(record)
        if self.is_epoch_boundary(self.t):
            loss = PilotLoss(self.epoch_records, self.model)
            optimizer = Adam(self.cfg.learning_rate, self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon)
            self.w = adam_minimize(loss.value_and_grad, self.w, self.cfg.iterations, optimizer).params
            self.refit_rounds.append(self.t)
            self.epoch_records = []
            self.epoch += 1
        if self.decay < 1.0:
            self.epsilon = max(self.floor, self.epsilon * self.decay)

    def describe(self):
        return {"name": self.name, "model": self.model.describe(), "epsilon": self.epsilon}


class LinearMnlPolicy(Policy):
    """Linear-utility MNL with a ridge MLE refit by Newton steps every round
    and a design matrix A = lam I + sum x x^T over offered items."""

    defaults = {"lam": 1.0, "newton_steps": 3, "warmup": 0}

    def __init__(self, setup: PolicySetup, rng: np.random.Generator, lam: float = 1.0, newton_steps: int = 3, warmup: int = 0):
        super().__init__(setup)
        self.model = LinearUtility(setup.dim)
        self.lam = float(lam)
        self.newton_steps = int(newton_steps)
        self.warmup = int(warmup)
        self.design = GramState(setup.dim, self.lam)
        self.batch = ChoiceBatch(setup.dim, setup.capacity)
        self.theta = np.zeros(setup.dim)

    def scores(self, context: ContextSet, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def choose(self, context, revenues, rng):
        self.diagnostics = RoundDiagnostics()
        if self.t < self.warmup:
            return uniform_assortment_sample(context.n_items, self.capacity, rng)
        scores = self.scores(context, rng)
        return best_assortment(scores, revenues, self.capacity, self.setup.solver).assortment

    def update(self, record):
        self.t += 1
        self.batch.append(record)
        self.design.update(record.context.rows(record.assortment.item_indices))
        self.theta = linear_mnl_newton(self.batch, self.theta, self.lam, self.newton_steps)

    def describe(self):
        return {"name": self.name, "lam": self.lam}


class UcbMnlPolicy(LinearMnlPolicy):
    name = "ucb-mnl"
    defaults = {**LinearMnlPolicy.defaults, "alpha": 0.5}

    def __init__(self, setup, rng, alpha: float = 0.5, **kwargs):
        super().__init__(setup, rng, **kwargs)
        if alpha < 0:
            raise ValidationError("alpha must be >= 0")
        self.alpha = float(alpha)

    def scores(self, context, rng):
        bonus = mahalanobis_inv_norms(self.design, context.items)
        return context.items @ self.theta + self.alpha * bonus


class TsMnlPolicy(LinearMnlPolicy):
    """Samples theta ~ N(theta_hat, scale^2 A^-1) each round."""

    name = "ts-mnl"
    defaults = {**LinearMnlPolicy.defaults, "scale": 0.5}

    def __init__(self, setup, rng, scale: float = 0.5, **kwargs):
        super().__init__(setup, rng, **kwargs)
        if scale < 0:
            raise ValidationError("scale must be >= 0")
        self.scale = float(scale)

    def scores(self, context, rng):
        noise = rng.standard_normal(self.theta.size)
        if self.scale == 0.0:
            return context.items @ self.theta
        covariance = 0.5 * (self.design.V_inv + self.design.V_inv.T)
        sample = self.theta + self.scale * np.linalg.cholesky(covariance) @ noise
        return context.items @ sample


POLICY_CLASSES: dict[str, type[Policy]] = {
    OnlMnlPolicy.name: OnlMnlPolicy,
    UcbMnlPolicy.name: UcbMnlPolicy,
    TsMnlPolicy.name: TsMnlPolicy,
    EpsGreedyPolicy.name: EpsGreedyPolicy,
    UniformPolicy.name: UniformPolicy,
}


def policy_params(name: str, params: Mapping[str, Any] | None) -> dict[str, Any]:
    """Defaults merged with ``params``; unknown names or keys raise ConfigError."""
    if name not in POLICY_CLASSES:
        raise ConfigError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
    defaults = POLICY_CLASSES[name].defaults
    params = dict(params or {})
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError([f"policies.{name}.params.{key}: unknown parameter" for key in unknown])
    return {**defaults, **params}


def make_policy(name: str, params: Mapping[str, Any] | None, setup: PolicySetup, rng: np.random.Generator) -> Policy:
    merged = policy_params(name, params)
    cls = POLICY_CLASSES[name]
    if cls is UniformPolicy:
        return UniformPolicy(setup)
    return cls(setup, rng, **merged)
