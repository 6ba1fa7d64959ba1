"""Environments, the run loop and regret accounting.

Every run derives its randomness from one integer seed split into named
streams (contexts, choices, policy, init, truth), each a counter-based
Philox generator, so a policy drawing more or fewer numbers never shifts the
contexts or choices another policy sees at the same seed.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import pandas as pd
from scipy.stats import chi2

from assortment_opt import oracle_optimal_reward
from confidence import AUDIT_COLUMNS, elliptical_potential_curve
from errors import ConfigMismatch, DimensionMismatch, MalformedCsv, ValidationError
from estimation import Checkpoint, write_checkpoint
from helpers import atomic_write_text, write_json
from mnl_choice import choice_probabilities, expected_reward, sample_choice
from mnl_types import ChoiceRecord, ContextSet, RevenueVector, frozen_array, make_context_set
from policies import OnlMnlPolicy, Policy
from utility_models import CosineMixtureUtility, TwoLayerSigmoidNet, UtilityModel

STREAMS = {"contexts": 0, "choices": 1, "policy": 2, "init": 3, "truth": 4}
TRACE_COLUMNS = [
    "round",
    "regret_inst",
    "regret_cum",
    "assortment",
    "chosen",
    "beta_t",
    "optimism_frac",
    "potential",
    "max_grad_norm",
]
OUTSIDE_OPTION = -1
REGRET_SLACK = 1e-12
# chance that some Gaussian context of a whole run lies outside feature_bound
GAUSSIAN_TAIL = 0.01
# share of feature-file rows kept out of truth training and used as contexts
DEFAULT_HOLDOUT = 0.2


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generators: dict[str, np.random.Generator] = {}

    def generator(self, name: str) -> np.random.Generator:
        if name not in STREAMS:
            raise ValidationError(f"unknown random stream {name!r}")
        if name not in self._generators:
            sequence = np.random.SeedSequence(self.seed, spawn_key=(STREAMS[name],))
            self._generators[name] = np.random.Generator(np.random.Philox(sequence))
        return self._generators[name]


@dataclass(frozen=True)
class GaussianContexts:
    n_items: int
    dim: int
    enforce_unit_ball: bool = False
    kind = "gaussian"

    def draw(self, rng: np.random.Generator, round_index: int) -> ContextSet:
        items = rng.standard_normal((self.n_items, self.dim))
        return make_context_set(items, round_index, self.enforce_unit_ball)

    def feature_bound(self, horizon: int) -> float:
        if self.enforce_unit_ball:
            return 1.0
        return math.sqrt(chi2.isf(GAUSSIAN_TAIL / (self.n_items * horizon), self.dim))


@dataclass(frozen=True)
class UniformBoxContexts:
    n_items: int
    dim: int
    half_width: float = 3.0
    enforce_unit_ball: bool = False
    kind = "uniform_box"

    def draw(self, rng: np.random.Generator, round_index: int) -> ContextSet:
        items = rng.uniform(-self.half_width, self.half_width, size=(self.n_items, self.dim))
        return make_context_set(items, round_index, self.enforce_unit_ball)

    def feature_bound(self, horizon: int) -> float:
        return 1.0 if self.enforce_unit_ball else self.half_width * math.sqrt(self.dim)


@dataclass(frozen=True)
class FeatureTable:
    ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def split(self, holdout_fraction: float) -> tuple["FeatureTable", "FeatureTable"]:
        """(training rows, held-out rows): the held-out part is the last
        round(n * holdout_fraction) rows, at least one when the fraction is positive.
        A zero fraction returns the whole table twice."""
        if not 0.0 <= holdout_fraction < 1.0:
            raise ConfigMismatch(f"holdout fraction must lie in [0, 1), got {holdout_fraction}")
        if holdout_fraction == 0.0:
            return self, self
        held = max(1, round(len(self) * holdout_fraction))
        if held >= len(self):
            raise ConfigMismatch(f"a {holdout_fraction:g} holdout leaves no training rows out of {len(self)}")
        cut = len(self) - held
        return self._rows(slice(0, cut)), self._rows(slice(cut, len(self)))

    def _rows(self, rows: slice) -> "FeatureTable":
        labels = None if self.labels is None else frozen_array(self.labels[rows])
        return FeatureTable(self.ids[rows], frozen_array(self.features[rows]), labels)


@dataclass(frozen=True)
class FeatureFileContexts:
    """Each round samples ``n_items`` rows of the table without replacement."""

    table: FeatureTable
    n_items: int
    enforce_unit_ball: bool = False
    kind = "feature_file"

    def __post_init__(self):
        if self.n_items > len(self.table):
            raise ConfigMismatch(f"{self.n_items} items per round but the feature file has {len(self.table)} rows")

    @property
    def dim(self) -> int:
        return self.table.dim

    def draw(self, rng: np.random.Generator, round_index: int) -> ContextSet:
        rows = rng.choice(len(self.table), size=self.n_items, replace=False)
        return make_context_set(self.table.features[rows], round_index, self.enforce_unit_ball)

    def feature_bound(self, horizon: int) -> float:
        if self.enforce_unit_ball:
            return 1.0
        return float(np.linalg.norm(self.table.features, axis=1).max())

    def stream(self, rng: np.random.Generator, rounds: int) -> Iterator[ContextSet]:
        for t in range(1, rounds + 1):
            yield self.draw(rng, t)


def load_feature_file(path: Path) -> FeatureTable:
    """Read ``id,f0,...,f{d-1}[,label]``. Rows are numbered from 1 (first data row)."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.EmptyDataError as error:
        raise MalformedCsv(f"{path.name} is empty", row=0) from error
    except pd.errors.ParserError as error:
        raise MalformedCsv(f"{path.name} could not be parsed: {error}") from error
    columns = [str(c).strip() for c in frame.columns]
    frame.columns = columns
    if not columns or columns[0] != "id":
        raise MalformedCsv("the first column must be 'id'", row=0, column="id")
    feature_columns = [c for c in columns if c.startswith("f") and c[1:].isdigit()]
    if not feature_columns:
        raise MalformedCsv("no feature columns f0..f{d-1}", row=0, column="f0")
    dim = max(int(c[1:]) for c in feature_columns) + 1
    for j in range(dim):
        if f"f{j}" not in columns:
            raise MalformedCsv("missing feature column", row=0, column=f"f{j}")
    extra = sorted(set(columns) - {"id", "label"} - {f"f{j}" for j in range(dim)})
    if extra:
        raise MalformedCsv(f"unexpected column {extra[0]!r}", row=0, column=extra[0])
    if frame.empty:
        raise MalformedCsv(f"{path.name} has a header but no rows", row=1)

    numeric_columns = [f"f{j}" for j in range(dim)] + (["label"] if "label" in columns else [])
    values = {}
    for column in numeric_columns:
        parsed = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = np.flatnonzero(~np.isfinite(parsed.to_numpy(dtype=np.float64)))
        if bad.size:
            raise MalformedCsv("missing or non-numeric value", row=int(bad[0]) + 1, column=column)
        values[column] = parsed.to_numpy(dtype=np.float64)
    features = np.column_stack([values[f"f{j}"] for j in range(dim)])
    labels = frozen_array(values["label"]) if "label" in values else None
    return FeatureTable(tuple(frame["id"].tolist()), frozen_array(features), labels)


@dataclass(frozen=True)
class Environment:
    context_source: Any
    truth: UtilityModel
    truth_params: np.ndarray
    revenues: RevenueVector
    n_items: int
    capacity: int
    dim: int
    horizon: int
    seed: int = 0
    brute_force_limit: int = 20

    def __post_init__(self):
        if self.truth.input_dim != self.dim or self.context_source.dim != self.dim:
            raise DimensionMismatch(
                f"truth expects dimension {self.truth.input_dim}, contexts have {self.context_source.dim}, environment says {self.dim}"
            )
        if len(self.revenues) != self.n_items:
            raise ConfigMismatch(f"{len(self.revenues)} revenues for {self.n_items} items")
        if self.capacity < 1 or self.capacity > self.n_items:
            raise ConfigMismatch(f"capacity must lie in [1, {self.n_items}], got {self.capacity}")
        if self.horizon < 1:
            raise ConfigMismatch("horizon must be >= 1")
        if not self.revenues.is_uniform and self.n_items > self.brute_force_limit:
            raise ConfigMismatch(
                f"unequal revenues need n_items <= brute_force_limit ({self.brute_force_limit}) for the oracle, got {self.n_items}"
            )

    def draw_context(self, rng: np.random.Generator, round_index: int) -> ContextSet:
        return self.context_source.draw(rng, round_index)

    def true_utilities(self, context: ContextSet) -> np.ndarray:
        return self.truth.values(self.truth_params, context.items)

    @property
    def feature_bound(self) -> float:
        return float(self.context_source.feature_bound(self.horizon))

    def describe(self) -> dict[str, Any]:
        return {
            "context": self.context_source.kind,
            "truth": self.truth.describe(),
            "n_items": self.n_items,
            "capacity": self.capacity,
            "dim": self.dim,
            "horizon": self.horizon,
            "seed": self.seed,
        }


def context_source(kind: str, n_items: int, dim: int, enforce_unit_ball: bool = False, table: FeatureTable | None = None):
    if kind == "gaussian":
        return GaussianContexts(n_items, dim, enforce_unit_ball)
    if kind == "uniform_box":
        return UniformBoxContexts(n_items, dim, enforce_unit_ball=enforce_unit_ball)
    if kind == "feature_file":
        if table is None:
            raise ConfigMismatch("feature_file contexts need a loaded feature table")
        return FeatureFileContexts(table, n_items, enforce_unit_ball)
    raise ConfigMismatch(f"unknown context source {kind!r}")


def make_realizable_env(
    d: int = 3,
    m_hidden: int = 3,
    seed: int = 0,
    n_items: int = 100,
    capacity: int = 5,
    horizon: int = 1000,
    context: str = "gaussian",
    revenues: RevenueVector | None = None,
    enforce_unit_ball: bool = False,
    brute_force_limit: int = 20,
) -> Environment:
    """Two-layer sigmoid truth with i.i.d. Unif[-1, 1] parameters drawn from the seed's truth stream."""
    if d < 1 or m_hidden < 1:
        raise ValidationError("d and m_hidden must be >= 1")
    truth = TwoLayerSigmoidNet(d, m_hidden)
    params = truth.truth_params(RngStreams(seed).generator("truth"))
    return Environment(
        context_source(context, n_items, d, enforce_unit_ball),
        truth,
        frozen_array(params),
        revenues or RevenueVector.uniform(n_items),
        n_items,
        capacity,
        d,
        horizon,
        seed,
        brute_force_limit,
    )


def make_misspecified_env(
    d: int = 3,
    seed: int = 0,
    n_items: int = 100,
    capacity: int = 5,
    horizon: int = 1000,
    context: str = "gaussian",
    revenues: RevenueVector | None = None,
    enforce_unit_ball: bool = False,
    brute_force_limit: int = 20,
) -> Environment:
    truth = CosineMixtureUtility(d)
    params = truth.truth_params(RngStreams(seed).generator("truth"))
    return Environment(
        context_source(context, n_items, d, enforce_unit_ball),
        truth,
        frozen_array(params),
        revenues or RevenueVector.uniform(n_items),
        n_items,
        capacity,
        d,
        horizon,
        seed,
        brute_force_limit,
    )


def make_feature_file_env(
    table: FeatureTable,
    truth: UtilityModel,
    params: np.ndarray,
    seed: int = 0,
    n_items: int = 100,
    capacity: int = 5,
    horizon: int = 1000,
    revenues: RevenueVector | None = None,
    brute_force_limit: int = 20,
) -> Environment:
    if truth.input_dim != table.dim:
        raise DimensionMismatch(f"truth model expects {truth.input_dim} features, file has {table.dim}")
    return Environment(
        FeatureFileContexts(table, n_items),
        truth,
        frozen_array(params),
        revenues or RevenueVector.uniform(n_items),
        n_items,
        capacity,
        table.dim,
        horizon,
        seed,
        brute_force_limit,
    )


@dataclass
class RunTrace:
    policy: str
    seed: int
    columns: dict[str, list]
    config: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    policy_info: dict[str, Any] = field(default_factory=dict)
    gram_rows: list[dict[str, Any]] = field(default_factory=list)
    checkpoint: Checkpoint | None = None

    @property
    def stem(self) -> str:
        return f"{self.policy}_{self.seed}"

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.columns, columns=TRACE_COLUMNS)

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.asarray(self.columns["regret_cum"], dtype=np.float64)

    def optimism_fraction(self) -> float:
        values = np.asarray(self.columns["optimism_frac"], dtype=np.float64)
        values = values[np.isfinite(values)]
        return float(values.mean()) if values.size else math.nan

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        trace_path = out_dir / f"trace_{self.stem}.csv"
        atomic_write_text(trace_path, self.frame().to_csv(index=False, na_rep=""))
        write_json(out_dir / f"trace_{self.stem}.json", {
            "policy": self.policy,
            "seed": self.seed,
            "config": self.config,
            "policy_info": self.policy_info,
            "timing": self.timing,
            "optimism_fraction": None if math.isnan(self.optimism_fraction()) else self.optimism_fraction(),
        })
        if self.gram_rows:
            frame = pd.DataFrame(self.gram_rows, columns=AUDIT_COLUMNS)
            atomic_write_text(out_dir / f"gram_{self.stem}.csv", frame.to_csv(index=False, na_rep=""))
        if self.checkpoint is not None:
            write_checkpoint(out_dir / f"checkpoint_{self.stem}.json", self.checkpoint)
        return trace_path


def read_trace(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path, keep_default_na=True, dtype={"assortment": str})
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedCsv(f"trace {Path(path).name} lacks a column", row=0, column=missing[0])
    return frame


def check_compatible(env: Environment, policy: Policy):
    setup = policy.setup
    problems = []
    if setup.dim != env.dim or setup.estimator.input_dim != env.dim:
        problems.append(f"policy expects dimension {setup.dim}, environment has {env.dim}")
    if setup.capacity != env.capacity:
        problems.append(f"policy capacity {setup.capacity} differs from environment capacity {env.capacity}")
    if setup.horizon != env.horizon:
        problems.append(f"policy horizon {setup.horizon} differs from environment horizon {env.horizon}")
    if problems:
        raise ConfigMismatch("; ".join(problems))


def _gram_rows(policy: OnlMnlPolicy, rounds: list[int], potentials: list[float], C_g: float) -> list[dict[str, Any]]:
    if not rounds:
        return []
    schedule = policy.schedule
    lhs, rhs = elliptical_potential_curve(potentials, rounds, schedule.lam, schedule.d_w, C_g)
    audits = policy.state.audit_rounds
    rows = []
    for t, left, right in zip(rounds, lhs, rhs):
        audit = audits.get(t)
        rows.append({
            "round": t,
            "min_eig": audit.min_eig if audit else math.nan,
            "inv_drift": audit.inv_drift if audit else math.nan,
            "beta_t": schedule.beta(t),
            "lhs_potential": float(left),
            "rhs_potential": float(right),
        })
    return rows


def run_episode(env: Environment, policy: Policy, seed: int, config: dict[str, Any] | None = None) -> RunTrace:
    check_compatible(env, policy)
    streams = RngStreams(seed)
    context_rng = streams.generator("contexts")
    choice_rng = streams.generator("choices")
    policy_rng = streams.generator("policy")
    revenue_values = env.revenues.revenues

    columns: dict[str, list] = {name: [] for name in TRACE_COLUMNS}
    cumulative = 0.0
    choose_seconds = update_seconds = 0.0
    phase_two_rounds: list[int] = []
    potentials: list[float] = []
    observed_grad = 0.0

    for t in range(1, env.horizon + 1):
        context = env.draw_context(context_rng, t)
        started = time.perf_counter()
        assortment = policy.choose(context, env.revenues, policy_rng)
        choose_seconds += time.perf_counter() - started
        diagnostics = policy.diagnostics

        true_u = env.true_utilities(context)
        offered = assortment.as_array()
        dist = choice_probabilities(true_u[offered])
        record = ChoiceRecord.from_position(context, assortment, sample_choice(dist, choice_rng))

        started = time.perf_counter()
        policy.update(record)
        update_seconds += time.perf_counter() - started

        optimum = oracle_optimal_reward(true_u, env.revenues, env.capacity, env.brute_force_limit)
        regret = optimum - expected_reward(true_u[offered], revenue_values[offered])
        if regret < -REGRET_SLACK:
            raise ValidationError(f"round {t}: offered set beats the oracle by {-regret:.3g}")
        regret = max(regret, 0.0)
        cumulative += regret

        optimism = math.nan
        if diagnostics.optimistic is not None:
            optimism = float(np.mean(diagnostics.optimistic >= true_u[offered]))
        if not math.isnan(diagnostics.potential):
            phase_two_rounds.append(t)
            potentials.append(diagnostics.potential)
            observed_grad = max(observed_grad, diagnostics.max_grad_norm)

        columns["round"].append(t)
        columns["regret_inst"].append(regret)
        columns["regret_cum"].append(cumulative)
        columns["assortment"].append(assortment.label())
        columns["chosen"].append(OUTSIDE_OPTION if record.chosen is None else record.chosen)
        columns["beta_t"].append(diagnostics.beta_t)
        columns["optimism_frac"].append(optimism)
        columns["potential"].append(diagnostics.potential)
        columns["max_grad_norm"].append(diagnostics.max_grad_norm)

    trace = RunTrace(
        policy=policy.name,
        seed=int(seed),
        columns=columns,
        config=dict(config or {}),
        timing={
            "choose_seconds": choose_seconds,
            "update_seconds": update_seconds,
            "seconds_per_round": (choose_seconds + update_seconds) / env.horizon,
        },
        policy_info=policy.describe(),
    )
    if isinstance(policy, OnlMnlPolicy):
        bounds = policy.model.bound_constants()
        C_g = max(bounds.C_g, observed_grad)
        trace.policy_info.update({"C_g": C_g, "C_g_bound": bounds.C_g, "C_h": bounds.C_h})
        trace.gram_rows = _gram_rows(policy, phase_two_rounds, potentials, C_g)
        trace.checkpoint = policy.checkpoint()
    return trace
