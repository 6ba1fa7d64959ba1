from __future__ import annotations

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback
    import tomli as tomllib
from copy import deepcopy
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from app_paths import RESULTS_DIR
from assortment_opt import SOLVER_METHODS, AssortmentSolver
from confidence import BETA_MODES, Schedule
from errors import ConfigError, MnlLabError
from estimation import OptimizerConfig
from helpers import load_json, parse_override_value, run_log, slug
from mnl_types import RevenueVector
from policies import POLICY_NAMES, PolicySetup, policy_params
from simulator import (
    DEFAULT_HOLDOUT,
    Environment,
    FeatureTable,
    RngStreams,
    context_source,
    load_feature_file,
    make_feature_file_env,
    make_misspecified_env,
    make_realizable_env,
)
from utility_models import LinearUtility, TwoLayerSigmoidNet, UtilityModel, load_model_checkpoint

ENVIRONMENT_KINDS = {"realizable", "misspecified", "feature_file"}
CONTEXT_KINDS = {"gaussian", "uniform_box", "feature_file"}
ESTIMATOR_KINDS = {"two_layer_sigmoid", "linear"}

DEFAULT_EXPERIMENT: dict[str, Any] = {
    "name": "experiment",
    "environment": {
        "kind": "realizable",
        "context": "gaussian",
        "n_items": 100,
        "capacity": 5,
        "dim": 3,
        "horizon": 1000,
        "truth_hidden": 3,
        "revenue": 1.0,
        "enforce_unit_ball": False,
        "feature_file": None,
        "truth_checkpoint": None,
        "holdout_fraction": DEFAULT_HOLDOUT,
    },
    "estimator": {
        "kind": "two_layer_sigmoid",
        "hidden_dim": 3,
        "param_cap": 1.0,
        "feature_cap": None,
    },
    "schedule": {
        "kappa": 0.1,
        "mu": 1.0,
        "c_lambda": 1e-5,
        "c_beta": 1e-6,
        "t0": None,
        "beta_mode": "growing",
    },
    "optimizer": {
        "learning_rate": 1e-4,
        "iterations": 2000,
        "per_round_iterations": 50,
        "round_learning_rate": 1e-3,
        "restarts": 1,
        "warm_start": True,
        "projection_radius": None,
    },
    "solver": {"method": "auto", "brute_force_limit": 20},
    "policies": [
        {"name": "onl-mnl"},
        {"name": "ucb-mnl"},
        {"name": "ts-mnl"},
        {"name": "eps-greedy-mnl"},
    ],
    "seeds": list(range(10)),
    "output_dir": None,
    "audit": {
        "pairs": 10000,
        "dims": [1, 2, 3],
        "caps": [0.5, 1.0, 3.0],
        "drift_tolerance": 1e-8,
        "optimism_threshold": 0.9,
        "kappa_scale": 1.0,
        "kappa_samples": 1000,
        "seed": 0,
    },
    "grid": {
        "c_lambda": [1e-5, 1e-4, 1e-3, 1e-2],
        "c_beta": [1e-6, 1e-5, 1e-4, 1e-3],
        "seeds": [0, 1, 2],
        "horizon": 500,
        "policy": "onl-mnl",
    },
    "pilot_scaling": {
        "t0_grid": [50, 100, 200],
        "seeds": list(range(10)),
        "samples": 10000,
        "estimator": "two_layer_sigmoid",
    },
}


@dataclass(frozen=True)
class PolicyEntry:
    name: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    environment: dict[str, Any]
    estimator: dict[str, Any]
    schedule: dict[str, Any]
    optimizer: OptimizerConfig
    solver: AssortmentSolver
    policies: tuple[PolicyEntry, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    audit: dict[str, Any]
    grid: dict[str, Any]
    pilot_scaling: dict[str, Any]
    document: dict[str, Any]
    base_dir: Path = Path(".")

    @property
    def horizon(self) -> int:
        return int(self.environment["horizon"])

    def schedule_kwargs(self) -> dict[str, Any]:
        s = self.schedule
        return {
            "kappa": float(s["kappa"]),
            "mu": float(s["mu"]),
            "c_lambda": float(s["c_lambda"]),
            "c_beta": float(s["c_beta"]),
            "t0_override": None if s["t0"] is None else int(s["t0"]),
            "beta_mode": s["beta_mode"],
        }

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """A new config with dotted-key overrides applied to the source document."""
        document = deepcopy(self.document)
        for key, value in overrides.items():
            _assign(document, key, value)
        return parse_experiment(document, self.base_dir)


def _assign(document: dict[str, Any], dotted: str, value: Any):
    parts = [p for p in dotted.split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key in {dotted!r}")
    target = document
    for part in parts[:-1]:
        nested = target.get(part)
        if not isinstance(nested, dict):
            nested = {}
            target[part] = nested
        target = nested
    target[parts[-1]] = value


def _merge(defaults: Mapping[str, Any], document: Mapping[str, Any], prefix: str, problems: list[str]) -> dict[str, Any]:
    merged = deepcopy(dict(defaults))
    for key, value in document.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            problems.append(f"{path}: unknown key")
            continue
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, Mapping):
                problems.append(f"{path}: expected a table of settings")
                continue
            merged[key] = _merge(default, value, f"{path}.", problems)
        else:
            merged[key] = value
    return merged


def _number(problems, path, value, minimum=None, maximum=None, integer=False, allow_none=False, exclusive_min=False):
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
        problems.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        return
    if minimum is not None and (value <= minimum if exclusive_min else value < minimum):
        problems.append(f"{path}: must be {'>' if exclusive_min else '>='} {minimum}, got {value}")
    if maximum is not None and value > maximum:
        problems.append(f"{path}: must be <= {maximum}, got {value}")


def _choice(problems, path, value, choices):
    if value not in choices:
        problems.append(f"{path}: expected one of {sorted(choices)}, got {value!r}")


def _int_list(problems, path, value, minimum=None) -> list[int]:
    if not isinstance(value, list) or not value:
        problems.append(f"{path}: expected a non-empty list of integers")
        return []
    for item in value:
        _number(problems, path, item, minimum=minimum, integer=True)
    return [int(v) for v in value if isinstance(v, int) and not isinstance(v, bool)]


def _num_list(problems, path, value, exclusive_min=None) -> list[float]:
    if not isinstance(value, list) or not value:
        problems.append(f"{path}: expected a non-empty list of numbers")
        return []
    for item in value:
        _number(problems, path, item, minimum=exclusive_min, exclusive_min=exclusive_min is not None)
    return [float(v) for v in value if isinstance(v, (int, float)) and not isinstance(v, bool)]


def _policies(document: Mapping[str, Any], problems: list[str]) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    document = dict(document)
    shorthand = document.pop("policy", None)
    if shorthand is not None:
        if "policies" in document:
            problems.append("policy: give either 'policy' or 'policies', not both")
        elif not isinstance(shorthand, Mapping):
            problems.append("policy: expected a table with 'name' and optional 'params'")
        else:
            document["policies"] = [dict(shorthand)]
    entries = document.get("policies", DEFAULT_EXPERIMENT["policies"])
    if not isinstance(entries, list) or not entries:
        problems.append("policies: expected a non-empty list")
        return [], document
    parsed = []
    for i, entry in enumerate(entries):
        if isinstance(entry, str):
            entry = {"name": entry}
        if not isinstance(entry, Mapping):
            problems.append(f"policies[{i}]: expected a table")
            continue
        unknown = sorted(set(entry) - {"name", "params"})
        if unknown:
            problems.append(f"policies[{i}].{unknown[0]}: unknown key")
        name = entry.get("name")
        if name not in POLICY_NAMES:
            problems.append(f"policies[{i}].name: expected one of {list(POLICY_NAMES)}, got {name!r}")
            continue
        params = entry.get("params") or {}
        if not isinstance(params, Mapping):
            problems.append(f"policies[{i}].params: expected a table")
            continue
        try:
            policy_params(name, params)
        except ConfigError as error:
            problems.extend(error.problems)
            continue
        parsed.append({"name": name, "params": dict(params)})
    names = [p["name"] for p in parsed]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        problems.append(f"policies: {duplicates[0]} listed more than once")
    document["policies"] = parsed
    return parsed, document


def parse_experiment(document: Any, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config document over DEFAULT_EXPERIMENT; every problem found
    is reported together in one ConfigError."""
    base_dir = Path(base_dir or ".")
    if not isinstance(document, Mapping):
        raise ConfigError("the config document must be a table of settings")
    problems: list[str] = []
    policies, document = _policies(document, problems)
    merged = _merge(DEFAULT_EXPERIMENT, document, "", problems)
    merged["policies"] = policies

    env = merged["environment"]
    _choice(problems, "environment.kind", env["kind"], ENVIRONMENT_KINDS)
    _choice(problems, "environment.context", env["context"], CONTEXT_KINDS)
    _number(problems, "environment.n_items", env["n_items"], 1, integer=True)
    _number(problems, "environment.capacity", env["capacity"], 1, integer=True)
    _number(problems, "environment.dim", env["dim"], 1, integer=True)
    _number(problems, "environment.horizon", env["horizon"], 1, integer=True)
    _number(problems, "environment.truth_hidden", env["truth_hidden"], 1, integer=True)
    if isinstance(env["capacity"], int) and isinstance(env["n_items"], int) and env["capacity"] > env["n_items"]:
        problems.append(f"environment.capacity: {env['capacity']} exceeds n_items {env['n_items']}")
    revenue = env["revenue"]
    if isinstance(revenue, list):
        if len(revenue) != env["n_items"]:
            problems.append(f"environment.revenue: expected {env['n_items']} values, got {len(revenue)}")
        for value in revenue:
            _number(problems, "environment.revenue", value, 0.0, 1.0)
    else:
        _number(problems, "environment.revenue", revenue, 0.0, 1.0)
    if not isinstance(env["enforce_unit_ball"], bool):
        problems.append("environment.enforce_unit_ball: expected true or false")
    _number(problems, "environment.holdout_fraction", env["holdout_fraction"], 0.0)
    if isinstance(env["holdout_fraction"], (int, float)) and not isinstance(env["holdout_fraction"], bool) and env["holdout_fraction"] >= 1.0:
        problems.append(f"environment.holdout_fraction: must be below 1, got {env['holdout_fraction']}")
    if env["kind"] == "feature_file" or env["context"] == "feature_file":
        if env["kind"] != env["context"]:
            problems.append("environment: feature_file must be used as both kind and context")
        for key in ("feature_file", "truth_checkpoint"):
            if not isinstance(env[key], str) or not env[key]:
                problems.append(f"environment.{key}: required for feature_file environments")

    est = merged["estimator"]
    _choice(problems, "estimator.kind", est["kind"], ESTIMATOR_KINDS)
    _number(problems, "estimator.hidden_dim", est["hidden_dim"], 1, integer=True)
    _number(problems, "estimator.param_cap", est["param_cap"], 0.0, exclusive_min=True)
    _number(problems, "estimator.feature_cap", est["feature_cap"], 0.0, exclusive_min=True, allow_none=True)

    sched = merged["schedule"]
    _number(problems, "schedule.kappa", sched["kappa"], 0.0, 0.25, exclusive_min=True)
    _number(problems, "schedule.mu", sched["mu"], 0.0, exclusive_min=True)
    _number(problems, "schedule.c_lambda", sched["c_lambda"], 0.0, exclusive_min=True)
    _number(problems, "schedule.c_beta", sched["c_beta"], 0.0)
    _number(problems, "schedule.t0", sched["t0"], 1, integer=True, allow_none=True)
    _choice(problems, "schedule.beta_mode", sched["beta_mode"], BETA_MODES)

    opt = merged["optimizer"]
    for key in ("learning_rate", "round_learning_rate"):
        _number(problems, f"optimizer.{key}", opt[key], 0.0, exclusive_min=True)
    for key in ("iterations", "per_round_iterations", "restarts"):
        _number(problems, f"optimizer.{key}", opt[key], 1, integer=True)
    _number(problems, "optimizer.projection_radius", opt["projection_radius"], 0.0, exclusive_min=True, allow_none=True)
    if not isinstance(opt["warm_start"], bool):
        problems.append("optimizer.warm_start: expected true or false")

    solver = merged["solver"]
    _choice(problems, "solver.method", solver["method"], SOLVER_METHODS)
    _number(problems, "solver.brute_force_limit", solver["brute_force_limit"], 1, integer=True)
    if (
        isinstance(revenue, list)
        and len({v for v in revenue if isinstance(v, (int, float))}) > 1
        and isinstance(env["n_items"], int)
        and isinstance(solver["brute_force_limit"], int)
        and env["n_items"] > solver["brute_force_limit"]
    ):
        problems.append(
            f"environment.revenue: unequal revenues need n_items <= solver.brute_force_limit "
            f"({solver['brute_force_limit']}), got {env['n_items']}"
        )

    seeds = _int_list(problems, "seeds", merged["seeds"], minimum=0)
    if len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicate seed")
    if not isinstance(merged["name"], str) or not merged["name"].strip():
        problems.append("name: expected a non-empty string")
    if merged["output_dir"] is not None and not isinstance(merged["output_dir"], str):
        problems.append("output_dir: expected a path string")

    audit = merged["audit"]
    _number(problems, "audit.pairs", audit["pairs"], 1, integer=True)
    _int_list(problems, "audit.dims", audit["dims"], minimum=1)
    _num_list(problems, "audit.caps", audit["caps"], exclusive_min=0.0)
    _number(problems, "audit.drift_tolerance", audit["drift_tolerance"], 0.0, exclusive_min=True)
    _number(problems, "audit.optimism_threshold", audit["optimism_threshold"], 0.0, 1.0)
    _number(problems, "audit.kappa_scale", audit["kappa_scale"], 0.0, exclusive_min=True)
    _number(problems, "audit.kappa_samples", audit["kappa_samples"], 1, integer=True)
    _number(problems, "audit.seed", audit["seed"], 0, integer=True)

    grid = merged["grid"]
    _num_list(problems, "grid.c_lambda", grid["c_lambda"], exclusive_min=0.0)
    if any(v < 0 for v in _num_list(problems, "grid.c_beta", grid["c_beta"])):
        problems.append("grid.c_beta: values must be >= 0")
    _int_list(problems, "grid.seeds", grid["seeds"], minimum=0)
    _number(problems, "grid.horizon", grid["horizon"], 1, integer=True)
    _choice(problems, "grid.policy", grid["policy"], set(POLICY_NAMES))

    pilot = merged["pilot_scaling"]
    _int_list(problems, "pilot_scaling.t0_grid", pilot["t0_grid"], minimum=1)
    _int_list(problems, "pilot_scaling.seeds", pilot["seeds"], minimum=0)
    _number(problems, "pilot_scaling.samples", pilot["samples"], 1, integer=True)
    _choice(problems, "pilot_scaling.estimator", pilot["estimator"], ESTIMATOR_KINDS)

    optimizer = solver_cfg = None
    if not problems:
        try:
            optimizer = OptimizerConfig(**{key: opt[key] for key in opt})
            solver_cfg = AssortmentSolver(solver["method"], int(solver["brute_force_limit"]))
        except MnlLabError as error:
            problems.append(str(error))
    if problems:
        raise ConfigError(problems)

    if merged["output_dir"] is None:
        output_dir = RESULTS_DIR / slug(merged["name"])
    else:
        output_dir = Path(merged["output_dir"]).expanduser()
        if not output_dir.is_absolute():
            output_dir = base_dir / output_dir

    return ExperimentConfig(
        name=merged["name"],
        environment=env,
        estimator=est,
        schedule=sched,
        optimizer=optimizer,
        solver=solver_cfg,
        policies=tuple(PolicyEntry(p["name"], p["params"]) for p in policies),
        seeds=tuple(seeds),
        output_dir=output_dir,
        audit=audit,
        grid=grid,
        pilot_scaling=pilot,
        document=merged,
        base_dir=base_dir,
    )


def read_config_document(path: Path) -> dict[str, Any]:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            with path.open("rb") as source:
                return tomllib.load(source)
        except FileNotFoundError as error:
            raise ConfigError(f"{path}: file not found") from error
        except (OSError, tomllib.TOMLDecodeError) as error:
            raise ConfigError(f"{path}: {error}") from error
    result = load_json(path)
    if result.missing:
        raise ConfigError(f"{path}: file not found")
    if not result.valid:
        raise ConfigError(f"{path}: {result.error}")
    if not isinstance(result.data, dict):
        raise ConfigError(f"{path}: the top level must be an object")
    return result.data


def parse_seed_range(text: str) -> list[int]:
    """``a..b`` inclusive."""
    try:
        start, end = (int(part) for part in text.split("..", 1))
    except ValueError as error:
        raise ConfigError(f"--seed-range: expected a..b, got {text!r}") from error
    if start < 0 or end < start:
        raise ConfigError(f"--seed-range: need 0 <= a <= b, got {text!r}")
    return list(range(start, end + 1))


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        overrides[key.strip()] = parse_override_value(value)
    return overrides


def load_experiment(
    path: Path,
    overrides: Iterable[str] = (),
    seed_range: str | None = None,
    output_dir: str | Path | None = None,
) -> ExperimentConfig:
    path = Path(path)
    document = read_config_document(path)
    for key, value in parse_overrides(overrides).items():
        _assign(document, key, value)
    if seed_range:
        document["seeds"] = parse_seed_range(seed_range)
    if output_dir is not None:
        document["output_dir"] = str(Path(output_dir).expanduser().resolve())
    return parse_experiment(document, path.resolve().parent)


def feature_cap(config: ExperimentConfig) -> float:
    """``estimator.feature_cap`` if set, else the norm bound of the configured context generator."""
    cap = config.estimator["feature_cap"]
    if cap is not None:
        return float(cap)
    env = config.environment
    table = _context_table(config) if env["context"] == "feature_file" else None
    source = context_source(env["context"], int(env["n_items"]), _environment_dim(config), env["enforce_unit_ball"], table)
    return float(source.feature_bound(config.horizon))


def build_estimator(config: ExperimentConfig, dim: int, kind: str | None = None) -> UtilityModel:
    est = config.estimator
    kind = kind or est["kind"]
    cap = feature_cap(config)
    if kind == "linear":
        return LinearUtility(dim, est["param_cap"], cap)
    return TwoLayerSigmoidNet(dim, int(est["hidden_dim"]), est["param_cap"], cap)


def policy_setup(config: ExperimentConfig, horizon: int | None = None) -> PolicySetup:
    env = config.environment
    dim = _environment_dim(config)
    return PolicySetup(
        dim=dim,
        capacity=int(env["capacity"]),
        horizon=int(horizon or env["horizon"]),
        estimator=build_estimator(config, dim),
        optimizer=config.optimizer,
        solver=config.solver,
        schedule=config.schedule_kwargs(),
    )


def _resolve(config: ExperimentConfig, value: str) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else config.base_dir / path


@lru_cache(maxsize=4)
def _feature_table(path: str) -> FeatureTable:
    return load_feature_file(Path(path))


def _context_table(config: ExperimentConfig) -> FeatureTable:
    """Held-out rows of the feature file; the truth network never trained on them."""
    env = config.environment
    table = _feature_table(str(_resolve(config, env["feature_file"])))
    return table.split(float(env["holdout_fraction"]))[1]


def _environment_dim(config: ExperimentConfig) -> int:
    env = config.environment
    if env["kind"] == "feature_file":
        return _feature_table(str(_resolve(config, env["feature_file"]))).dim
    return int(env["dim"])


def build_environment(config: ExperimentConfig, seed: int, horizon: int | None = None) -> Environment:
    env = config.environment
    n_items = int(env["n_items"])
    revenue = env["revenue"]
    revenues = RevenueVector(np.asarray(revenue, dtype=np.float64)) if isinstance(revenue, list) else RevenueVector.uniform(n_items, revenue)
    horizon = int(horizon or env["horizon"])
    common = dict(
        seed=seed, n_items=n_items, capacity=int(env["capacity"]), horizon=horizon, revenues=revenues,
        brute_force_limit=config.solver.brute_force_limit,
    )
    if env["kind"] == "realizable":
        return make_realizable_env(
            int(env["dim"]), int(env["truth_hidden"]), context=env["context"],
            enforce_unit_ball=env["enforce_unit_ball"], **common,
        )
    if env["kind"] == "misspecified":
        return make_misspecified_env(
            int(env["dim"]), context=env["context"], enforce_unit_ball=env["enforce_unit_ball"], **common,
        )
    table = _context_table(config)
    truth, params = load_model_checkpoint(_resolve(config, env["truth_checkpoint"]))
    return make_feature_file_env(table, truth, params, **common)


def log_schedule_clamp(config: ExperimentConfig, d_w: int):
    """Record when t0 (from the formula or the config) exceeds the horizon."""
    kwargs = config.schedule_kwargs()
    t0 = kwargs["t0_override"]
    if t0 is None:
        t0 = Schedule(horizon=config.horizon, d_w=d_w, **kwargs).t0_formula
    if t0 > config.horizon:
        run_log(f"t0 = {t0} exceeds the horizon {config.horizon}; clamped to T")


def init_stream(seed: int):
    return RngStreams(seed).generator("init")
