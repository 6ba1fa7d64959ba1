"""Experiment runner: (policy, seed) sweeps, aggregation, audit reports and
the c_lambda x c_beta grid search.

Runs are distributed over a process pool with ordered results, so outputs do
not depend on the number of workers; files are written by the parent
process only.
"""
from __future__ import annotations

import json
import math
import multiprocessing
import os
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import ConfigError, MalformedCsv, MissingDiagnostics
from estimation import FitResult, OptimizerConfig, fit_truth_from_labels
from experiment_config import (
    ExperimentConfig,
    PolicyEntry,
    build_environment,
    build_estimator,
    init_stream,
    log_schedule_clamp,
    policy_setup,
)
from helpers import atomic_write_text, load_json, render_markdown_page, run_log, set_log_file, write_json
from lemma_checks import (
    LemmaCheckResult,
    check_elliptical_potential,
    check_gram_drift,
    check_optimism_rate,
    check_pilot_convergence,
    check_reverse_lipschitz,
    pilot_error_table,
)
from mnl_choice import sample_kappa
from policies import make_policy
from regret_plot import plot_regret
from simulator import DEFAULT_HOLDOUT, RngStreams, RunTrace, load_feature_file, read_trace, run_episode
from styles import REPORT_CSS
from utility_models import TwoLayerSigmoidNet, write_model_checkpoint

THREADS_ENV = "MNL_LAB_THREADS"


def resolve_threads(requested: int | None) -> int:
    if requested is not None:
        if requested < 1:
            raise ConfigError(f"--threads must be >= 1, got {requested}")
        return requested
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        threads = int(value)
    except ValueError as error:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from error
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def use_output_log(out_dir: Path):
    """Send the run log to ``<out_dir>/run.log``; MNL_LAB_LOG still wins."""
    set_log_file(Path(out_dir) / "run.log")


@dataclass(frozen=True)
class RunTask:
    config: ExperimentConfig
    policy: PolicyEntry
    seed: int


def run_task(task: RunTask) -> RunTrace:
    config = task.config
    env = build_environment(config, task.seed)
    policy = make_policy(task.policy.name, task.policy.params, policy_setup(config), init_stream(task.seed))
    return run_episode(env, policy, task.seed, config=config.document)


def execute(tasks: Sequence[RunTask], threads: int = 1, progress: bool = True, desc: str = "runs") -> Iterator[RunTrace]:
    """Yield traces in task order whatever the worker count."""
    bar = tqdm(total=len(tasks), desc=desc, disable=not progress, leave=False)
    try:
        if threads <= 1 or len(tasks) <= 1:
            for task in tasks:
                yield run_task(task)
                bar.update(1)
            return
        with multiprocessing.Pool(min(threads, len(tasks))) as pool:
            for trace in pool.imap(run_task, tasks, chunksize=1):
                yield trace
                bar.update(1)
    finally:
        bar.close()


@dataclass
class PolicyCurve:
    mean: np.ndarray
    std: np.ndarray
    final_mean: float
    final_std: float
    seeds: tuple[int, ...]
    seconds_per_round_mean: float
    seconds_per_round_std: float
    optimism_fraction: float = math.nan

    def summary(self) -> dict[str, Any]:
        return {
            "final_regret_mean": self.final_mean,
            "final_regret_std": self.final_std,
            "seeds": list(self.seeds),
            "seconds_per_round_mean": self.seconds_per_round_mean,
            "seconds_per_round_std": self.seconds_per_round_std,
            "optimism_fraction": None if math.isnan(self.optimism_fraction) else self.optimism_fraction,
        }


@dataclass
class AggregateResult:
    rounds: np.ndarray
    curves: dict[str, PolicyCurve] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        columns: dict[str, Any] = {"round": self.rounds}
        for name, curve in self.curves.items():
            columns[f"{name}_mean"] = curve.mean
            columns[f"{name}_std"] = curve.std
        return pd.DataFrame(columns)

    def summary(self) -> dict[str, Any]:
        return {name: curve.summary() for name, curve in self.curves.items()}


def aggregate(traces: Sequence[RunTrace]) -> AggregateResult:
    """Per-policy mean and population std of cumulative regret over seeds."""
    if not traces:
        raise MissingDiagnostics("no traces to aggregate")
    horizon = len(traces[0].cumulative_regret)
    result = AggregateResult(rounds=np.arange(1, horizon + 1))
    order = list(dict.fromkeys(trace.policy for trace in traces))
    for name in order:
        runs = [trace for trace in traces if trace.policy == name]
        curves = np.vstack([trace.cumulative_regret for trace in runs])
        seconds = np.array([trace.timing.get("seconds_per_round", math.nan) for trace in runs])
        fractions = np.array([trace.optimism_fraction() for trace in runs])
        fractions = fractions[np.isfinite(fractions)]
        result.curves[name] = PolicyCurve(
            mean=curves.mean(axis=0),
            std=curves.std(axis=0),
            final_mean=float(curves[:, -1].mean()),
            final_std=float(curves[:, -1].std()),
            seeds=tuple(trace.seed for trace in runs),
            seconds_per_round_mean=float(seconds.mean()),
            seconds_per_round_std=float(seconds.std()),
            optimism_fraction=float(fractions.mean()) if fractions.size else math.nan,
        )
    return result


def run_experiment(config: ExperimentConfig, threads: int | None = None, progress: bool = True) -> AggregateResult:
    threads = resolve_threads(threads)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    use_output_log(out)
    run_log(
        f"experiment {config.name!r}: policies {[p.name for p in config.policies]}, "
        f"seeds {list(config.seeds)}, T = {config.horizon}, threads = {threads}, output {out}"
    )
    if any(p.name == "onl-mnl" for p in config.policies):
        log_schedule_clamp(config, policy_setup(config).estimator.d_w)

    tasks = [RunTask(config, entry, seed) for entry in config.policies for seed in config.seeds]
    traces = []
    for trace in execute(tasks, threads, progress, desc=config.name):
        trace.write(out)
        run_log(f"{trace.policy} seed {trace.seed}: final regret {trace.cumulative_regret[-1]:.6g}")
        traces.append(trace)

    result = aggregate(traces)
    atomic_write_text(out / "aggregate.csv", result.frame().to_csv(index=False))
    write_json(out / "aggregate.json", {"name": config.name, "horizon": config.horizon, "policies": result.summary()})
    try:
        curves = {name: (curve.mean, curve.std) for name, curve in result.curves.items()}
        plot_regret(result.rounds, curves, out / "regret.svg", title=config.name)
    except Exception as error:
        run_log("regret plot failed", error)
    run_log(f"experiment {config.name!r} finished; results in {out}")
    return result


@dataclass
class AuditReport:
    passed: bool
    checks: list[tuple[str, LemmaCheckResult]]
    optimism: LemmaCheckResult
    markdown: str = ""
    kappa: dict[str, float] = field(default_factory=dict)


def _onl_runs(trace_dir: Path) -> list[tuple[str, pd.DataFrame, dict[str, Any]]]:
    runs = []
    for path in sorted(trace_dir.glob("trace_*.csv")):
        stem = path.stem[len("trace_"):]
        sidecar = load_json(path.with_suffix(".json"))
        if not sidecar.valid or not isinstance(sidecar.data, dict):
            raise MissingDiagnostics(f"{path.name}: sidecar is {sidecar.status}")
        if sidecar.data.get("policy") != "onl-mnl":
            continue
        try:
            frame = read_trace(path)
        except MalformedCsv as error:
            raise MissingDiagnostics(str(error)) from error
        runs.append((stem, frame, sidecar.data))
    return runs


def _format_witness(result: LemmaCheckResult) -> str:
    if result.passed or not result.witness:
        return ""
    return ", ".join(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}" for key, value in result.witness.items())


def sampled_kappa(config: ExperimentConfig, samples: int, rng: np.random.Generator) -> float:
    """Smallest p(0) p(i) seen with the estimator class on the configured contexts."""
    env = build_environment(config, int(config.audit["seed"]), horizon=1)
    model = build_estimator(config, env.dim)
    return sample_kappa(
        model.values,
        model.truth_params,
        lambda generator: env.draw_context(generator, 1).items,
        env.capacity,
        rng,
        samples,
    )


def _audit_markdown(title: str, checks, optimism: LemmaCheckResult, passed: bool, kappa: dict[str, float]) -> str:
    lines = [
        f"# Audit: {title}",
        "",
        f"Overall: {'PASS' if passed else 'FAIL'}",
        "",
        "| Check | Scope | Result | Instances | Worst margin | First failure |",
        "|---|---|---|---|---|---|",
    ]
    for scope, result in checks:
        worst = "" if not result.margins.size else f"{result.worst_margin:.3e}"
        lines.append(
            f"| {result.lemma} | {scope} | {'PASS' if result.passed else 'FAIL'} | "
            f"{result.margins.size} | {worst} | {_format_witness(result)} |"
        )
    lines += [
        "",
        "## Optimism fraction (informational)",
        "",
        f"Share of offered items whose optimistic utility was at least the true utility; "
        f"reference level {optimism.details.get('threshold', 0.9):g}.",
        "",
        "| Run | Fraction |",
        "|---|---|",
    ]
    for run, fraction in optimism.details.get("runs", {}).items():
        lines.append(f"| {run} | {fraction:.4f} |")
    lines += [
        "",
        "## Sampled kappa (informational)",
        "",
        f"Smallest p(0) p(i) over {kappa['samples']:.0f} random parameter, context and assortment draws: "
        f"{kappa['sampled']:.4g}. The schedule uses kappa = {kappa['configured']:g}.",
    ]
    return "\n".join(lines) + "\n"


def audit(config: ExperimentConfig, trace_dir: Path, out_dir: Path | None = None) -> AuditReport:
    trace_dir = Path(trace_dir)
    out = Path(out_dir) if out_dir is not None else trace_dir
    out.mkdir(parents=True, exist_ok=True)
    use_output_log(out)
    settings = config.audit
    runs = _onl_runs(trace_dir)
    if not runs:
        raise MissingDiagnostics(f"no onl-mnl traces with diagnostics in {trace_dir}")

    checks: list[tuple[str, LemmaCheckResult]] = []
    frames = {}
    for stem, frame, sidecar in runs:
        frames[stem] = frame
        info = sidecar.get("policy_info") or {}
        missing = [key for key in ("lambda", "d_w", "C_g") if key not in info]
        if missing:
            raise MissingDiagnostics(f"trace_{stem}.json lacks {missing[0]}")
        phase_two = frame[np.isfinite(frame["potential"].to_numpy(dtype=np.float64))]
        checks.append((stem, check_elliptical_potential(
            phase_two["potential"].to_numpy(dtype=np.float64),
            phase_two["round"].to_numpy(dtype=np.int64),
            float(info["lambda"]),
            int(info["d_w"]),
            float(info["C_g"]),
        )))
        gram_path = trace_dir / f"gram_{stem}.csv"
        if not gram_path.exists():
            if not phase_two.empty:
                raise MissingDiagnostics(f"{gram_path.name} is missing")
            continue
        gram = pd.read_csv(gram_path)
        checks.append((stem, check_gram_drift(gram, float(info["lambda"]), float(settings["drift_tolerance"]))))

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(settings["seed"]))))
    for dim, cap in product(settings["dims"], settings["caps"]):
        if dim > 6:
            run_log(f"audit: reverse-Lipschitz grid skipped for dim {dim} > 6")
            continue
        result = check_reverse_lipschitz(int(dim), float(cap), int(settings["pairs"]), rng, float(settings["kappa_scale"]))
        checks.append((f"dim={dim}, cap={cap:g}", result))

    optimism = check_optimism_rate(frames, float(settings["optimism_threshold"]))
    samples = int(settings["kappa_samples"])
    kappa = {
        "sampled": sampled_kappa(config, samples, rng),
        "configured": float(config.schedule["kappa"]),
        "samples": float(samples),
    }
    if kappa["sampled"] < kappa["configured"]:
        run_log(f"audit: sampled kappa {kappa['sampled']:.4g} is below the schedule's {kappa['configured']:g}")
    passed = all(result.passed for _, result in checks)
    text = _audit_markdown(config.name, checks, optimism, passed, kappa)
    atomic_write_text(out / "audit.md", text)
    atomic_write_text(out / "audit.html", render_markdown_page(text, REPORT_CSS, f"Audit: {config.name}"))
    write_json(out / "audit.json", {
        "name": config.name,
        "passed": passed,
        "checks": [{"scope": scope, **result.to_dict()} for scope, result in checks],
        "optimism": optimism.to_dict(),
        "kappa": kappa,
    })
    failed = [f"{result.lemma} ({scope})" for scope, result in checks if not result.passed]
    run_log(f"audit {config.name!r}: {'PASS' if passed else 'FAIL ' + ', '.join(failed)}")
    return AuditReport(passed, checks, optimism, text, kappa)


@dataclass
class GridResult:
    best: tuple[float, float]
    table: pd.DataFrame


def grid_search(config: ExperimentConfig, threads: int | None = None, progress: bool = True) -> GridResult:
    """Mean final regret of ``grid.policy`` at every (c_lambda, c_beta) point."""
    threads = resolve_threads(threads)
    grid = config.grid
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    use_output_log(out)
    entry = next((p for p in config.policies if p.name == grid["policy"]), PolicyEntry(grid["policy"]))
    points = list(product(grid["c_lambda"], grid["c_beta"]))
    tasks = []
    for c_lambda, c_beta in points:
        variant = config.with_overrides({
            "schedule.c_lambda": c_lambda,
            "schedule.c_beta": c_beta,
            "environment.horizon": grid["horizon"],
        })
        tasks.extend(RunTask(variant, entry, seed) for seed in grid["seeds"])
    run_log(f"grid {config.name!r}: {len(points)} points x {len(grid['seeds'])} seeds, policy {entry.name}")

    finals = [trace.cumulative_regret[-1] for trace in execute(tasks, threads, progress, desc="grid")]
    n_seeds = len(grid["seeds"])
    rows = []
    for i, (c_lambda, c_beta) in enumerate(points):
        values = np.asarray(finals[i * n_seeds:(i + 1) * n_seeds])
        rows.append({
            "c_lambda": float(c_lambda),
            "c_beta": float(c_beta),
            "mean_final_regret": float(values.mean()),
            "std_final_regret": float(values.std()),
        })
        run_log(f"grid point c_lambda={c_lambda:g} c_beta={c_beta:g}: mean final regret {values.mean():.6g}")
    table = pd.DataFrame(rows, columns=["c_lambda", "c_beta", "mean_final_regret", "std_final_regret"])
    atomic_write_text(out / "grid.csv", table.to_csv(index=False))
    best_row = table.iloc[int(table["mean_final_regret"].to_numpy().argmin())]
    best = (float(best_row["c_lambda"]), float(best_row["c_beta"]))
    run_log(f"grid {config.name!r}: best c_lambda={best[0]:g} c_beta={best[1]:g}")
    return GridResult(best, table)


def pilot_scaling(config: ExperimentConfig) -> tuple[LemmaCheckResult, pd.DataFrame]:
    settings = config.pilot_scaling
    env = config.environment
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    use_output_log(out)
    table = pilot_error_table(
        settings["t0_grid"],
        settings["seeds"],
        dim=int(env["dim"]),
        hidden_dim=int(config.estimator["hidden_dim"]),
        n_items=int(env["n_items"]),
        capacity=int(env["capacity"]),
        samples=int(settings["samples"]),
        optimizer=config.optimizer,
        estimator=settings["estimator"],
    )
    result = check_pilot_convergence(table)
    atomic_write_text(out / "pilot_scaling.csv", table.to_csv(index=False))
    write_json(out / "pilot_scaling.json", result.to_dict())
    run_log(f"pilot scaling {config.name!r}: {'PASS' if result.passed else 'FAIL'} {json.dumps(result.details['median_ratios'])}")
    return result, table


def train_truth(
    feature_path: Path,
    out_path: Path,
    hidden_dim: int = 32,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    holdout_fraction: float = DEFAULT_HOLDOUT,
) -> tuple[TwoLayerSigmoidNet, FitResult]:
    """Fit the truth network on the training rows only; the held-out rows
    later supply the run's contexts."""
    table = load_feature_file(feature_path)
    if table.labels is None:
        raise MalformedCsv(f"{Path(feature_path).name} has no label column", row=0, column="label")
    train, held = table.split(holdout_fraction)
    model, result = fit_truth_from_labels(
        train.features,
        train.labels,
        hidden_dim,
        optimizer or OptimizerConfig(),
        RngStreams(seed).generator("init"),
    )
    write_model_checkpoint(out_path, model, result.params, holdout_fraction=holdout_fraction, train_rows=len(train))
    run_log(f"truth model trained on {len(train)} rows ({len(held)} held out): loss {result.initial_loss:.6g} -> {result.loss:.6g}, written to {out_path}")
    return model, result

