import argparse
import sys
from pathlib import Path

from app_paths import CONFIG_FP, PRESETS_DIR
from errors import ConfigError, MissingDiagnostics, MnlLabError
from estimation import OptimizerConfig
from experiment_config import load_experiment
from harness import audit, grid_search, pilot_scaling, run_experiment, train_truth
from helpers import run_log
from simulator import DEFAULT_HOLDOUT

EXIT_AUDIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING_DIAGNOSTICS = 4


def resolve_config_path(value: str) -> Path:
    """A config file path, or the name of a shipped preset (``gaussian_realizable``)."""
    path = Path(value).expanduser()
    if path.exists():
        return path
    for suffix in (".json", ".toml"):
        preset = PRESETS_DIR / f"{value}{suffix}"
        if preset.exists():
            return preset
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnl-lab", description="Contextual MNL bandit experiments.")
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, help_text: str, config_required: bool = False) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        if config_required:
            sub.add_argument("config", help="config file (.json or .toml) or preset name")
        else:
            sub.add_argument("config", nargs="?", default=str(CONFIG_FP),
                             help="config file (.json or .toml) or preset name; default config.json")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config value, e.g. --set environment.horizon=200")
        sub.add_argument("--seed-range", metavar="A..B", help="replace the seed list with A..B inclusive")
        sub.add_argument("--out", metavar="DIR", help="output directory")
        return sub

    run = experiment_command("run", "run every (policy, seed) pair and aggregate regret")
    grid = experiment_command("grid", "grid search over (c_lambda, c_beta)")
    for sub in (run, grid):
        sub.add_argument("--threads", type=int, help="worker processes (default: MNL_LAB_THREADS or 1)")
        sub.add_argument("--no-progress", action="store_true", help="hide the progress bar")

    check = experiment_command("audit", "check the recorded runs against the confidence-set inequalities", config_required=True)
    check.add_argument("trace_dir", help="directory holding trace_*.csv files")

    experiment_command("pilot-scaling", "pilot estimation error against the Phase-I length")

    truth = commands.add_parser("train-truth", help="train a truth network on a labelled feature CSV")
    truth.add_argument("features", help="CSV with id, f0..f{d-1} and label columns")
    truth.add_argument("out", help="checkpoint JSON to write")
    truth.add_argument("--hidden", type=int, default=32, help="hidden units (default 32)")
    truth.add_argument("--iterations", type=int, default=2000)
    truth.add_argument("--learning-rate", type=float, default=1e-3)
    truth.add_argument("--seed", type=int, default=0)
    truth.add_argument("--holdout", type=float, default=DEFAULT_HOLDOUT,
                       help=f"share of rows kept for contexts, not training (default {DEFAULT_HOLDOUT:g})")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "train-truth":
        cfg = OptimizerConfig(learning_rate=args.learning_rate, iterations=args.iterations)
        _, result = train_truth(Path(args.features), Path(args.out), args.hidden, cfg, args.seed, args.holdout)
        print(f"trained: loss {result.initial_loss:.6g} -> {result.loss:.6g}; wrote {args.out}")
        return 0

    config = load_experiment(resolve_config_path(args.config), args.overrides, args.seed_range, args.out)
    if args.command == "run":
        result = run_experiment(config, args.threads, progress=not args.no_progress)
        for name, curve in result.curves.items():
            print(f"{name:>16}  final regret {curve.final_mean:10.4f} +- {curve.final_std:.4f}")
        print(f"results in {config.output_dir}")
        return 0
    if args.command == "grid":
        result = grid_search(config, args.threads, progress=not args.no_progress)
        print(result.table.to_string(index=False))
        print(f"best: c_lambda={result.best[0]:g} c_beta={result.best[1]:g}")
        return 0
    if args.command == "audit":
        out = Path(args.out) if args.out else None
        report = audit(config, Path(args.trace_dir), out)
        print(report.markdown)
        return 0 if report.passed else EXIT_AUDIT_FAILED
    check, table = pilot_scaling(config)
    print(table.groupby("t0")["error"].median().to_string())
    print("PASS" if check.passed else "FAIL")
    return 0 if check.passed else EXIT_AUDIT_FAILED


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as error:
        for problem in error.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDiagnostics as error:
        print(f"missing diagnostics: {error}", file=sys.stderr)
        return EXIT_MISSING_DIAGNOSTICS
    except OSError as error:
        run_log(f"{args.command} failed", error)
        print(f"I/O error: {error}", file=sys.stderr)
        return EXIT_IO
    except MnlLabError as error:
        run_log(f"{args.command} failed", error)
        print(f"error: {error}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(run())
