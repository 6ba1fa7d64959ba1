"""Executable checks of the structural inequalities behind ONL-MNL.

Each check returns a ``LemmaCheckResult`` with one margin per instance
(positive or zero means the inequality held), a pass flag and the worst
instance as a witness. ``harness.audit`` serialises these into its report.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from confidence import elliptical_potential_curve
from errors import ValidationError
from estimation import ChoiceBatch, OptimizerConfig, PilotLoss, fit_pilot, linear_mnl_newton
from mnl_choice import choice_probabilities, item_probabilities, reverse_lipschitz_constant, sample_choice
from mnl_types import ChoiceRecord, assortment_size_weights, make_context_set, uniform_assortment_sample
from simulator import RngStreams
from utility_models import LinearUtility, TwoLayerSigmoidNet, UtilityModel

MARGIN_TOLERANCE = 1e-12
PILOT_RATIO_LIMIT = 0.75


@dataclass
class LemmaCheckResult:
    lemma: str
    margins: np.ndarray
    passed: bool
    witness: dict[str, Any] | None = None
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margins)) if self.margins.size else math.inf

    def to_dict(self) -> dict[str, Any]:
        return {
            "lemma": self.lemma,
            "passed": self.passed,
            "instances": int(self.margins.size),
            "worst_margin": None if not self.margins.size else self.worst_margin,
            "witness": self.witness,
            "details": self.details,
        }


def _ball_points(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    directions = rng.standard_normal((n, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radii = radius * rng.random((n, 1)) ** (1.0 / dim)
    return directions / norms * radii


def check_reverse_lipschitz(
    dim: int,
    cap: float,
    n_pairs: int,
    rng: np.random.Generator,
    kappa_scale: float = 1.0,
    grid_resolution: int = 21,
) -> LemmaCheckResult:
    """||h(a) - h(b)|| >= kappa0 ||a - b|| on random pairs inside the ball of radius ``cap``."""
    if dim < 1 or dim > 6:
        raise ValidationError(f"reverse-Lipschitz grid is limited to 1 <= dim <= 6, got {dim}")
    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    kappa0 = reverse_lipschitz_constant(dim, cap, grid_resolution) * kappa_scale
    a = _ball_points(rng, n_pairs, dim, cap)
    b = _ball_points(rng, n_pairs, dim, cap)
    lhs = np.linalg.norm(item_probabilities(a) - item_probabilities(b), axis=1)
    rhs = kappa0 * np.linalg.norm(a - b, axis=1)
    margins = lhs - rhs
    worst = int(np.argmin(margins))
    return LemmaCheckResult(
        lemma="reverse_lipschitz",
        margins=margins,
        passed=bool(np.all(margins >= -MARGIN_TOLERANCE)),
        witness={"a": a[worst].tolist(), "b": b[worst].tolist(), "margin": float(margins[worst])},
        details={"dim": dim, "cap": cap, "kappa0": kappa0, "pairs": n_pairs},
    )


def check_elliptical_potential(
    potentials: Sequence[float],
    rounds: Sequence[int],
    lam: float,
    d_w: int,
    C_g: float,
    tolerance: float = 1e-9,
) -> LemmaCheckResult:
    if len(potentials) == 0:
        return LemmaCheckResult("elliptical_potential", np.zeros(0), True)
    lhs, rhs = elliptical_potential_curve(potentials, rounds, lam, d_w, C_g)
    margins = rhs - lhs
    bad = np.flatnonzero(margins < -tolerance)
    witness = None
    if bad.size:
        first = int(bad[0])
        witness = {"round": int(rounds[first]), "lhs": float(lhs[first]), "rhs": float(rhs[first])}
    return LemmaCheckResult(
        lemma="elliptical_potential",
        margins=margins,
        passed=not bad.size,
        witness=witness,
        details={"lambda": lam, "d_w": d_w, "C_g": C_g, "final_lhs": float(lhs[-1]), "final_rhs": float(rhs[-1])},
    )


def check_gram_drift(rows: pd.DataFrame, lam: float, tolerance: float = 1e-8) -> LemmaCheckResult:
    """Inverse drift within ``tolerance`` and min eigenvalue >= lam at every audited round."""
    audited = rows.dropna(subset=["inv_drift"])
    if audited.empty:
        return LemmaCheckResult("gram_inverse_drift", np.zeros(0), True, details={"audits": 0})
    drift = audited["inv_drift"].to_numpy(dtype=np.float64)
    eig = audited["min_eig"].to_numpy(dtype=np.float64)
    margins = np.minimum(tolerance - drift, eig - lam * (1.0 - 1e-9))
    bad = np.flatnonzero(margins < 0)
    witness = None
    if bad.size:
        first = int(bad[0])
        witness = {
            "round": int(audited["round"].iloc[first]),
            "inv_drift": float(drift[first]),
            "min_eig": float(eig[first]),
        }
    return LemmaCheckResult(
        lemma="gram_inverse_drift",
        margins=margins,
        passed=not bad.size,
        witness=witness,
        details={"audits": int(audited.shape[0]), "max_drift": float(drift.max()), "lambda": lam},
    )


def optimism_fraction(frame: pd.DataFrame) -> float:
    """Share of offered (round, item) pairs whose optimistic utility was at least the true one."""
    rows = frame.dropna(subset=["optimism_frac"])
    if rows.empty:
        return math.nan
    sizes = rows["assortment"].astype(str).str.split().str.len().to_numpy(dtype=np.float64)
    return float((rows["optimism_frac"].to_numpy(dtype=np.float64) * sizes).sum() / sizes.sum())


def check_optimism_rate(frames: Mapping[str, pd.DataFrame], threshold: float = 0.9) -> LemmaCheckResult:
    """Informational: the guarantee holds only on the confidence event."""
    names = [name for name in frames if not math.isnan(optimism_fraction(frames[name]))]
    fractions = np.array([optimism_fraction(frames[name]) for name in names])
    witness = None
    if fractions.size:
        worst = int(np.argmin(fractions))
        witness = {"run": names[worst], "fraction": float(fractions[worst])}
    return LemmaCheckResult(
        lemma="optimism_rate",
        margins=fractions - threshold,
        passed=bool(np.all(fractions >= threshold)),
        witness=witness,
        details={"threshold": threshold, "runs": dict(zip(names, fractions.tolist()))},
    )


def _phase_one_records(truth: UtilityModel, w_star, n_items: int, dim: int, capacity: int, rounds: int, rng) -> list[ChoiceRecord]:
    records = []
    for t in range(1, rounds + 1):
        context = make_context_set(rng.standard_normal((n_items, dim)), t)
        assortment = uniform_assortment_sample(n_items, capacity, rng)
        dist = choice_probabilities(truth.values(w_star, context.rows(assortment.item_indices)))
        records.append(ChoiceRecord.from_position(context, assortment, sample_choice(dist, rng)))
    return records


def function_error(model: UtilityModel, w_hat, truth: UtilityModel, w_star, dim: int, capacity: int, n_items: int, samples: int, rng) -> float:
    """Expected squared utility error summed over a uniform random assortment of
    fresh Gaussian items. Items are exchangeable, so only the size of the
    assortment has to be sampled."""
    weights = assortment_size_weights(n_items, capacity)
    sizes = rng.choice(weights.size, size=samples, p=weights) + 1
    X = rng.standard_normal((int(sizes.sum()), dim))
    errors = (model.values(w_hat, X) - truth.values(w_star, X)) ** 2
    return float(errors.sum() / samples)


def pilot_error_table(
    t0_grid: Iterable[int],
    seeds: Iterable[int],
    dim: int = 3,
    hidden_dim: int = 3,
    n_items: int = 100,
    capacity: int = 5,
    samples: int = 10_000,
    optimizer: OptimizerConfig | None = None,
    estimator: str = "two_layer_sigmoid",
    init_from_truth: bool = False,
) -> pd.DataFrame:
    """Pilot function error for each (t0, seed); each seed reuses one stream
    of Phase-I records so larger t0 extend smaller ones."""
    optimizer = optimizer or OptimizerConfig()
    t0_grid = sorted(int(t) for t in t0_grid)
    if estimator == "linear":
        truth = LinearUtility(dim)
    else:
        truth = TwoLayerSigmoidNet(dim, hidden_dim)
    rows = []
    for seed in seeds:
        streams = RngStreams(seed)
        w_star = truth.truth_params(streams.generator("truth"))
        records = _phase_one_records(truth, w_star, n_items, dim, capacity, t0_grid[-1], streams.generator("choices"))
        for t0 in t0_grid:
            prefix = records[:t0]
            init_rng = RngStreams(seed).generator("init")
            if estimator == "linear":
                batch = ChoiceBatch.from_records(prefix, dim, capacity)
                start = w_star if init_from_truth else np.zeros(dim)
                w_hat = linear_mnl_newton(batch, start, lam=1e-6, steps=25)
            else:
                start = w_star if init_from_truth else truth.initial_params(init_rng)
                w_hat = fit_pilot(PilotLoss(prefix, truth), start, optimizer, init_rng).params
            error = function_error(truth, w_hat, truth, w_star, dim, capacity, n_items, samples, RngStreams(seed).generator("contexts"))
            rows.append({"t0": t0, "seed": int(seed), "error": error})
    return pd.DataFrame(rows, columns=["t0", "seed", "error"])


def check_pilot_convergence(table: pd.DataFrame, ratio_limit: float = PILOT_RATIO_LIMIT) -> LemmaCheckResult:
    """Median (over seeds) of error(2 t0) / error(t0) for every doubling in the grid."""
    pivot = table.pivot(index="seed", columns="t0", values="error")
    grid = sorted(pivot.columns)
    ratios = {}
    for small in grid:
        if 2 * small in pivot.columns:
            ratio = pivot[2 * small] / pivot[small].where(pivot[small] > 0)
            ratios[f"{small}->{2 * small}"] = float(np.nanmedian(ratio.to_numpy(dtype=np.float64)))
    values = np.array(list(ratios.values()))
    margins = ratio_limit - values
    witness = None
    if values.size:
        worst = int(np.argmin(margins))
        witness = {"doubling": list(ratios)[worst], "median_ratio": float(values[worst])}
    return LemmaCheckResult(
        lemma="pilot_convergence",
        margins=margins,
        passed=bool(values.size) and bool(np.all(margins >= 0)),
        witness=witness,
        details={"median_ratios": ratios, "median_error": {int(k): float(v) for k, v in table.groupby("t0")["error"].median().items()}},
    )
