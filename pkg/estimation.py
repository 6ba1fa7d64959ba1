"""Likelihood losses and their minimisers.

- ``PilotLoss``: negative log-likelihood of the Phase-I choices under f_w.
- ``LinearizedLoss``: Phase-II loss where every past round s is scored with
  the first-order expansion of f around the estimate that was live at round
  s, plus a ridge term pulling towards the pilot estimate.
- ``Adam`` and the fit routines, which always return the best iterate seen.
- Newton refits for the linear-utility baselines and the truth-model trainer
  used for feature-file environments.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from errors import DimensionMismatch, EmptyDataset, MissingAnchor, ValidationError
from helpers import load_json, write_json
from mnl_choice import log_normalizer
from mnl_types import ChoiceRecord, ParamVector, frozen_array, project_to_ball
from utility_models import TwoLayerSigmoidNet, UtilityModel

ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    iterations: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warm_start: bool = True
    per_round_iterations: int = 50
    round_learning_rate: float = 1e-3
    restarts: int = 1
    projection_radius: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.round_learning_rate <= 0:
            raise ValidationError("learning rates must be positive")
        if self.iterations < 1 or self.per_round_iterations < 1 or self.restarts < 1:
            raise ValidationError("iteration counts and restarts must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.epsilon <= 0:
            raise ValidationError("invalid Adam moment settings")


@dataclass
class FitResult:
    params: np.ndarray
    loss: float
    initial_loss: float
    best_iteration: int
    iterations: int

    @property
    def param_vector(self) -> ParamVector:
        return ParamVector(frozen_array(self.params))


class Adam:
    """Adam on a single flat parameter vector; moments survive across calls."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.m is None or self.m.shape != params.shape:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (grads * grads)
        denom = np.sqrt(self.v / bc2) + self.epsilon
        return params - (self.lr / bc1) * self.m / denom

    def state(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "m": [] if self.m is None else [float(x) for x in self.m],
            "v": [] if self.v is None else [float(x) for x in self.v],
        }

    def load_state(self, state: dict[str, Any]):
        self.t = int(state.get("t", 0))
        m, v = state.get("m") or [], state.get("v") or []
        self.m = np.asarray(m, dtype=np.float64) if m else None
        self.v = np.asarray(v, dtype=np.float64) if v else None


def adam_minimize(
    value_and_grad: ValueAndGrad,
    init: np.ndarray,
    iterations: int,
    optimizer: Adam,
    projection_radius: float | None = None,
) -> FitResult:
    w = np.array(init, dtype=np.float64)
    loss, grad = value_and_grad(w)
    initial = loss
    best_w, best_loss, best_iteration = w.copy(), loss, 0
    for iteration in range(1, iterations + 1):
        w = project_to_ball(optimizer.step(w, grad), projection_radius)
        loss, grad = value_and_grad(w)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            break
        if loss < best_loss:
            best_w, best_loss, best_iteration = w.copy(), loss, iteration
    return FitResult(best_w, float(best_loss), float(initial), best_iteration, iterations)


class ChoiceBatch:
    """Growable padded arrays over choice records: features (R, K, d),
    membership mask (R, K) and item one-hots (R, K); the outside option is
    implicit."""

    def __init__(self, dim: int, capacity: int, reserve: int = 64):
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.size = 0
        self._features = np.zeros((reserve, capacity, dim))
        self._mask = np.zeros((reserve, capacity), dtype=bool)
        self._y = np.zeros((reserve, capacity))

    @classmethod
    def from_records(cls, records: Sequence[ChoiceRecord], dim: int, capacity: int | None = None) -> "ChoiceBatch":
        if capacity is None:
            capacity = max((len(r.assortment) for r in records), default=1)
        batch = cls(dim, capacity, reserve=max(1, len(records)))
        for record in records:
            batch.append(record)
        return batch

    def _grow(self):
        reserve = 2 * self._features.shape[0]
        for name in ("_features", "_mask", "_y"):
            old = getattr(self, name)
            new = np.zeros((reserve,) + old.shape[1:], dtype=old.dtype)
            new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def append(self, record: ChoiceRecord):
        k = len(record.assortment)
        if record.context.dim != self.dim:
            raise DimensionMismatch(f"record has dimension {record.context.dim}, batch expects {self.dim}")
        if k > self.capacity:
            raise DimensionMismatch(f"record offers {k} items, batch capacity is {self.capacity}")
        if self.size == self._features.shape[0]:
            self._grow()
        row = self.size
        self._features[row, :k] = record.context.rows(record.assortment.item_indices)
        self._mask[row, :k] = True
        self._y[row, :k] = record.item_one_hot
        self.size += 1

    @property
    def features(self) -> np.ndarray:
        return self._features[: self.size]

    @property
    def mask(self) -> np.ndarray:
        return self._mask[: self.size]

    @property
    def y(self) -> np.ndarray:
        return self._y[: self.size]


def _masked_nll(U: np.ndarray, mask: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """NLL of one-hot choices for utilities U (padded entries -inf) and the
    residual P - y."""
    log_z = log_normalizer(U, axis=1)
    chosen = np.where(mask, U, 0.0)
    value = float(log_z.sum() - (y * chosen).sum())
    P = np.exp(U - log_z[:, None])
    return value, P - y


class PilotLoss:
    """L(w) = -sum_t log p(i_t | X_t, S_t, w) over the Phase-I records."""

    def __init__(self, records: Sequence[ChoiceRecord], model: UtilityModel):
        self.model = model
        self.records = list(records)
        self.batch = ChoiceBatch.from_records(self.records, model.input_dim)

    def __len__(self) -> int:
        return self.batch.size

    def value_and_grad(self, w) -> tuple[float, np.ndarray]:
        w = np.asarray(w.values if isinstance(w, ParamVector) else w, dtype=np.float64)
        if w.shape != (self.model.d_w,):
            raise DimensionMismatch(f"expected {self.model.d_w} parameters, got shape {w.shape}")
        if self.batch.size == 0:
            return 0.0, np.zeros(self.model.d_w)
        mask = self.batch.mask
        flat = self.batch.features[mask]
        U = np.full(mask.shape, -np.inf)
        U[mask] = self.model.values(w, flat)
        value, residual = _masked_nll(U, mask, self.batch.y)
        return value, self.model.gradient_dot(w, flat, residual[mask])

    def value(self, w) -> float:
        return self.value_and_grad(w)[0]


@dataclass(frozen=True)
class AnchorPoint:
    """Frozen first-order expansion data for one past round."""

    round_index: int
    w_anchor: np.ndarray
    f_values: np.ndarray
    gradients: np.ndarray


class LinearizedLoss:
    """Choice NLL over every Phase-II round plus a ridge (lam / 2) ||w - center||^2.

    Each past round contributes utilities linearised around the estimate used
    when it was played: f(x) + g . (w - w_played), with f, g and w_played frozen.
    Utilities are affine in w and are stored as offsets f - g . w_played plus
    the stacked gradients.
    """

    def __init__(self, d_w: int, capacity: int, lam: float, center: np.ndarray, reserve: int = 64):
        if lam <= 0:
            raise ValidationError(f"regularisation must be positive, got {lam}")
        center = np.asarray(center, dtype=np.float64)
        if center.shape != (d_w,):
            raise DimensionMismatch(f"center must have {d_w} entries, got shape {center.shape}")
        self.d_w = int(d_w)
        self.capacity = int(capacity)
        self.lam = float(lam)
        self.center = frozen_array(center)
        self.anchors: list[AnchorPoint] = []
        self.records: list[ChoiceRecord] = []
        self._offsets = np.full((reserve, capacity), -np.inf)
        self._grads = np.zeros((reserve, capacity, d_w))
        self._mask = np.zeros((reserve, capacity), dtype=bool)
        self._y = np.zeros((reserve, capacity))

    def __len__(self) -> int:
        return len(self.anchors)

    def _grow(self):
        reserve = 2 * self._offsets.shape[0]
        for name, fill in (("_offsets", -np.inf), ("_grads", 0.0), ("_mask", False), ("_y", 0.0)):
            old = getattr(self, name)
            new = np.full((reserve,) + old.shape[1:], fill, dtype=old.dtype)
            new[: len(self)] = old[: len(self)]
            setattr(self, name, new)

    def append(self, record: ChoiceRecord, f_values, gradients, w_anchor):
        k = len(record.assortment)
        if f_values is None or gradients is None or w_anchor is None:
            raise MissingAnchor(f"round {record.context.round_index} has no anchor")
        f_values = np.asarray(f_values, dtype=np.float64).reshape(-1)
        gradients = np.asarray(gradients, dtype=np.float64)
        w_anchor = np.asarray(w_anchor, dtype=np.float64)
        if f_values.shape != (k,) or gradients.shape != (k, self.d_w):
            raise MissingAnchor(
                f"round {record.context.round_index} anchors cover {f_values.shape[0]} of {k} offered items"
            )
        if w_anchor.shape != (self.d_w,):
            raise DimensionMismatch(f"anchor estimate must have {self.d_w} entries")
        if k > self.capacity:
            raise DimensionMismatch(f"record offers {k} items, loss capacity is {self.capacity}")
        if len(self) == self._offsets.shape[0]:
            self._grow()
        row = len(self)
        self._offsets[row, :k] = f_values - gradients @ w_anchor
        self._grads[row, :k] = gradients
        self._mask[row, :k] = True
        self._y[row, :k] = record.item_one_hot
        self.anchors.append(AnchorPoint(
            record.context.round_index,
            frozen_array(w_anchor),
            frozen_array(f_values),
            frozen_array(gradients),
        ))
        self.records.append(record)

    def utilities(self, w) -> np.ndarray:
        """Linearised utilities (R, K); absent items are -inf."""
        w = np.asarray(w, dtype=np.float64)
        R = len(self)
        return self._offsets[:R] + np.einsum("rkd,d->rk", self._grads[:R], w)

    def value_and_grad(self, w) -> tuple[float, np.ndarray]:
        w = np.asarray(w.values if isinstance(w, ParamVector) else w, dtype=np.float64)
        if w.shape != (self.d_w,):
            raise DimensionMismatch(f"expected {self.d_w} parameters, got shape {w.shape}")
        shift = w - self.center
        value = 0.5 * self.lam * float(shift @ shift)
        grad = self.lam * shift
        R = len(self)
        if R:
            nll, residual = _masked_nll(self.utilities(w), self._mask[:R], self._y[:R])
            value += nll
            grad = grad + np.einsum("rk,rkd->d", residual, self._grads[:R])
        return value, grad

    def value(self, w) -> float:
        return self.value_and_grad(w)[0]


def fit_pilot(loss: PilotLoss, init, cfg: OptimizerConfig, rng: np.random.Generator) -> FitResult:
    """Adam on the pilot NLL from ``init``; extra restarts start from fresh
    random initialisations and the lowest-loss result wins."""
    if len(loss) == 0:
        raise EmptyDataset("the pilot estimator needs at least one choice record")
    init = np.asarray(init.values if isinstance(init, ParamVector) else init, dtype=np.float64)
    best: FitResult | None = None
    for restart in range(cfg.restarts):
        start = init if restart == 0 else loss.model.initial_params(rng)
        optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        result = adam_minimize(loss.value_and_grad, start, cfg.iterations, optimizer, cfg.projection_radius)
        if best is None or result.loss < best.loss:
            best = result
    return best


def fit_round(
    loss: LinearizedLoss,
    warm,
    cfg: OptimizerConfig,
    optimizer: Adam | None = None,
    iterations: int | None = None,
) -> FitResult:
    """Warm-started Adam on l_t; never returns a point worse than ``warm``."""
    warm = np.asarray(warm.values if isinstance(warm, ParamVector) else warm, dtype=np.float64)
    if optimizer is None:
        optimizer = Adam(cfg.round_learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    start = warm if cfg.warm_start else np.array(loss.center)
    result = adam_minimize(
        loss.value_and_grad,
        start,
        iterations or cfg.per_round_iterations,
        optimizer,
        cfg.projection_radius,
    )
    if not cfg.warm_start:
        warm_loss = loss.value(warm)
        if warm_loss < result.loss:
            return FitResult(warm.copy(), warm_loss, result.initial_loss, 0, result.iterations)
    return result


def linear_mnl_newton(
    batch: ChoiceBatch,
    init: np.ndarray,
    lam: float,
    steps: int = 3,
) -> np.ndarray:
    """Damped Newton steps on the ridge-regularised linear-utility MNL NLL.

    The objective is convex; each step halves until the loss does not rise.
    """

    def evaluate(theta: np.ndarray):
        R = batch.size
        if R == 0:
            return 0.5 * lam * float(theta @ theta), lam * theta, None
        mask, X = batch.mask, batch.features
        U = np.where(mask, X @ theta, -np.inf)
        value, residual = _masked_nll(U, mask, batch.y)
        value += 0.5 * lam * float(theta @ theta)
        grad = np.einsum("rk,rkd->d", residual, X) + lam * theta
        return value, grad, residual + batch.y

    theta = np.array(init, dtype=np.float64)
    value, grad, P = evaluate(theta)
    for _ in range(steps):
        H = lam * np.eye(theta.size)
        if P is not None:
            X = batch.features
            PX = P[..., None] * X
            mean = PX.sum(axis=1)
            H = H + np.einsum("rkd,rke->de", PX, X) - mean.T @ mean
        direction = np.linalg.solve(H, grad)
        step = 1.0
        for _ in range(20):
            candidate = theta - step * direction
            cand_value, cand_grad, cand_P = evaluate(candidate)
            if cand_value <= value:
                theta, value, grad, P = candidate, cand_value, cand_grad, cand_P
                break
            step *= 0.5
        else:
            break
    return theta


def fit_truth_from_labels(
    features: np.ndarray,
    labels: np.ndarray,
    hidden_dim: int,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
) -> tuple[TwoLayerSigmoidNet, FitResult]:
    """Train a two-layer sigmoid network as a binary classifier; its logit
    becomes the ground-truth utility of a feature-file environment."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("no labelled feature rows to train on")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    model = TwoLayerSigmoidNet(X.shape[1], hidden_dim)

    def value_and_grad(w: np.ndarray):
        logits = model.values(w, X)
        value = float(np.sum(np.logaddexp(0.0, logits) - y * logits))
        return value, model.gradient_dot(w, X, expit(logits) - y)

    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    result = adam_minimize(value_and_grad, model.initial_params(rng), cfg.iterations, optimizer)
    return model, result


@dataclass
class Checkpoint:
    round_index: int
    w_hat: np.ndarray
    w_pilot: np.ndarray | None
    optimizer_moments: dict[str, Any] = field(default_factory=dict)


def write_checkpoint(path: Path, checkpoint: Checkpoint):
    write_json(Path(path), {
        "round": checkpoint.round_index,
        "w_hat": [float(v) for v in checkpoint.w_hat],
        "w_pilot": None if checkpoint.w_pilot is None else [float(v) for v in checkpoint.w_pilot],
        "optimizer_moments": checkpoint.optimizer_moments,
    })


def load_checkpoint(path: Path) -> Checkpoint:
    result = load_json(Path(path))
    if not result.valid or not isinstance(result.data, dict):
        raise ValidationError(f"checkpoint {path} is {result.status}: {result.error or 'not an object'}")
    data = result.data
    pilot = data.get("w_pilot")
    return Checkpoint(
        int(data.get("round", 0)),
        np.asarray(data.get("w_hat") or [], dtype=np.float64),
        None if pilot is None else np.asarray(pilot, dtype=np.float64),
        dict(data.get("optimizer_moments") or {}),
    )
