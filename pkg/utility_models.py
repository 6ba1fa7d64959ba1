"""Parametric utility functions f_w(x) with exact values, hand-derived
gradients and closed-form bound constants (C_f, C_g, C_h).

Models evaluate whole item batches: ``values(w, X)`` returns one utility per
row of X, ``gradients(w, X)`` one gradient row per item, and
``gradient_dot(w, X, coef)`` the weighted sum of gradients without building
the (n, d_w) matrix. Hessians are never materialised; only the bound C_h is
exposed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from errors import DimensionMismatch, ValidationError
from helpers import load_json, write_json
from mnl_types import ParamVector

# max |s''(z)| for the logistic sigmoid, attained at z = ln(2 +- sqrt(3))
SIGMOID_CURVATURE = 1.0 / (6.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class BoundConstants:
    C_f: float
    C_g: float
    C_h: float


class UtilityModel:
    """Common validation for every model class; subclasses supply the maths."""

    kind = "abstract"

    def __init__(self, input_dim: int, param_cap: float = 1.0, feature_cap: float = 1.0):
        if input_dim < 1:
            raise ValidationError(f"input dimension must be >= 1, got {input_dim}")
        if param_cap <= 0 or feature_cap <= 0:
            raise ValidationError("norm caps must be positive")
        self.input_dim = int(input_dim)
        self.param_cap = float(param_cap)
        self.feature_cap = float(feature_cap)

    @property
    def d_w(self) -> int:
        raise NotImplementedError

    def _check(self, w: Any, X: Any) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w.values if isinstance(w, ParamVector) else w, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if w.shape != (self.d_w,):
            raise DimensionMismatch(f"{self.kind} expects {self.d_w} parameters, got shape {w.shape}")
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionMismatch(
                f"{self.kind} expects features of dimension {self.input_dim}, got shape {X.shape}"
            )
        return w, X

    def values(self, w, X) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, w, X) -> np.ndarray:
        raise NotImplementedError

    def gradient_dot(self, w, X, coef) -> np.ndarray:
        w, X = self._check(w, X)
        return np.asarray(coef, dtype=np.float64) @ self.gradients(w, X)

    def value(self, w, x) -> float:
        return float(self.values(w, x)[0])

    def grad(self, w, x) -> np.ndarray:
        return self.gradients(w, x)[0]

    def bound_constants(self) -> BoundConstants:
        raise NotImplementedError

    def initial_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.d_w)

    def truth_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.d_w)

    def with_caps(self, param_cap: float, feature_cap: float) -> "UtilityModel":
        raise NotImplementedError

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "input_dim": self.input_dim}


class LinearUtility(UtilityModel):
    kind = "linear"

    @property
    def d_w(self) -> int:
        return self.input_dim

    def values(self, w, X) -> np.ndarray:
        w, X = self._check(w, X)
        return X @ w

    def gradients(self, w, X) -> np.ndarray:
        _, X = self._check(w, X)
        return X.copy()

    def gradient_dot(self, w, X, coef) -> np.ndarray:
        _, X = self._check(w, X)
        return np.asarray(coef, dtype=np.float64) @ X

    def bound_constants(self) -> BoundConstants:
        # Cauchy-Schwarz; the Hessian of a linear map is zero.
        return BoundConstants(self.param_cap * self.feature_cap, self.feature_cap, 0.0)

    def with_caps(self, param_cap: float, feature_cap: float) -> "LinearUtility":
        return LinearUtility(self.input_dim, param_cap, feature_cap)


class TwoLayerSigmoidNet(UtilityModel):
    """f_w(x) = w2 . sigmoid(W1 x + b1) + b2 with parameters flattened as
    [W1 (m x d, row-major), b1 (m), w2 (m), b2]."""

    kind = "two_layer_sigmoid"

    def __init__(self, input_dim: int, hidden_dim: int, param_cap: float = 1.0, feature_cap: float = 1.0):
        super().__init__(input_dim, param_cap, feature_cap)
        if hidden_dim < 1:
            raise ValidationError(f"hidden dimension must be >= 1, got {hidden_dim}")
        self.hidden_dim = int(hidden_dim)

    @property
    def d_w(self) -> int:
        m, d = self.hidden_dim, self.input_dim
        return m * d + m + m + 1

    def unpack(self, w: np.ndarray):
        m, d = self.hidden_dim, self.input_dim
        W1 = w[: m * d].reshape(m, d)
        b1 = w[m * d : m * d + m]
        w2 = w[m * d + m : m * d + 2 * m]
        b2 = w[-1]
        return W1, b1, w2, b2

    def _forward(self, w: np.ndarray, X: np.ndarray):
        W1, b1, w2, b2 = self.unpack(w)
        hidden = expit(X @ W1.T + b1)
        return hidden, hidden @ w2 + b2

    def values(self, w, X) -> np.ndarray:
        w, X = self._check(w, X)
        return self._forward(w, X)[1]

    def gradients(self, w, X) -> np.ndarray:
        w, X = self._check(w, X)
        _, _, w2, _ = self.unpack(w)
        hidden, _ = self._forward(w, X)
        delta = w2 * hidden * (1.0 - hidden)  # d f / d (W1 x + b1), shape (n, m)
        n = X.shape[0]
        dW1 = (delta[:, :, None] * X[:, None, :]).reshape(n, -1)
        return np.hstack([dW1, delta, hidden, np.ones((n, 1))])

    def gradient_dot(self, w, X, coef) -> np.ndarray:
        w, X = self._check(w, X)
        coef = np.asarray(coef, dtype=np.float64)
        _, _, w2, _ = self.unpack(w)
        hidden, _ = self._forward(w, X)
        delta = coef[:, None] * (w2 * hidden * (1.0 - hidden))
        return np.concatenate([
            (delta.T @ X).ravel(),
            delta.sum(axis=0),
            hidden.T @ coef,
            [coef.sum()],
        ])

    def bound_constants(self) -> BoundConstants:
        """Bounds for ||w|| <= param_cap and ||x|| <= feature_cap.

        C_f: |w2 . s + b2| <= sqrt(m) ||w2|| + |b2| <= rho sqrt(m + 1).
        C_g: output-layer block has norm <= sqrt(m + 1); hidden blocks are
             w2_j s'_j (x, 1) with s' <= 1/4, so norm <= rho sqrt(1 + B^2) / 4.
        C_h: the cross block (output x hidden) has operator norm
             <= sqrt(1 + B^2) / 4 and the hidden block is diagonal in j with
             norm <= rho (1 + B^2) max|s''|.
        """
        m = self.hidden_dim
        rho, B = self.param_cap, self.feature_cap
        lift = 1.0 + B * B
        C_f = rho * math.sqrt(m + 1.0)
        C_g = math.sqrt(m + 1.0 + rho * rho * lift / 16.0)
        C_h = math.sqrt(lift) / 4.0 + rho * lift * SIGMOID_CURVATURE
        return BoundConstants(C_f, C_g, C_h)

    def initial_params(self, rng: np.random.Generator) -> np.ndarray:
        # Uniform(+-1/sqrt(fan_in)) per layer, the usual default for linear layers.
        m, d = self.hidden_dim, self.input_dim
        first = rng.uniform(-1.0, 1.0, size=m * d + m) / math.sqrt(d)
        second = rng.uniform(-1.0, 1.0, size=m + 1) / math.sqrt(m)
        return np.concatenate([first, second])

    def with_caps(self, param_cap: float, feature_cap: float) -> "TwoLayerSigmoidNet":
        return TwoLayerSigmoidNet(self.input_dim, self.hidden_dim, param_cap, feature_cap)

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden_dim": self.hidden_dim}


class CosineMixtureUtility(UtilityModel):
    """Misspecified ground truth f(x) = cos(2 pi s) - s / 2 with s = x . w*."""

    kind = "cosine_mixture"

    @property
    def d_w(self) -> int:
        return self.input_dim

    def values(self, w, X) -> np.ndarray:
        w, X = self._check(w, X)
        s = X @ w
        return np.cos(2.0 * np.pi * s) - 0.5 * s

    def gradients(self, w, X) -> np.ndarray:
        w, X = self._check(w, X)
        s = X @ w
        slope = -2.0 * np.pi * np.sin(2.0 * np.pi * s) - 0.5
        return slope[:, None] * X

    def bound_constants(self) -> BoundConstants:
        B = self.feature_cap
        return BoundConstants(
            1.0 + 0.5 * self.param_cap * B,
            (2.0 * np.pi + 0.5) * B,
            4.0 * np.pi ** 2 * B * B,
        )

    def with_caps(self, param_cap: float, feature_cap: float) -> "CosineMixtureUtility":
        return CosineMixtureUtility(self.input_dim, param_cap, feature_cap)


def model_from_description(spec: Mapping[str, Any], param_cap: float = 1.0, feature_cap: float = 1.0) -> UtilityModel:
    kind = spec.get("kind")
    try:
        input_dim = int(spec["input_dim"])
        if kind == TwoLayerSigmoidNet.kind:
            return TwoLayerSigmoidNet(input_dim, int(spec["hidden_dim"]), param_cap, feature_cap)
    except (KeyError, TypeError) as error:
        raise ValidationError(f"incomplete model description: {error}") from error
    if kind == LinearUtility.kind:
        return LinearUtility(input_dim, param_cap, feature_cap)
    if kind == CosineMixtureUtility.kind:
        return CosineMixtureUtility(input_dim, param_cap, feature_cap)
    raise ValidationError(f"unknown model kind: {kind!r}")


def write_model_checkpoint(path: Path, model: UtilityModel, params: np.ndarray, **extra: Any):
    write_json(Path(path), {
        "model": model.describe(),
        "params": [float(v) for v in np.asarray(params)],
        **extra,
    })


def load_model_checkpoint(path: Path) -> tuple[UtilityModel, np.ndarray]:
    result = load_json(Path(path))
    if not result.valid or not isinstance(result.data, dict):
        raise ValidationError(f"model checkpoint {path} is {result.status}: {result.error or 'not an object'}")
    model = model_from_description(result.data.get("model") or {})
    params = np.asarray(result.data.get("params"), dtype=np.float64)
    if params.shape != (model.d_w,):
        raise DimensionMismatch(f"checkpoint holds {params.size} parameters, model needs {model.d_w}")
    return model, params
