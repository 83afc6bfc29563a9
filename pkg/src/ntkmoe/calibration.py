"""Variance-driven temperature scaling for classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import forward_batch
from .pipeline import MoeModel, predict_moe_batch

LAMBDA_GRID = (0.0,) + tuple(10.0 ** (g / 2) for g in range(-6, 7))


@dataclass(frozen=True)
class CalibrationParams:
    lambda0: float = 0.0

    def __post_init__(self):
        if not self.lambda0 >= 0:
            raise ValueError("lambda0 must be >= 0")


def temperature(sigma2, lambda0: float):
    """sqrt(1 + lambda0 * sigma2); works elementwise on arrays."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0) or lambda0 < 0:
        raise ValueError("variance and lambda0 must be non-negative")
    t = np.sqrt(1.0 + lambda0 * sigma2)
    return float(t) if t.ndim == 0 else t


def calibrated_probs(z, T):
    z = np.asarray(z, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if np.any(T < 1):
        raise ValueError("temperature must be >= 1")
    if z.ndim == 2 and T.ndim == 1:
        T = T[:, None]
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def classification_variance_batch(model: MoeModel, X) -> np.ndarray:
    """Routed GP variance averaged over the class outputs."""
    return predict_moe_batch(model, X).variance.mean(axis=1)


def classification_variance(model: MoeModel, x) -> float:
    return float(classification_variance_batch(model, np.asarray(x)[None, :])[0])


def classification_nll(probs, Y) -> float:
    probs = np.asarray(probs)
    Y = np.asarray(Y)
    return float(-np.mean(np.log(np.maximum(np.sum(probs * Y, axis=1), 1e-300))))


def fit_lambda0_from(logits, sigma2, Y, grid=LAMBDA_GRID) -> CalibrationParams:
    """Grid search minimising validation NLL; ties resolve to the smaller value."""
    best, best_nll = None, np.inf
    for lam in sorted(grid):
        nll = classification_nll(calibrated_probs(logits, temperature(sigma2, lam)), Y)
        if nll < best_nll:
            best, best_nll = lam, nll
    return CalibrationParams(float(best))


def fit_lambda0(model: MoeModel, validation) -> CalibrationParams:
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    logits = forward_batch(model.mlp, validation.X)
    sigma2 = classification_variance_batch(model, validation.X)
    return fit_lambda0_from(logits, sigma2, validation.Y)


def predict_proba(model: MoeModel, X, lambda0: float | None = None) -> np.ndarray:
    lam = model.lambda0 if lambda0 is None else lambda0
    d = predict_moe_batch(model, X)
    return calibrated_probs(d.mean, temperature(d.variance.mean(axis=1), lam))
