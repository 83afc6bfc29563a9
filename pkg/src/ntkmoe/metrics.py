"""Regression/classification metrics, the MC-dropout baseline and timing."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .calibration import predict_proba
from .nn import MlpParams, _act
from .pipeline import MoeModel, predict_moe, predict_moe_batch


@dataclass
class MetricReport:
    nll: float | None = None
    rmse: float | None = None
    mean_variance: float | None = None
    runtime_ms: dict | None = None
    clamped: int = 0

    def as_dict(self):
        return asdict(self)


def nll_regression(means, variances, targets) -> float:
    mu = np.asarray(means, dtype=np.float64)
    var = np.asarray(variances, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if not (mu.shape == var.shape == y.shape):
        raise ValueError("means, variances and targets must share a shape")
    if np.any(var <= 0):
        raise ValueError("variances must be strictly positive")
    return float(np.mean(0.5 * np.log(2 * np.pi * var) + (y - mu) ** 2 / (2 * var)))


def rmse(means, targets) -> float:
    mu = np.asarray(means, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if mu.shape != y.shape:
        raise ValueError("means and targets must share a shape")
    return float(np.sqrt(np.mean((mu - y) ** 2)))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropies(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    logs = np.log(np.where(P > 0, P, 1.0))
    return -np.sum(P * logs, axis=1)


def entropy_histogram(model: MoeModel, X_in, X_ood, bins: int = 10):
    """Counts of calibrated predictive entropy on fixed bins over [0, log C]."""
    C = model.n_outputs
    edges = np.linspace(0.0, np.log(C), bins + 1)
    h_in = np.clip(entropies(predict_proba(model, X_in)), 0.0, np.log(C))
    h_ood = np.clip(entropies(predict_proba(model, X_ood)), 0.0, np.log(C))
    return (np.histogram(h_in, edges)[0], np.histogram(h_ood, edges)[0], edges,
            float(h_ood.mean() - h_in.mean()))


def regression_report(model: MoeModel, data) -> MetricReport:
    t = time.perf_counter()
    d = predict_moe_batch(model, data.X)
    ms = (time.perf_counter() - t) * 1e3
    return MetricReport(nll=nll_regression(d.mean, d.variance, data.Y),
                        rmse=rmse(d.mean, data.Y),
                        mean_variance=float(d.variance.mean()),
                        runtime_ms={"predict": ms}, clamped=d.clamped)


def max_jump(std_along_path) -> float:
    """Largest jump in predictive standard deviation between neighbouring path points."""
    s = np.asarray(std_along_path, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two path points")
    return float(np.max(np.abs(np.diff(s))))


def discontinuity_metric(model: MoeModel, path) -> float:
    """Max jump of the first output's predictive std along an ordered input path."""
    d = predict_moe_batch(model, np.atleast_2d(path))
    return max_jump(np.sqrt(d.variance[:, 0]))


def _dropout_forward(layers, activation, x, rate, rng):
    a = x
    keep = 1.0 - rate
    for i, (W, b) in enumerate(layers):
        z = np.dot(W, a) + b
        if i < len(layers) - 1:
            a = _act(z, activation)
            a = a * (rng.random(a.shape[0]) < keep) / keep
        else:
            a = z
    return a


def mc_dropout_baseline(params: MlpParams, x, rate: float = 0.1, samples: int = 20,
                        seed: int = 0):
    """Inverted dropout on hidden activations; one forward pass per sample."""
    if not 0 < rate < 1:
        raise ValueError("dropout rate must lie in (0, 1)")
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    layers = params.layers()
    act = params.spec.activation
    outs = np.array([_dropout_forward(layers, act, x, rate, rng) for _ in range(samples)])
    return outs.mean(axis=0), outs.var(axis=0, ddof=1)


def timing(model: MoeModel, X, dropout_rate: float = 0.1, samples: int = 20,
           warmup: int = 10, repeats: int = 1) -> dict:
    """Median per-input latency of the MoE prediction vs MC-dropout.

    Both run single-threaded so the numbers do not depend on BLAS threading.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need inputs to time")
    with threadpool_limits(limits=1):
        return _timing(model, X, dropout_rate, samples, warmup, repeats)


def _timing(model, X, dropout_rate, samples, warmup, repeats):
    # each method is timed in its own warmed-up block so neither pays for the
    # other's cache footprint
    def moe(i, x):
        predict_moe(model, x)

    def mc(i, x):
        mc_dropout_baseline(model.mlp, x, dropout_rate, samples, seed=i)

    medians = {}
    for name, fn in (("moe", moe), ("mc_dropout", mc)):
        for i, x in enumerate(X[:warmup]):
            fn(i, x)
        times = []
        for _ in range(repeats):
            for i, x in enumerate(X):
                t = time.perf_counter()
                fn(i, x)
                times.append(time.perf_counter() - t)
        medians[name] = float(np.median(times) * 1e3)
    return {"moe_ms": medians["moe"], "mc_dropout_ms": medians["mc_dropout"],
            "speedup": medians["mc_dropout"] / medians["moe"],
            "n_inputs": int(X.shape[0]), "samples": samples}
