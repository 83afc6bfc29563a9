"""Reproducible experiment recipes shared by the CLI and the acceptance tests.

Every experiment returns an :class:`ExperimentResult` holding one row per
seed, an aggregate (mean and std over seeds) and a list of threshold checks.
"""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .calibration import calibrated_probs, classification_nll, fit_lambda0, temperature
from .datasets import gen_cluster_classification, gen_teacher_regression, gen_toy1d_gap
from .features import block_diagonal, kernel_approx_error
from .metrics import (discontinuity_metric, entropies, nll_regression, rmse, timing)
from .nn import LabeledDataset, MlpSpec, TrainConfig, forward_batch, init_mlp, train_map
from .pipeline import MoeConfig, canonical_bytes, fit_moe, predict_moe_batch, with_lambda0

log = logging.getLogger(__name__)

# toy: one hidden layer of 200 tanh units
TOY_SPEC = MlpSpec((1, 200, 1), "tanh")
TOY_N = 200
TOY_NOISE = 0.2
TOY_GAP = (2.0, 4.0)
TOY_DENSE = ((0.0, 2.0), (4.0, 6.0))
TOY_MOE = MoeConfig(n_experts=8, n_neighbors=2, boundary_fraction=0.5, boundary_budget=16)

# scaled-down regression benchmark
TEACHER_D = 10
TEACHER_N = 4000
TEACHER_N_TEST = 1000
TEACHER_NOISE = 0.1
STUDENT_HIDDEN = (50, 50)
ABLATION_EXPERTS = (4, 8, 16, 32, 64)

CLASS_C = 3
CLASS_N = 600
CLASS_SEPARATION = 4.0
CLASS_HIDDEN = (50,)


def toy_train_config(seed: int) -> TrainConfig:
    return TrainConfig("mse", l2_delta=1e-3, learning_rate=0.05, epochs=2000,
                       batch_size=10, seed=seed)


def teacher_train_config(seed: int) -> TrainConfig:
    return TrainConfig("mse", l2_delta=1e-3, learning_rate=0.02, epochs=100,
                       batch_size=32, seed=seed)


def class_train_config(seed: int) -> TrainConfig:
    # trained long enough to be overconfident, the regime calibration targets
    return TrainConfig("cross_entropy", l2_delta=1e-3, learning_rate=0.1, epochs=2000,
                       batch_size=32, seed=seed)


@functools.lru_cache(maxsize=16)
def trained_toy(seed: int):
    """(mlp, train, test, train_config) for the 1D gap problem."""
    train, test = gen_toy1d_gap(TOY_N, seed=seed, noise=TOY_NOISE, gap=TOY_GAP)
    tc = toy_train_config(seed)
    mlp = train_map(init_mlp(TOY_SPEC, seed), train, tc)
    return mlp, train, test, tc


@functools.lru_cache(maxsize=8)
def trained_teacher(seed: int):
    teacher_seed = 10_000 + seed
    train = gen_teacher_regression(TEACHER_D, 1, TEACHER_N, noise=TEACHER_NOISE, seed=seed,
                                   teacher_seed=teacher_seed)
    test = gen_teacher_regression(TEACHER_D, 1, TEACHER_N_TEST, noise=TEACHER_NOISE,
                                  seed=seed + 5_000, teacher_seed=teacher_seed)
    tc = teacher_train_config(seed)
    spec = MlpSpec((TEACHER_D, *STUDENT_HIDDEN, 1), "tanh")
    mlp = train_map(init_mlp(spec, seed), train, tc)
    return mlp, train, test, tc


@functools.lru_cache(maxsize=8)
def trained_classifier(seed: int):
    train, test, ood = gen_cluster_classification(CLASS_C, CLASS_N, CLASS_SEPARATION,
                                                  seed=seed)
    half = len(test) // 2
    val = LabeledDataset(test.X[:half], test.Y[:half])
    test = LabeledDataset(test.X[half:], test.Y[half:])
    tc = class_train_config(seed)
    spec = MlpSpec((2, *CLASS_HIDDEN, CLASS_C), "tanh")
    mlp = train_map(init_mlp(spec, seed), train, tc)
    return mlp, train, val, test, ood, tc


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    comparison: str
    passed: bool


@dataclass
class ExperimentResult:
    experiment: str
    config: dict
    rows: list
    aggregate: dict
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> dict:
        return {"experiment": self.experiment, "config": self.config,
                "aggregate": self.aggregate, "checks": [asdict(c) for c in self.checks],
                "passed": self.passed}


def aggregate(rows) -> dict:
    """Mean and sample std of every numeric field across rows."""
    out = {}
    if not rows:
        return out
    for key in rows[0]:
        vals = [r[key] for r in rows]
        if all(isinstance(v, (int, float, np.floating, np.integer))
               and not isinstance(v, bool) for v in vals):
            arr = np.asarray(vals, dtype=np.float64)
            out[key] = {"mean": float(arr.mean()),
                        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}
    return out


def _check(name, value, threshold, comparison) -> Check:
    ops = {">=": np.greater_equal, "<=": np.less_equal}
    return Check(name, float(value), float(threshold), comparison,
                 bool(ops[comparison](value, threshold)))


def _in_ranges(x, ranges):
    return np.any([(x >= a) & (x <= b) for a, b in ranges], axis=0)


def toy_boundary_paths(n: int = 300):
    """Uniform paths through both data-dense intervals of the toy problem."""
    return [np.linspace(a, b, n)[:, None] for a, b in TOY_DENSE]


def toy_discontinuity(model) -> float:
    return max(discontinuity_metric(model, p) for p in toy_boundary_paths())


def _toy_fit(seed, **overrides):
    mlp, train, test, tc = trained_toy(seed)
    cfg = replace(TOY_MOE, seed=seed, **overrides)
    return fit_moe(mlp, train, cfg, train_config=asdict(tc)), test


def toy1d_experiment(seeds=range(5)) -> ExperimentResult:
    """Uncertainty shape and patch effect on the 1D gap problem."""
    rows, curves = [], []
    for seed in seeds:
        model, test = _toy_fit(seed)
        plain, _ = _toy_fit(seed, patch_enabled=False)
        x = test.X[:, 0]
        d = predict_moe_batch(model, test.X)
        dp = predict_moe_batch(plain, test.X)
        var = d.variance[:, 0]
        dense = _in_ranges(x, TOY_DENSE)
        gap = (x > TOY_GAP[0]) & (x < TOY_GAP[1])
        ratio = float(var[gap].mean() / var[dense].mean())
        var_far = float(var[np.argmax(x)])
        max_dense = float(var[dense].max())
        disc_patch = toy_discontinuity(model)
        disc_plain = toy_discontinuity(plain)
        rows.append({
            "seed": int(seed),
            "gap_dense_ratio": ratio,
            "var_at_8": var_far,
            "max_dense_var": max_dense,
            "shape_ok": bool(ratio >= 2.0 and var_far > max_dense),
            "disc_patch": disc_patch,
            "disc_no_patch": disc_plain,
            "nll": nll_regression(d.mean, d.variance, test.Y),
            "rmse": rmse(d.mean, test.Y),
        })
        for xi, vi, vp in zip(x, var, dp.variance[:, 0]):
            curves.append({"seed": int(seed), "x": float(xi), "var_patch": float(vi),
                           "var_no_patch": float(vp)})
    n_ok = sum(r["shape_ok"] for r in rows)
    disc_ratio = (np.median([r["disc_patch"] for r in rows])
                  / np.median([r["disc_no_patch"] for r in rows]))
    checks = [_check("seeds with gap variance >= 2x dense and var(8) > max dense",
                     n_ok, min(4, len(rows)), ">="),
              _check("median discontinuity ratio patch / no patch", disc_ratio, 0.7, "<=")]
    return ExperimentResult("toy1d", {"moe": asdict(TOY_MOE), "n": TOY_N,
                                      "noise": TOY_NOISE, "gap": list(TOY_GAP)},
                            rows, aggregate(rows), checks, {"curves": curves})


def pruning_experiment(seeds=range(5), keep_fraction: float = 0.5) -> ExperimentResult:
    """Toy test NLL with stage-two pruning vs without."""
    rows = []
    for seed in seeds:
        full, test = _toy_fit(seed)
        pruned, _ = _toy_fit(seed, prune_expert=keep_fraction)
        d0 = predict_moe_batch(full, test.X)
        d1 = predict_moe_batch(pruned, test.X)
        n0 = nll_regression(d0.mean, d0.variance, test.Y)
        n1 = nll_regression(d1.mean, d1.variance, test.Y)
        rows.append({"seed": int(seed), "nll_full": n0, "nll_pruned": n1,
                     "rel_change": abs(n1 - n0) / abs(n0)})
    med = float(np.median([r["rel_change"] for r in rows]))
    checks = [_check("median relative NLL change", med, 0.10, "<=")]
    return ExperimentResult("pruning", {"keep_fraction": keep_fraction}, rows,
                            aggregate(rows), checks)


def _teacher_fit(seed, M, workers=1):
    mlp, train, test, tc = trained_teacher(seed)
    cfg = MoeConfig(n_experts=M, seed=seed)
    return fit_moe(mlp, train, cfg, workers=workers, train_config=asdict(tc)), test


def ablation_experiment(seeds=range(5), experts=ABLATION_EXPERTS) -> ExperimentResult:
    """Test NLL as the number of experts grows."""
    rows, table = [], []
    for seed in seeds:
        row = {"seed": int(seed)}
        for M in experts:
            model, test = _teacher_fit(seed, M)
            d = predict_moe_batch(model, test.X)
            nll = nll_regression(d.mean, d.variance, test.Y)
            row[f"nll_M{M}"] = nll
            table.append({"seed": int(seed), "experts": M, "nll": nll,
                          "rmse": rmse(d.mean, test.Y),
                          "mean_variance": float(d.variance.mean()),
                          "fit_seconds": model.metadata["timings"]["total"]})
        rows.append(row)
    checks = []
    lo, hi = min(experts), max(experts)
    if lo != hi:
        n_ok = sum(r[f"nll_M{hi}"] >= r[f"nll_M{lo}"] for r in rows)
        checks.append(_check(f"seeds with NLL(M={hi}) >= NLL(M={lo})", n_ok,
                             min(4, len(rows)), ">="))
    return ExperimentResult("ablation", {"experts": list(experts), "D": TEACHER_D,
                                         "n": TEACHER_N, "hidden": list(STUDENT_HIDDEN)},
                            rows, aggregate(rows), checks, {"nll_vs_experts": table})


def scaling_experiment(seed: int = 0, M: int = 32, workers: int = 4) -> ExperimentResult:
    """Bit-identity and wall-clock speedup of parallel expert fitting."""
    mlp, train, _test, tc = trained_teacher(seed)
    cfg = MoeConfig(n_experts=M, seed=seed)
    times, blobs = {}, {}
    for w in (1, workers):
        t = time.perf_counter()
        model = fit_moe(mlp, train, cfg, workers=w, train_config=asdict(tc))
        times[w] = time.perf_counter() - t
        blobs[w] = canonical_bytes(model)
    identical = blobs[1] == blobs[workers]
    speedup = times[1] / times[workers]
    rows = [{"seed": seed, "seconds_1": times[1], f"seconds_{workers}": times[workers],
             "speedup": speedup, "identical": identical}]
    checks = [_check("snapshots identical across worker counts", float(identical), 1.0, ">="),
              _check(f"speedup with {workers} workers", speedup, 1.5, ">=")]
    return ExperimentResult("scaling", {"experts": M, "workers": workers,
                                        "n": TEACHER_N}, rows, aggregate(rows), checks)


def approx_error_experiment(seeds=range(1), instances: int = 100,
                            max_n: int = 50) -> ExperimentResult:
    """Residual between the cheap approximation error and the Frobenius norm."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            n = int(rng.integers(1, max_n + 1))
            F = rng.standard_normal((n, int(rng.integers(1, 12))))
            K = F @ F.T
            labels = rng.integers(int(rng.integers(1, 6)), size=n)
            brute = float(np.sum((K - block_diagonal(K, labels)) ** 2))
            worst = max(worst, abs(kernel_approx_error(K, labels) - brute))
        rows.append({"seed": int(seed), "instances": instances, "max_residual": worst})
    checks = [_check("max identity residual", max(r["max_residual"] for r in rows),
                     1e-10, "<=")]
    return ExperimentResult("approx-error", {"instances": instances, "max_n": max_n},
                            rows, aggregate(rows), checks)


def calibration_experiment(seeds=range(5)) -> ExperimentResult:
    """Temperature fit on validation data and OOD entropy separation."""
    rows = []
    for seed in seeds:
        mlp, train, val, test, ood, tc = trained_classifier(seed)
        model = fit_moe(mlp, train, MoeConfig(n_experts=8, seed=seed),
                        train_config=asdict(tc))
        lam = fit_lambda0(model, val).lambda0
        model = with_lambda0(model, lam)
        z_val = forward_batch(mlp, val.X)
        s_val = predict_moe_batch(model, val.X).variance.mean(axis=1)
        nll_fit = classification_nll(calibrated_probs(z_val, temperature(s_val, lam)), val.Y)
        nll_zero = classification_nll(calibrated_probs(z_val, 1.0), val.Y)
        d_test = predict_moe_batch(model, test.X)
        p_test = calibrated_probs(d_test.mean, temperature(d_test.variance.mean(axis=1), lam))
        argmax_same = bool(np.all(p_test.argmax(1) == d_test.mean.argmax(1)))
        d_ood = predict_moe_batch(model, ood.X)
        p_ood = calibrated_probs(d_ood.mean, temperature(d_ood.variance.mean(axis=1), lam))
        h_in = float(entropies(p_test).mean())
        h_ood = float(entropies(p_ood).mean())
        rows.append({"seed": int(seed), "lambda0": lam, "val_nll_fitted": nll_fit,
                     "val_nll_uncalibrated": nll_zero, "argmax_invariant": argmax_same,
                     "test_accuracy": float(np.mean(p_test.argmax(1) == test.Y.argmax(1))),
                     "entropy_in": h_in, "entropy_ood": h_ood,
                     "ood_higher": h_ood > h_in})
    checks = [
        _check("seeds with fitted NLL <= uncalibrated NLL",
               sum(r["val_nll_fitted"] <= r["val_nll_uncalibrated"] for r in rows),
               len(rows), ">="),
        _check("seeds with argmax unchanged", sum(r["argmax_invariant"] for r in rows),
               len(rows), ">="),
        _check("seeds with OOD entropy > in-distribution entropy",
               sum(r["ood_higher"] for r in rows), min(4, len(rows)), ">="),
    ]
    return ExperimentResult("calibration", {"classes": CLASS_C, "n": CLASS_N,
                                            "separation": CLASS_SEPARATION},
                            rows, aggregate(rows), checks)


def timing_experiment(seeds=range(1), n_inputs: int = 200) -> ExperimentResult:
    """Per-input latency of the MoE prediction vs 20-sample MC dropout."""
    rows = []
    for seed in seeds:
        model, test = _toy_fit(seed)
        idx = np.linspace(0, len(test) - 1, n_inputs).astype(int)
        rep = timing(model, test.X[idx])
        rows.append({"seed": int(seed), **rep})
    speedup = float(np.median([r["speedup"] for r in rows]))
    checks = [_check("median speedup over MC dropout", speedup, 5.0, ">=")]
    return ExperimentResult("timing", {"samples": 20, "n_inputs": n_inputs}, rows,
                            aggregate(rows), checks)


EXPERIMENTS = {
    "toy1d": toy1d_experiment,
    "ablation": ablation_experiment,
    "approx-error": approx_error_experiment,
    "calibration": calibration_experiment,
    "timing": timing_experiment,
    "pruning": pruning_experiment,
}
