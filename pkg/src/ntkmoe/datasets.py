"""Seeded synthetic data for the experiments."""

from __future__ import annotations

import numpy as np

from .nn import LabeledDataset, MlpSpec, forward_batch, init_mlp

TOY_RANGE = (0.0, 6.0)
TOY_TEST_RANGE = (-2.0, 8.0)


def toy_function(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(2.0 * x) + 0.2 * np.sin(7.0 * x)


def gen_toy1d_gap(n: int, seed: int = 0, noise: float = 0.2, gap=(2.0, 4.0),
                  n_test: int = 500):
    """1D regression with a held-out interval; test grid includes both tails.

    Returns ``(train, test)``; the test targets are the noise-free curve.
    """
    a, b = gap
    lo, hi = TOY_RANGE
    if not lo <= a < b <= hi:
        raise ValueError(f"gap {gap} must be an interval inside {TOY_RANGE}")
    if n < 1 or noise < 0:
        raise ValueError("need n >= 1 and noise >= 0")
    rng = np.random.default_rng(seed)
    # sample uniformly on [lo, hi] minus (a, b) by mapping from a shortened line
    u = rng.uniform(0.0, (hi - lo) - (b - a), size=n) + lo
    x = np.where(u < a, u, u + (b - a))
    x = np.sort(x)
    y = toy_function(x) + noise * rng.standard_normal(n)
    xt = np.linspace(*TOY_TEST_RANGE, n_test)
    meta = {"kind": "toy1d_gap", "seed": seed, "noise": noise, "gap": list(gap)}
    return (LabeledDataset(x[:, None], y[:, None], dict(meta)),
            LabeledDataset(xt[:, None], toy_function(xt)[:, None], dict(meta)))


def gen_teacher_regression(D: int, K: int, n: int, widths=(32,), noise: float = 0.1,
                           seed: int = 0, teacher_seed: int | None = None):
    """Inputs ~ N(0, I); outputs from a random tanh teacher network plus noise."""
    if D < 1 or K < 1 or n < 1 or noise < 0:
        raise ValueError("invalid teacher regression settings")
    teacher_seed = seed + 10_000 if teacher_seed is None else teacher_seed
    teacher = init_mlp(MlpSpec((D, *widths, K), "tanh"), teacher_seed)
    # rescale so the teacher output is not vanishingly small
    theta = teacher.theta * 2.0
    teacher = type(teacher)(theta, teacher.spec)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, D))
    Y = forward_batch(teacher, X) + noise * rng.standard_normal((n, K))
    return LabeledDataset(X, Y, {"kind": "teacher_regression", "seed": seed,
                                 "noise": noise})


def gen_cluster_classification(C: int, n: int, separation: float = 4.0, seed: int = 0,
                               D: int = 2, n_test: int | None = None, spread: float = 1.0):
    """C isotropic Gaussian blobs on a circle of adjacent spacing ``separation``.

    Returns ``(train, in_dist_test, ood_test)``.  OOD points lie on a ring whose
    distance to every blob centre is at least ``3 * separation``.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    if D < 2:
        raise ValueError("need D >= 2")
    rng = np.random.default_rng(seed)
    n_test = n if n_test is None else n_test
    angles = 2 * np.pi * np.arange(C) / C
    radius = separation / (2 * np.sin(np.pi / C))
    centres = np.zeros((C, D))
    centres[:, 0] = radius * np.cos(angles)
    centres[:, 1] = radius * np.sin(angles)

    def draw(m):
        labels = rng.integers(C, size=m)
        X = centres[labels] + spread * rng.standard_normal((m, D))
        return LabeledDataset(X, np.eye(C)[labels])

    train = draw(n)
    test = draw(n_test)
    ood_radius = radius + 3.0 * separation
    phi = rng.uniform(0, 2 * np.pi, size=n_test)
    r = ood_radius + rng.uniform(0.0, separation, size=n_test)
    Xo = np.zeros((n_test, D))
    Xo[:, 0] = r * np.cos(phi)
    Xo[:, 1] = r * np.sin(phi)
    ood = LabeledDataset(Xo, np.full((n_test, C), 1.0 / C),
                         {"centres": centres.tolist()})
    train.meta = {"kind": "cluster_classification", "centres": centres.tolist()}
    return train, test, ood
