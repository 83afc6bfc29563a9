"""A single local GP expert over NTK features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dtrtri

from .features import PruneMask

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
LOG_HYPER_BOUNDS = (-18.0, 18.0)
LOG_2PI = np.log(2.0 * np.pi)


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even at the largest jitter."""


@dataclass
class PredictiveDist:
    mean: np.ndarray
    variance: np.ndarray
    gp_mean: np.ndarray | None = None
    clamped: int = 0


def factorize(G, delta: float, sigma0: float):
    """Lower Cholesky factor of G/delta + (sigma0 + jitter) I, escalating jitter.

    Returns ``(L, jitter)``.
    """
    G = np.asarray(G, dtype=np.float64)
    n = G.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    K = G / delta
    scale = np.trace(K) / n
    base = K + sigma0 * np.eye(n)
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            L = np.linalg.cholesky(base + jitter * np.eye(n) if jitter else base)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0) and np.all(np.isfinite(L)):
            if jitter:
                log.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
    cond = np.linalg.cond(base)
    raise FactorizationError(
        f"cholesky failed at maximum jitter {JITTER_LADDER[-1] * scale:.3g} "
        f"(n={n}, condition number {cond:.3g}, sigma0={sigma0:.3g})")


@dataclass
class ExpertGp:
    """Local GP posterior for one expert and one output dimension.

    ``features`` are the expert's training rows (members, then boundary
    points) restricted to ``mask``; ``mask`` indexes the globally kept columns.
    """
    features: np.ndarray
    targets: np.ndarray
    log_delta: float
    log_sigma0: float
    chol: np.ndarray
    coeffs: np.ndarray
    jitter: float
    mask: PruneMask
    member_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boundary_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _whitened: np.ndarray = field(default=None, repr=False)
    _mean_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        delta = self.delta
        if self.features.shape[0]:
            self._whitened = solve_triangular(self.chol, self.features, lower=True) / delta
        else:
            self._whitened = np.zeros((0, self.features.shape[1]))
        self._mean_weights = self.features.T @ self.coeffs / delta

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))

    @property
    def sigma0(self) -> float:
        return float(np.exp(self.log_sigma0))

    @property
    def n_train(self) -> int:
        return self.features.shape[0]

    @property
    def n_patch(self) -> int:
        return self.member_ids.size + self.boundary_ids.size


def assemble_patch(member_features, boundary_features_per_neighbor=()) -> np.ndarray:
    """Members first, then each neighbour's selected rows in neighbour order."""
    member_features = np.atleast_2d(np.asarray(member_features, dtype=np.float64))
    blocks = [member_features]
    for rows in boundary_features_per_neighbor:
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, member_features.shape[1])
        blocks.append(rows)
    return np.vstack(blocks)


def fit_expert(features, targets, log_delta: float, log_sigma0: float,
               mask: PruneMask | None = None, member_ids=None,
               boundary_ids=None) -> ExpertGp:
    Phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).ravel()
    if Phi.shape[0] != y.size or y.size < 1:
        raise ValueError(f"{Phi.shape[0]} feature rows but {y.size} targets")
    delta, sigma0 = np.exp(log_delta), np.exp(log_sigma0)
    L, jitter = factorize(Phi @ Phi.T, delta, sigma0)
    a = cho_solve((L, True), y)
    if mask is None:
        mask = PruneMask.identity(Phi.shape[1])
    if member_ids is None:
        member_ids = np.arange(y.size)
    if boundary_ids is None:
        boundary_ids = np.zeros(0, dtype=np.int64)
    return ExpertGp(Phi, y, float(log_delta), float(log_sigma0), L, a, jitter, mask,
                    np.asarray(member_ids, dtype=np.int64),
                    np.asarray(boundary_ids, dtype=np.int64))


def predict_batch(expert: ExpertGp, phi_star) -> PredictiveDist:
    """Posterior mean and total variance (epistemic + noise) at each row."""
    phi = np.atleast_2d(np.asarray(phi_star, dtype=np.float64))
    prior = np.einsum("ij,ij->i", phi, phi) / expert.delta
    v = phi @ expert._whitened.T
    var = prior - np.einsum("ij,ij->i", v, v)
    clamped = int(np.sum(var < 0))
    var = np.maximum(var, 0.0) + expert.sigma0
    return PredictiveDist(phi @ expert._mean_weights, var, clamped=clamped)


def predict(expert: ExpertGp, phi_star) -> tuple[float, float]:
    d = predict_batch(expert, np.asarray(phi_star)[None, :])
    return float(d.mean[0]), float(d.variance[0])


def log_marginal_likelihood(expert: ExpertGp) -> float:
    n = expert.targets.size
    return float(-0.5 * expert.targets @ expert.coeffs
                 - np.sum(np.log(np.diag(expert.chol))) - 0.5 * n * LOG_2PI)


def mll_and_grad(G, targets, log_delta: float, log_sigma0: float):
    """Log marginal likelihood and its gradient in (log delta, log sigma0).

    ``G`` is the raw Gram matrix Phi Phi^T.  The jitter added by the
    factorisation scales with the kernel, so it is differentiated with it.
    """
    y = np.asarray(targets, dtype=np.float64).ravel()
    n = y.size
    delta, sigma0 = np.exp(log_delta), np.exp(log_sigma0)
    L, jitter = factorize(G, delta, sigma0)
    a = cho_solve((L, True), y)
    mll = -0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    # dC/dlog_delta = -(K + jitter I) = -(C - sigma0 I) and dC/dlog_sigma0 = sigma0 I,
    # so both trace terms only need tr(C^-1) = ||L^-1||_F^2
    Linv, info = dtrtri(L, lower=1)
    if info != 0:
        raise FactorizationError(f"triangular inverse failed (info={info})")
    tr_cinv = float(np.sum(Linv * Linv))
    aa = a @ a
    g_delta = 0.5 * (-(y @ a) + sigma0 * aa + n - sigma0 * tr_cinv)
    g_sigma = 0.5 * sigma0 * (aa - tr_cinv)
    return float(mll), np.array([g_delta, g_sigma]), jitter


def optimize_mll(features, targets, init_hyper, iterations: int = 100,
                 step: float = 0.05, return_history: bool = False):
    """Gradient ascent on the per-point log marginal likelihood.

    A step that fails to increase the likelihood is rejected and the step
    size halved.  Returns the best hyperparameters seen.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    h = np.asarray(init_hyper, dtype=np.float64).copy()
    Phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).ravel()
    n = y.size
    if iterations == 0:
        result = (float(h[0]), float(h[1]))
        return (result, []) if return_history else result
    G = Phi @ Phi.T
    f, g, _ = mll_and_grad(G, y, *h)
    if not np.isfinite(f):
        raise ValueError(f"non-finite marginal likelihood at initial hyperparameters {h}")
    history = [f]
    lo, hi = LOG_HYPER_BOUNDS
    for _ in range(iterations):
        cand = np.clip(h + step * g / n, lo, hi)
        try:
            fc, gc, _ = mll_and_grad(G, y, *cand)
        except FactorizationError:
            fc = -np.inf
        if np.isfinite(fc) and fc > f:
            h, f, g = cand, fc, gc
        else:
            step *= 0.5
        history.append(f)
    result = (float(h[0]), float(h[1]))
    return (result, history) if return_history else result


def active_select(seed_features, pool_features, budget: int, log_delta: float,
                  log_sigma0: float) -> np.ndarray:
    """Greedy uncertainty sampling from a pool.

    Starting from a GP on ``seed_features``, repeatedly moves the pool point
    with the largest predictive variance (lowest index on ties) into the
    training set.  The Cholesky factor is extended one row at a time, which
    gives the same variances as refitting from scratch.  Returns pool
    indices in selection order.
    """
    pool = np.atleast_2d(np.asarray(pool_features, dtype=np.float64))
    n_pool = pool.shape[0] if pool.size else 0
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget > 0 and n_pool == 0:
        raise ValueError("cannot select from an empty pool")
    if budget > n_pool:
        raise ValueError(f"budget {budget} exceeds pool size {n_pool}")
    if budget == 0:
        return np.zeros(0, dtype=np.int64)
    delta, sigma0 = np.exp(log_delta), np.exp(log_sigma0)
    seed = np.asarray(seed_features, dtype=np.float64).reshape(-1, pool.shape[1])
    L, jitter = factorize(seed @ seed.T, delta, sigma0)
    noise = sigma0 + jitter
    n_seed = seed.shape[0]
    # rows of L^-1 K(train, pool), grown as points are added
    V = np.zeros((n_seed + budget, n_pool))
    if n_seed:
        V[:n_seed] = solve_triangular(L, seed @ pool.T / delta, lower=True)
    var = np.einsum("ij,ij->i", pool, pool) / delta - np.sum(V * V, axis=0) + sigma0
    available = np.ones(n_pool, dtype=bool)
    selected = []
    for t in range(budget):
        j = int(np.argmax(np.where(available, var, -np.inf)))
        selected.append(j)
        available[j] = False
        rows = n_seed + t
        l = V[:rows, j]
        d2 = max(pool[j] @ pool[j] / delta + noise - l @ l, noise * 1e-12)
        v_new = (pool @ pool[j] / delta - l @ V[:rows]) / np.sqrt(d2)
        V[rows] = v_new
        var = var - v_new * v_new
    return np.asarray(selected, dtype=np.int64)
