"""Hard gating: landmark NTK kernel PCA followed by k-means.

The embedding is kernel PCA fitted on a random landmark subset; all points are
projected through the centred cross-kernel against the landmarks, then k-means
runs on the projections.  This is the two-step approximation of kernel k-means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .features import center_kernel, kernel_matrix

log = logging.getLogger(__name__)

EIG_TOL = 1e-10
MAX_LLOYD_ITER = 300


@dataclass
class GatingModel:
    landmark_features: np.ndarray
    alpha: np.ndarray
    eigvals: np.ndarray
    centroids: np.ndarray
    delta: float
    config: dict
    landmark_ids: np.ndarray = None
    _projection: np.ndarray = field(default=None, repr=False)
    _offset: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lm = np.asarray(self.landmark_features, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(lm.shape[0], -1)
        eigvals = np.asarray(self.eigvals, dtype=np.float64)
        self.landmark_features, self.alpha, self.eigvals = lm, alpha, eigvals
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(
            -1, eigvals.size)
        # centring statistics of the landmark kernel
        K = kernel_matrix(lm, lm, self.delta)
        col_mean = K.mean(axis=0)
        grand = K.mean()
        scaled = alpha / np.sqrt(eigvals)[None, :] if eigvals.size else alpha
        lm_mean = lm.mean(axis=0)
        self._projection = ((lm - lm_mean).T @ scaled) / self.delta
        self._offset = (grand - col_mean) @ scaled

    @property
    def n_components(self) -> int:
        return self.eigvals.size

    @property
    def n_experts(self) -> int:
        return self.centroids.shape[0]


def embed_batch(g: GatingModel, phi) -> np.ndarray:
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.shape[1] != g.landmark_features.shape[1]:
        raise ValueError(
            f"feature width {phi.shape[1]} does not match landmarks "
            f"({g.landmark_features.shape[1]})")
    return phi @ g._projection + g._offset


def embed(g: GatingModel, phi) -> np.ndarray:
    return embed_batch(g, np.asarray(phi)[None, :])[0]


def _sq_dists(V, C):
    return np.sum((V[:, None, :] - C[None, :, :]) ** 2, axis=2)


def assign_batch(g: GatingModel, phi) -> np.ndarray:
    return np.argmin(_sq_dists(embed_batch(g, phi), g.centroids), axis=1)


def assign(g: GatingModel, phi) -> int:
    return int(assign_batch(g, np.asarray(phi)[None, :])[0])


def kmeans_objective(V, labels, centroids) -> float:
    V = np.asarray(V, dtype=np.float64)
    return float(np.sum((V - np.asarray(centroids)[np.asarray(labels)]) ** 2))


def _kmeanspp(V, M, rng):
    n = V.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((V - V[chosen[0]]) ** 2, axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((V - V[nxt]) ** 2, axis=1))
    return V[chosen].copy()


def _repair_empty(V, labels, centroids, M):
    counts = np.bincount(labels, minlength=M)
    for j in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        dist = np.sum((V[members] - centroids[largest]) ** 2, axis=1)
        steal = members[int(np.argmax(dist))]
        labels[steal] = j
        centroids[j] = V[steal]
        counts[largest] -= 1
        counts[j] = 1
    return labels


def _means(V, labels, M):
    C = np.zeros((M, V.shape[1]))
    np.add.at(C, labels, V)
    return C / np.bincount(labels, minlength=M)[:, None]


def kmeans(V, M: int, seed: int = 0, return_history: bool = False):
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint."""
    V = np.asarray(V, dtype=np.float64)
    n = V.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(V, M, rng)
    labels = np.argmin(_sq_dists(V, centroids), axis=1)
    labels = _repair_empty(V, labels, centroids, M)
    history = []
    for it in range(MAX_LLOYD_ITER):
        centroids = _means(V, labels, M)
        history.append(kmeans_objective(V, labels, centroids))
        new = np.argmin(_sq_dists(V, centroids), axis=1)
        new = _repair_empty(V, new, centroids, M)
        if np.array_equal(new, labels):
            break
        labels = new
    else:
        log.warning("k-means stopped after %d iterations without reaching a fixpoint",
                    MAX_LLOYD_ITER)
    centroids = _means(V, labels, M)
    if return_history:
        return labels, centroids, history
    return labels, centroids


def fit_gating(features, S: int, d: int, M: int, seed: int = 0, delta: float = 1.0):
    """Fit the gating on an N x F feature matrix (outputs already stacked).

    Returns ``(model, labels, embeddings)``.
    """
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = F.shape[0]
    if not 1 <= S <= n:
        raise ValueError(f"landmark count S={S} must lie in [1, N={n}]")
    if not 1 <= d <= S:
        raise ValueError(f"need 1 <= d <= S, got d={d}, S={S}")
    if not 1 <= M <= n:
        raise ValueError(f"expert count M={M} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    landmark_ids = np.sort(rng.choice(n, size=S, replace=False))
    lm = F[landmark_ids]
    Kc = center_kernel(kernel_matrix(lm, lm, delta))
    w, v = np.linalg.eigh(Kc)
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    usable = int(np.sum(w > EIG_TOL * max(w[0], 0.0))) if w[0] > 0 else 0
    if usable < d:
        log.warning("only %d usable kernel PCA components (requested %d)", usable, d)
    d_eff = min(d, usable)
    g = GatingModel(lm, v[:, :d_eff], w[:d_eff], np.zeros((M, d_eff)), delta,
                    {"S": S, "d": d, "M": M, "seed": seed}, landmark_ids)
    V = embed_batch(g, F)
    labels, centroids = kmeans(V, M, seed)
    g.centroids = centroids
    return g, labels, V


@dataclass(frozen=True)
class NeighborGraph:
    neighbors: tuple

    def __getitem__(self, m):
        return self.neighbors[m]


def neighbor_graph(g: GatingModel, L: int) -> NeighborGraph:
    C = g.centroids
    M = C.shape[0]
    D = _sq_dists(C, C)
    out = []
    for m in range(M):
        others = [j for j in range(M) if j != m]
        others.sort(key=lambda j: (D[m, j], j))
        out.append(tuple(others[:max(0, min(L, M - 1))]))
    return NeighborGraph(tuple(out))


def boundary_candidates(g: GatingModel, embeddings, labels, m: int, b: int,
                        rho: float) -> np.ndarray:
    """Points of cluster ``b`` closest to centroid ``m``, nearest first."""
    if not 0 < rho <= 1:
        raise ValueError(f"candidate fraction must lie in (0, 1], got {rho}")
    labels = np.asarray(labels)
    members = np.flatnonzero(labels == b)
    if members.size == 0:
        return members
    V = np.asarray(embeddings)[members]
    dist = np.sum((V - g.centroids[m]) ** 2, axis=1)
    order = np.lexsort((members, dist))
    n_keep = min(members.size, math.ceil(rho * members.size - 1e-12))
    return members[order[:n_keep]]
