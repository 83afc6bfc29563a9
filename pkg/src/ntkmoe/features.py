"""NTK feature maps, kernels, two-stage pruning and the partition error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import MlpParams, jacobian_batch

PRUNE_STAGES = ("none", "global", "global_plus_expert")


@dataclass(frozen=True)
class PruneMask:
    kept: np.ndarray
    stage: str = "none"

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.int64)
        if kept.ndim != 1:
            raise ValueError("kept must be one-dimensional")
        if kept.size > 1 and np.any(np.diff(kept) <= 0):
            raise ValueError("kept indices must be strictly increasing")
        if kept.size and kept[0] < 0:
            raise ValueError("kept indices must be non-negative")
        if self.stage not in PRUNE_STAGES:
            raise ValueError(f"unknown prune stage {self.stage!r}")
        kept = kept.copy()
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @classmethod
    def identity(cls, n: int) -> "PruneMask":
        return cls(np.arange(n), "none")

    def __len__(self):
        return self.kept.size

    def validate(self, n_columns: int):
        if self.kept.size and self.kept[-1] >= n_columns:
            raise ValueError(f"mask index {self.kept[-1]} out of range for {n_columns} columns")
        if self.stage == "none" and self.kept.size != n_columns:
            raise ValueError("a 'none' mask must keep every column")


@dataclass
class FeatureMatrix:
    """``phi[k]`` is the N x P-bar matrix of Jacobian rows for output k."""
    phi: np.ndarray
    mask: PruneMask
    ids: np.ndarray

    @property
    def n_outputs(self) -> int:
        return self.phi.shape[0]

    @property
    def n_points(self) -> int:
        return self.phi.shape[1]

    @property
    def n_features(self) -> int:
        return self.phi.shape[2]

    def stacked(self) -> np.ndarray:
        """Rows concatenated across outputs, N x (K * P-bar).

        The dot product of two stacked rows is the output-summed NTK.
        """
        return np.ascontiguousarray(self.phi.transpose(1, 0, 2).reshape(self.n_points, -1))


def extract_features(params: MlpParams, X, mask: PruneMask | None = None,
                     ids=None) -> FeatureMatrix:
    P = params.spec.n_params
    if mask is None:
        mask = PruneMask.identity(P)
    mask.validate(P)
    J = jacobian_batch(params, X)
    phi = J.transpose(1, 0, 2)
    if mask.stage != "none":
        phi = phi[:, :, mask.kept]
    ids = np.arange(phi.shape[1]) if ids is None else np.asarray(ids)
    return FeatureMatrix(np.ascontiguousarray(phi), mask, ids)


def ntk_value(phi_a, phi_b, delta: float) -> float:
    phi_a = np.asarray(phi_a, dtype=np.float64)
    phi_b = np.asarray(phi_b, dtype=np.float64)
    if phi_a.shape != phi_b.shape:
        raise ValueError("feature vectors differ in length")
    if not delta > 0:
        raise ValueError("delta must be positive")
    return float(phi_a @ phi_b) / delta


def kernel_matrix(A, B, delta: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature widths differ: {A.shape[1]} vs {B.shape[1]}")
    if A is B:
        K = A @ A.T / delta
        return 0.5 * (K + K.T)
    return A @ B.T / delta


def center_kernel(K) -> np.ndarray:
    """Double centring in feature space: (I - O) K (I - O), O = ones/N."""
    K = np.asarray(K, dtype=np.float64)
    col = K.mean(axis=0)
    row = K.mean(axis=1)
    Kc = K - col[None, :] - row[:, None] + K.mean()
    return 0.5 * (Kc + Kc.T)


def _top_columns(scores: np.ndarray, n_keep: int) -> np.ndarray:
    # stable sort on -score: equal scores keep the lower index first
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:n_keep])


def _n_keep(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {fraction}")
    return min(n, max(1, math.ceil(fraction * n - 1e-12)))


def global_prune(theta_hat, keep_fraction: float) -> PruneMask:
    """Magnitude pruning of network parameters."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    P = theta_hat.size
    if keep_fraction == 1.0:
        _n_keep(keep_fraction, P)
        return PruneMask.identity(P)
    return PruneMask(_top_columns(np.abs(theta_hat), _n_keep(keep_fraction, P)), "global")


def expert_prune(phi_m, keep_fraction: float) -> PruneMask:
    """Keep the columns with the largest |column sum| of one expert's features.

    Returned indices refer to columns of ``phi_m``.
    """
    phi_m = np.atleast_2d(np.asarray(phi_m, dtype=np.float64))
    n_cols = phi_m.shape[1]
    if keep_fraction == 1.0:
        _n_keep(keep_fraction, n_cols)
        return PruneMask.identity(n_cols)
    scores = np.abs(phi_m.sum(axis=0))
    return PruneMask(_top_columns(scores, _n_keep(keep_fraction, n_cols)),
                     "global_plus_expert")


def block_diagonal(K, labels) -> np.ndarray:
    """Zero every entry that couples points from different clusters."""
    labels = np.asarray(labels)
    return np.where(labels[:, None] == labels[None, :], K, 0.0)


def kernel_approx_error(K_full, labels) -> float:
    """Squared Frobenius mass of the cross-cluster kernel entries."""
    K = np.asarray(K_full, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != K.shape[0]:
        raise ValueError("labels length does not match the kernel")
    total = np.sum(K * K)
    within = 0.0
    for m in np.unique(labels):
        idx = np.flatnonzero(labels == m)
        block = K[np.ix_(idx, idx)]
        within += np.sum(block * block)
    return float(max(total - within, 0.0))
