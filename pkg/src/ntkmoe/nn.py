"""Small multilayer perceptron with analytic parameter Jacobians.

Parameters live in a single flat vector.  Layers are stored in order, each
as its ``(out, in)`` weight matrix in row-major order followed by its bias.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("mse", "cross_entropy")


class NetworkConfigError(ValueError):
    """Invalid network layout or configuration."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class UnsupportedLossError(ValueError):
    """The requested operation is undefined for this loss."""


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise NetworkConfigError(
                f"need input, at least one hidden and an output layer, got {widths}")
        if any(w < 1 for w in widths):
            raise NetworkConfigError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise NetworkConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) for each layer."""
        out = []
        offset = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n_in, n_out = w[i], w[i + 1]
            ws = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            bs = slice(offset, offset + n_out)
            offset += n_out
            out.append((ws, bs, (n_out, n_in)))
        return out


@dataclass(frozen=True)
class MlpParams:
    theta: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.shape[0] != self.spec.n_params:
            raise NetworkConfigError(
                f"theta has shape {theta.shape}, expected ({self.spec.n_params},)")
        if not np.all(np.isfinite(theta)):
            raise NetworkConfigError("theta contains non-finite entries")
        theta = theta.copy()
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.theta[ws].reshape(shape), self.theta[bs])
                for ws, bs, shape in self.spec.layer_slices()]


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mse"
    l2_delta: float = 1e-3
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise NetworkConfigError(f"unknown loss {self.loss!r}")
        if not self.l2_delta > 0:
            raise NetworkConfigError("l2_delta must be strictly positive")
        if not self.learning_rate > 0:
            raise NetworkConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise NetworkConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise NetworkConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class LossDerivatives:
    residual: np.ndarray
    hessian: np.ndarray
    singular: bool = False


@dataclass
class LabeledDataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[0] < 1:
            raise ValueError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return self.X.shape[0]


def _act(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(z, a, activation):
    if activation == "tanh":
        return 1.0 - a * a
    # subgradient at 0 is 0
    return (z > 0.0).astype(np.float64)


def init_mlp(spec: MlpSpec, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params)
    for ws, _bs, (n_out, n_in) in spec.layer_slices():
        bound = np.sqrt(6.0 / (n_in + n_out))
        theta[ws] = rng.uniform(-bound, bound, size=n_out * n_in)
    return MlpParams(theta, spec)


def _forward_batch(params: MlpParams, X: np.ndarray):
    # einsum (no BLAS) keeps each row's result independent of batch size
    act = params.spec.activation
    layers = params.layers()
    zs, acts = [], [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = np.einsum("ni,oi->no", a, W) + b
        if i < len(layers) - 1:
            zs.append(z)
            a = _act(z, act)
            acts.append(a)
        else:
            a = z
    return a, zs, acts


def _check_inputs(params: MlpParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.n_inputs:
        raise ValueError(
            f"input has shape {X.shape}, expected (n, {params.spec.n_inputs})")
    return X


def forward_batch(params: MlpParams, X) -> np.ndarray:
    X = _check_inputs(params, X)
    return _forward_batch(params, X)[0]


def forward(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    return forward_batch(params, x[None, :])[0]


def jacobian_batch(params: MlpParams, X) -> np.ndarray:
    """Jacobians d f_k(x_n) / d theta, shape (N, K, P)."""
    X = _check_inputs(params, X)
    spec = params.spec
    act = spec.activation
    layers = params.layers()
    slices = spec.layer_slices()
    n, K = X.shape[0], spec.n_outputs
    _, zs, acts = _forward_batch(params, X)

    J = np.zeros((n, K, spec.n_params))
    delta = np.broadcast_to(np.eye(K), (n, K, K))
    for li in range(len(layers) - 1, -1, -1):
        ws, bs, (n_out, n_in) = slices[li]
        a_prev = acts[li]
        J[:, :, ws] = (delta[:, :, :, None] * a_prev[:, None, None, :]).reshape(n, K, -1)
        J[:, :, bs] = delta
        if li > 0:
            W = layers[li][0]
            back = np.einsum("nko,oi->nki", delta, W)
            delta = back * _act_grad(zs[li - 1], acts[li], act)[:, None, :]
    return J


def jacobian(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("jacobian expects a single input vector")
    return jacobian_batch(params, x[None, :])[0]


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def loss_derivatives(y_pred, y, loss: str) -> LossDerivatives:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_pred.shape != y.shape:
        raise ValueError(f"shape mismatch {y_pred.shape} vs {y.shape}")
    if loss == "mse":
        return LossDerivatives(y_pred - y, np.eye(y.shape[0]))
    if loss == "cross_entropy":
        p = softmax(y_pred)
        return LossDerivatives(p - y, np.diag(p) - np.outer(p, p), singular=True)
    raise NetworkConfigError(f"unknown loss {loss!r}")


def pseudo_output(params: MlpParams, x, y, loss: str = "mse") -> np.ndarray:
    """Target of the linearised model: J(x) theta - H^-1 R."""
    if loss != "mse":
        raise UnsupportedLossError(
            "pseudo-outputs need an invertible loss Hessian; cross_entropy is singular")
    f = forward(params, x)
    d = loss_derivatives(f, y, loss)
    return jacobian(params, x) @ params.theta - np.linalg.solve(d.hessian, d.residual)


def pseudo_outputs(params: MlpParams, X, Y, loss: str = "mse", J=None) -> np.ndarray:
    """Batched pseudo-outputs, shape (N, K).  For mse this is J theta - f + y."""
    if loss != "mse":
        raise UnsupportedLossError(
            "pseudo-outputs need an invertible loss Hessian; cross_entropy is singular")
    X = _check_inputs(params, X)
    if J is None:
        J = jacobian_batch(params, X)
    f = forward_batch(params, X)
    return np.einsum("nkp,p->nk", J, params.theta) - f + np.asarray(Y, dtype=np.float64)


# --- training -------------------------------------------------------------

def _loss_value(out, Y, loss):
    if loss == "mse":
        return 0.5 * np.sum((out - Y) ** 2, axis=1)
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -np.sum(Y * logp, axis=1)


def _residual(out, Y, loss):
    if loss == "mse":
        return out - Y
    return softmax(out, axis=1) - Y


def objective_and_grad(params: MlpParams, X, Y, loss: str, delta: float, n_total: int):
    """Mean batch loss + (delta/2) theta.theta / n_total, and its gradient."""
    return _objective_and_grad(params.theta, params.spec, X, Y, loss, delta, n_total)


def _objective_and_grad(theta, spec, X, Y, loss, delta, n_total):
    layers = [(theta[ws].reshape(shape), theta[bs]) for ws, bs, shape in spec.layer_slices()]
    acts = [X]
    zs = []
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if i < len(layers) - 1:
            zs.append(z)
            a = _act(z, spec.activation)
            acts.append(a)
        else:
            a = z
    out = a
    value = _loss_value(out, Y, loss).mean() + 0.5 * delta * (theta @ theta) / n_total

    grad = np.empty_like(theta)
    g = _residual(out, Y, loss) / X.shape[0]
    slices = spec.layer_slices()
    for li in range(len(layers) - 1, -1, -1):
        ws, bs, _shape = slices[li]
        grad[ws] = (g.T @ acts[li]).ravel()
        grad[bs] = g.sum(axis=0)
        if li > 0:
            g = (g @ layers[li][0]) * _act_grad(zs[li - 1], acts[li], spec.activation)
    grad += delta * theta / n_total
    return value, grad


def train_map(params: MlpParams, data: LabeledDataset, cfg: TrainConfig,
              return_history: bool = False):
    """Plain mini-batch SGD on the L2-regularised objective."""
    if data.X.shape[1] != params.spec.n_inputs or data.Y.shape[1] != params.spec.n_outputs:
        raise ValueError("dataset dimensions do not match the network")
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    theta = params.theta.copy()
    spec = params.spec
    history = []
    # overflow on the way to a non-finite loss is reported as divergence below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                value, grad = _objective_and_grad(theta, spec, data.X[idx], data.Y[idx],
                                                  cfg.loss, cfg.l2_delta, n)
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch offset {start}; "
                        f"try a smaller learning rate (lr={cfg.learning_rate})")
                theta = theta - cfg.learning_rate * grad
            if return_history or epoch == cfg.epochs - 1:
                value, _ = _objective_and_grad(theta, spec, data.X, data.Y, cfg.loss,
                                               cfg.l2_delta, n)
                if not np.isfinite(value):
                    raise TrainingDivergedError(f"non-finite training loss after epoch {epoch}")
                history.append(value)
    trained = MlpParams(theta, spec)
    log.info("trained %d epochs, final objective %.6g", cfg.epochs, history[-1])
    if return_history:
        return trained, history
    return trained


def train_rmse(params: MlpParams, data: LabeledDataset) -> float:
    return float(np.sqrt(np.mean((forward_batch(params, data.X) - data.Y) ** 2)))
