"""Build a mixture of NTK GP experts around a trained network and serve it."""

from __future__ import annotations

import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as snapshot_io
from .expert import (ExpertGp, FactorizationError, PredictiveDist, active_select,
                     assemble_patch, fit_expert, optimize_mll, predict_batch)
from .features import PruneMask, expert_prune, global_prune
from .gating import (GatingModel, assign_batch, boundary_candidates, fit_gating,
                     neighbor_graph)
from .nn import (LabeledDataset, MlpParams, MlpSpec, forward_batch, jacobian_batch,
                 pseudo_outputs)

log = logging.getLogger(__name__)

# np.dot has lower call overhead than @ for the tiny products of one query
dot = np.dot

PARTITION_MODES = ("shared", "per_output")


class PipelineError(RuntimeError):
    """A build stage failed; ``expert`` names the failing expert if known."""

    def __init__(self, message, expert=None):
        super().__init__(message if expert is None else f"expert {expert}: {message}")
        self.expert = expert


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 8
    pca_subset: int = 256
    pca_dims: int = 8
    n_neighbors: int = 2
    boundary_fraction: float = 0.5
    # per-neighbour active-selection budget; None takes every candidate
    boundary_budget: int | None = 16
    prune_global: float = 1.0
    prune_expert: float = 1.0
    mll_iterations: int = 100
    patch_enabled: bool = True
    partition_mode: str = "shared"
    # initial noise variance; None uses the network's mean squared residual
    init_sigma0: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        for name in ("boundary_fraction", "prune_global", "prune_expert"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.boundary_budget is not None and self.boundary_budget < 0:
            raise ValueError("boundary_budget must be >= 0")
        if self.mll_iterations < 0:
            raise ValueError("mll_iterations must be >= 0")
        if self.n_neighbors < 0:
            raise ValueError("n_neighbors must be >= 0")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.partition_mode!r}")
        if self.init_sigma0 is not None and not self.init_sigma0 > 0:
            raise ValueError("init_sigma0 must be positive")


@dataclass
class MoeModel:
    mlp: MlpParams
    train_X: np.ndarray
    global_mask: PruneMask
    gatings: list
    labels: list
    experts: list
    config: MoeConfig
    train_config: dict
    lambda0: float = 0.0
    metadata: dict = field(default_factory=dict)
    _server: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def loss(self) -> str:
        return self.train_config.get("loss", "mse")

    @property
    def n_outputs(self) -> int:
        return self.mlp.spec.n_outputs

    def gating_for(self, k: int) -> GatingModel:
        return self.gatings[0 if len(self.gatings) == 1 else k]

    def expert(self, k: int, m: int) -> ExpertGp:
        return self.experts[k][m]


def average_expert_size(n: int, m: int) -> int:
    """Mean points per expert, rounded half-up for reporting."""
    if m < 1:
        raise ValueError("need at least one expert")
    return int(math.floor(n / m + 0.5))


def _global_features(mlp: MlpParams, X, mask: PruneMask):
    J = jacobian_batch(mlp, X)
    phi = J.transpose(1, 0, 2)
    if mask.stage != "none":
        phi = phi[:, :, mask.kept]
    return J, np.ascontiguousarray(phi)


def _stack_outputs(phi):
    K, n, P = phi.shape
    return np.ascontiguousarray(phi.transpose(1, 0, 2).reshape(n, K * P))


@dataclass
class _ExpertTask:
    k: int
    m: int
    ids: np.ndarray
    phi: np.ndarray
    targets: np.ndarray
    members: np.ndarray
    pools: list
    budget: int | None
    init_hyper: tuple
    prune_expert: float
    mll_iterations: int


def _build_expert(task: _ExpertTask) -> ExpertGp:
    with threadpool_limits(limits=1):
        return _build_expert_inner(task)


def _build_expert_inner(task: _ExpertTask) -> ExpertGp:
    local = {int(i): r for r, i in enumerate(task.ids)}
    rows = lambda ids: [local[int(i)] for i in ids]  # noqa: E731
    phi, y = task.phi, task.targets
    current = phi[rows(task.members)]
    chosen_blocks = []
    for pool in task.pools:
        if pool.size == 0:
            continue
        budget = pool.size if task.budget is None else min(task.budget, pool.size)
        sel = active_select(current, phi[rows(pool)], budget, *task.init_hyper)
        chosen = pool[sel]
        if chosen.size:
            chosen_blocks.append(chosen)
            current = np.vstack([current, phi[rows(chosen)]])
    boundary = (np.concatenate(chosen_blocks) if chosen_blocks
                else np.zeros(0, dtype=np.int64))
    Phi = assemble_patch(phi[rows(task.members)], [phi[rows(c)] for c in chosen_blocks])
    targets = y[rows(np.concatenate([task.members, boundary]))]
    mask = expert_prune(Phi, task.prune_expert)
    if mask.stage != "none":
        Phi = np.ascontiguousarray(Phi[:, mask.kept])
    hyper = optimize_mll(Phi, targets, task.init_hyper, task.mll_iterations)
    return fit_expert(Phi, targets, *hyper, mask=mask, member_ids=task.members,
                      boundary_ids=boundary)


def _run_tasks(tasks, workers):
    if workers == 1 or len(tasks) <= 1:
        return [_build_expert(t) for t in tasks]
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_build_expert, tasks))


def fit_moe(mlp: MlpParams, data: LabeledDataset, cfg: MoeConfig, workers: int = 1,
            train_config: dict | None = None) -> MoeModel:
    """Division (prune, features, gating), then conquer (one GP per expert)."""
    if workers < 1:
        raise ValueError("workers must be a positive integer")
    train_config = dict(train_config or {"loss": "mse", "l2_delta": 1.0})
    loss = train_config.get("loss", "mse")
    delta = float(train_config.get("l2_delta", 1.0))
    X = np.asarray(data.X, dtype=np.float64)
    n = X.shape[0]
    K = mlp.spec.n_outputs
    if X.shape[1] != mlp.spec.n_inputs or data.Y.shape[1] != K:
        raise ValueError("dataset dimensions do not match the network")
    if cfg.n_experts > n:
        raise ValueError(f"{cfg.n_experts} experts requested for {n} points")
    timings = {}
    t0 = time.perf_counter()

    global_mask = global_prune(mlp.theta, cfg.prune_global)
    J, phi = _global_features(mlp, X, global_mask)
    if loss == "mse":
        targets = pseudo_outputs(mlp, X, data.Y, loss, J=J)
        if not np.all(np.isfinite(targets)):
            raise PipelineError("non-finite pseudo-outputs")
        residual_var = float(np.mean((forward_batch(mlp, X) - data.Y) ** 2))
        mll_iterations = cfg.mll_iterations
    else:
        # only variances are needed for classification and they do not see targets
        targets = np.zeros((n, K))
        residual_var = 1.0
        mll_iterations = 0
    del J
    sigma0 = cfg.init_sigma0 if cfg.init_sigma0 is not None else max(residual_var, 1e-8)
    init_hyper = (float(np.log(delta)), float(np.log(sigma0)))
    timings["features"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    S = min(cfg.pca_subset, n)
    d = min(cfg.pca_dims, S)
    gatings, labels, embeddings = [], [], []
    gate_inputs = [_stack_outputs(phi)] if cfg.partition_mode == "shared" else list(phi)
    for feats in gate_inputs:
        g, lab, V = fit_gating(feats, S, d, cfg.n_experts, cfg.seed, delta)
        gatings.append(g)
        labels.append(lab)
        embeddings.append(V)
    timings["gating"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    tasks = []
    use_patch = cfg.patch_enabled and cfg.boundary_budget != 0 and cfg.n_neighbors > 0
    for k in range(K):
        gi = 0 if len(gatings) == 1 else k
        g, lab, V = gatings[gi], labels[gi], embeddings[gi]
        graph = neighbor_graph(g, cfg.n_neighbors)
        for m in range(cfg.n_experts):
            members = np.flatnonzero(lab == m)
            if members.size == 0:
                raise PipelineError("empty cluster after repair", expert=m)
            pools = []
            if use_patch:
                pools = [boundary_candidates(g, V, lab, m, b, cfg.boundary_fraction)
                         for b in graph[m]]
            ids = np.unique(np.concatenate([members] + pools))
            tasks.append(_ExpertTask(k, m, ids, phi[k][ids], targets[ids, k], members,
                                     pools, cfg.boundary_budget, init_hyper,
                                     cfg.prune_expert, mll_iterations))
    try:
        built = _run_tasks(tasks, workers)
    except FactorizationError as exc:
        raise PipelineError(f"factorisation failed: {exc}") from exc
    experts = [[None] * cfg.n_experts for _ in range(K)]
    for task, e in zip(tasks, built):
        experts[task.k][task.m] = e
    timings["experts"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0

    metadata = {
        "timings": timings,
        "jitters": [[e.jitter for e in row] for row in experts],
        "expert_sizes": [[int(e.n_train) for e in row] for row in experts],
        "workers": workers,
    }
    log.info("built %d experts x %d outputs in %.2fs", cfg.n_experts, K, timings["total"])
    return MoeModel(mlp, X.copy(), global_mask, gatings, labels, experts, cfg,
                    train_config, 0.0, metadata)


def routed_features(model: MoeModel, X):
    """Globally pruned test features (K, n, P-bar) and routed expert ids (K, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _, phi = _global_features(model.mlp, X, model.global_mask)
    if len(model.gatings) == 1:
        route = np.tile(assign_batch(model.gatings[0], _stack_outputs(phi)),
                        (model.n_outputs, 1))
    else:
        route = np.stack([assign_batch(g, phi[k]) for k, g in enumerate(model.gatings)])
    return phi, route


def predict_moe_batch(model: MoeModel, X) -> PredictiveDist:
    """DNN mean with the routed expert's variance; GP mean kept as a diagnostic."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    phi, route = routed_features(model, X)
    n, K = X.shape[0], model.n_outputs
    var = np.empty((n, K))
    gp_mean = np.empty((n, K))
    clamped = 0
    for k in range(K):
        for m in np.unique(route[k]):
            idx = np.flatnonzero(route[k] == m)
            e = model.experts[k][m]
            rows = phi[k][idx]
            if e.mask.stage != "none":
                rows = rows[:, e.mask.kept]
            d = predict_batch(e, rows)
            var[idx, k] = d.variance
            gp_mean[idx, k] = d.mean
            clamped += d.clamped
    return PredictiveDist(forward_batch(model.mlp, X), var, gp_mean, clamped)


class _Server:
    """Precomputed views for single-input prediction.

    Same arithmetic as the batch path but with matrix-vector products and no
    per-call grouping, so one query costs a few dozen small numpy calls.
    Agrees with the batch path up to rounding.
    """

    def __init__(self, model: MoeModel):
        spec = model.mlp.spec
        self.n_inputs = spec.n_inputs
        self.K = spec.n_outputs
        self.P = spec.n_params
        self.activation = spec.activation
        self.eye = np.eye(self.K)
        self.layers = [(np.ascontiguousarray(W), b) for W, b in model.mlp.layers()]
        self.slices = [(ws.start, ws.stop, bs.stop) for ws, bs, _ in spec.layer_slices()]
        gm = model.global_mask
        self.kept = None if gm.stage == "none" else gm.kept
        self.gates = [(g._projection, g._offset, g.centroids) for g in model.gatings]
        self.experts = [[(e._whitened, e._mean_weights, e.delta, e.sigma0,
                          None if e.mask.stage == "none" else e.mask.kept)
                         for e in row] for row in model.experts]

    def features(self, x):
        acts, zs = [x], []
        a = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            z = dot(W, a) + b
            if i < last:
                zs.append(z)
                a = np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)
                acts.append(a)
            else:
                a = z
        K = self.K
        J = np.empty((K, self.P))
        delta = self.eye
        for li in range(last, -1, -1):
            w0, w1, b1 = self.slices[li]
            n_out = delta.shape[1]
            np.multiply(delta[:, :, None], acts[li],
                        out=J[:, w0:w1].reshape(K, n_out, -1))
            J[:, w1:b1] = delta
            if li > 0:
                back = dot(delta, self.layers[li][0])
                if self.activation == "tanh":
                    delta = back * (1.0 - acts[li] * acts[li])
                else:
                    delta = back * (zs[li - 1] > 0.0)
        if self.kept is not None:
            J = J[:, self.kept]
        return a, J

    def predict(self, x) -> PredictiveDist:
        out, phi = self.features(x)
        K = self.K
        if len(self.gates) == 1:
            proj, off, C = self.gates[0]
            v = dot(phi.ravel(), proj) + off
            route = [int(np.argmin(((C - v) ** 2).sum(axis=1)))] * K
        else:
            route = [int(np.argmin(((C - (dot(phi[k], proj) + off)) ** 2).sum(axis=1)))
                     for k, (proj, off, C) in enumerate(self.gates)]
        var = np.empty(K)
        gp_mean = np.empty(K)
        clamped = 0
        for k in range(K):
            Wh, mw, delta, sigma0, kept = self.experts[k][route[k]]
            row = phi[k] if kept is None else phi[k][kept]
            w = dot(Wh, row)
            v = dot(row, row) / delta - dot(w, w)
            if v < 0:
                clamped += 1
                v = 0.0
            var[k] = v + sigma0
            gp_mean[k] = dot(row, mw)
        return PredictiveDist(out, var, gp_mean, clamped)


def predict_moe(model: MoeModel, x) -> PredictiveDist:
    """Single-input prediction; agrees with the batch path up to rounding."""
    x = np.asarray(x, dtype=np.float64)
    if model._server is None:
        model._server = _Server(model)
    if x.shape != (model._server.n_inputs,):
        raise ValueError(f"input has shape {x.shape}, expected ({model._server.n_inputs},)")
    return model._server.predict(x)


def route(model: MoeModel, X) -> np.ndarray:
    return routed_features(model, X)[1]


# --- snapshots ------------------------------------------------------------

def _gating_to_dict(g: GatingModel) -> dict:
    return {
        "landmark_features": g.landmark_features,
        "alpha": g.alpha,
        "eigvals": g.eigvals,
        "centroids": g.centroids,
        "delta": g.delta,
        "config": dict(g.config),
    }


def _expert_to_dict(e: ExpertGp) -> dict:
    return {
        "member_ids": e.member_ids,
        "boundary_ids": e.boundary_ids,
        "expert_mask": {"kept": e.mask.kept, "stage": e.mask.stage},
        "log_delta": e.log_delta,
        "log_sigma0": e.log_sigma0,
        "chol": e.chol[np.tril_indices(e.chol.shape[0])],
        "coeffs": e.coeffs,
        "targets": e.targets,
        "jitter": e.jitter,
    }


def model_to_dict(model: MoeModel) -> dict:
    return {
        "kind": "moe",
        "mlp_spec": {"layer_widths": list(model.mlp.spec.layer_widths),
                     "activation": model.mlp.spec.activation},
        "theta": model.mlp.theta,
        "train_config_echo": dict(model.train_config),
        "train_inputs": model.train_X,
        "moe_config": asdict(model.config),
        "global_mask": {"kept": model.global_mask.kept, "stage": model.global_mask.stage},
        "gating": [_gating_to_dict(g) for g in model.gatings],
        "labels": list(model.labels),
        "experts": [[_expert_to_dict(e) for e in row] for row in model.experts],
        "calibration": {"lambda0": model.lambda0},
        "metadata": model.metadata,
    }


def model_from_dict(doc: dict) -> MoeModel:
    if doc.get("kind") != "moe":
        raise snapshot_io.SnapshotError(f"snapshot holds a {doc.get('kind')!r}, not a model")
    spec = MlpSpec(tuple(doc["mlp_spec"]["layer_widths"]), doc["mlp_spec"]["activation"])
    mlp = MlpParams(np.asarray(doc["theta"], dtype=np.float64), spec)
    X = np.asarray(doc["train_inputs"], dtype=np.float64).reshape(-1, spec.n_inputs)
    gm = doc["global_mask"]
    global_mask = PruneMask(np.asarray(gm["kept"], dtype=np.int64), gm["stage"])
    cfg = MoeConfig(**doc["moe_config"])
    gatings = []
    for gd in doc["gating"]:
        lm = np.asarray(gd["landmark_features"], dtype=np.float64)
        eig = np.asarray(gd["eigvals"], dtype=np.float64)
        gatings.append(GatingModel(
            lm, np.asarray(gd["alpha"], dtype=np.float64).reshape(lm.shape[0], eig.size),
            eig, np.asarray(gd["centroids"], dtype=np.float64).reshape(-1, eig.size),
            float(gd["delta"]), dict(gd["config"])))
    labels = [np.asarray(lab, dtype=np.int64) for lab in doc["labels"]]
    _, phi = _global_features(mlp, X, global_mask)
    experts = []
    for k, row in enumerate(doc["experts"]):
        built = []
        for ed in row:
            members = np.asarray(ed["member_ids"], dtype=np.int64)
            boundary = np.asarray(ed["boundary_ids"], dtype=np.int64)
            mask = PruneMask(np.asarray(ed["expert_mask"]["kept"], dtype=np.int64),
                             ed["expert_mask"]["stage"])
            ids = np.concatenate([members, boundary])
            feats = phi[k][ids]
            if mask.stage != "none":
                feats = np.ascontiguousarray(feats[:, mask.kept])
            n = ids.size
            chol = np.zeros((n, n))
            chol[np.tril_indices(n)] = np.asarray(ed["chol"], dtype=np.float64)
            coeffs = np.asarray(ed["coeffs"], dtype=np.float64)
            targets = np.asarray(ed["targets"], dtype=np.float64)
            built.append(ExpertGp(feats, targets, float(ed["log_delta"]),
                                  float(ed["log_sigma0"]), chol, coeffs,
                                  float(ed["jitter"]), mask, members, boundary))
        experts.append(built)
    return MoeModel(mlp, X, global_mask, gatings, labels, experts, cfg,
                     dict(doc["train_config_echo"]), float(doc["calibration"]["lambda0"]),
                     dict(doc.get("metadata", {})))


def serialize(model: MoeModel) -> bytes:
    return snapshot_io.encode_snapshot(model_to_dict(model))


def load(data: bytes) -> MoeModel:
    return model_from_dict(snapshot_io.decode_snapshot(data))


def canonical_bytes(model: MoeModel) -> bytes:
    """Snapshot bytes with run-dependent metadata removed, for equality checks."""
    doc = model_to_dict(model)
    doc["metadata"] = {}
    return snapshot_io.encode_snapshot(doc)


def with_lambda0(model: MoeModel, lambda0: float) -> MoeModel:
    return replace(model, lambda0=float(lambda0))
