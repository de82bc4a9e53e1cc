"""Full-batch gradient descent on the half squared loss, with per-iteration tracing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CenterSet, CorruptedDataset
from .network import Activation, NetworkState, classify, jacobian_gram
from .spectral import SupportPartition, cluster_covariance

STOP_RULES = ("fixed-T", "loss-threshold", "signal-threshold")
TRACE_COLUMNS = (
    "iter", "loss", "r2", "r_signal", "r_noise", "rinf_clean",
    "dist_fro", "dist_spec", "err_corrupt", "err_clean",
)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, last_finite: int, loss: float):
        self.iteration = iteration
        self.last_finite = last_finite
        super().__init__(
            f"loss diverged at iteration {iteration} (value {loss:.3g}); "
            f"last finite iteration {last_finite}"
        )


@dataclass(frozen=True)
class TheoryConstants:
    """Free constants of the step-size / stop-time / width formulas."""

    c_step: float = 0.5
    c_time: float = 1.0
    C1: float = 5.0
    C_width: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    eta: float | str = "theoretical"
    max_iters: int | None = None  # None: use the theoretical stop time
    stop_rule: str = "fixed-T"
    stop_value: float | None = None  # loss threshold or signal-residual level nu
    record_every: int = 1
    snapshot_every: int = 0  # 0 keeps only the first and last weights
    constants: TheoryConstants = field(default_factory=TheoryConstants)
    lambda_C: float | None = None  # estimated on demand when needed
    mc_samples: int = 20_000
    mc_seed: int = 0
    divergence_factor: float = 1e6

    def __post_init__(self):
        if isinstance(self.eta, str):
            if self.eta != "theoretical":
                raise ValueError(f"eta must be a positive number or 'theoretical', got {self.eta!r}")
        elif not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.max_iters is not None and self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")
        if self.stop_rule != "fixed-T" and self.stop_value is None:
            raise ValueError(f"stop_rule {self.stop_rule} needs stop_value")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")


# --- theory-prescribed hyperparameters ----------------------------------------


def _center_matrix(centers) -> np.ndarray:
    return np.asarray(getattr(centers, "centers", centers), dtype=float)


def _log_K(K: int) -> float:
    # log K vanishes for a single cluster; fall back to log 2 there
    return math.log(max(K, 2))


def theoretical_step_size(K: int, n: int, centers, activation: Activation,
                          c_step: float = 0.5, c_up: float = 2.0) -> float:
    """``c_step * K / (c_up * n * Gamma^2 * ||C||^2)``."""
    C = _center_matrix(centers)
    if C.size == 0:
        raise ValueError("centers must be nonempty")
    norm_C = np.linalg.norm(C, 2)
    return c_step * K / (c_up * n * activation.gamma**2 * norm_C**2)


def theoretical_stop_time(centers, activation: Activation, n: int, K: int, rho: float,
                          lambda_C: float, C1: float = 5.0, eta: float | None = None,
                          c_step: float = 0.5, c_up: float = 2.0) -> int:
    """``ceil(C1 * K/(eta n lambda) * log(Gamma sqrt(n log K) / rho))``, at least 1."""
    if rho <= 0:
        raise ValueError("rho must be positive; use the signal-threshold stop rule for clean labels")
    if lambda_C <= 0:
        raise ValueError("lambda_C must be positive")
    if eta is None:
        eta = theoretical_step_size(K, n, centers, activation, c_step, c_up)
    g = activation.gamma
    tau = C1 * K / (eta * n * lambda_C) * math.log(g * math.sqrt(n * _log_K(K)) / rho)
    return max(1, math.ceil(tau))


def suggested_iterations(centers, lambda_C: float, c_time: float = 1.0) -> int:
    """Coarse ``c_time * ||C||^2 / lambda`` iteration count; a hint only."""
    norm_C = np.linalg.norm(_center_matrix(centers), 2)
    return max(1, math.ceil(c_time * norm_C**2 / lambda_C))


def theoretical_width(centers, activation: Activation, lambda_C: float, C_width: float = 1.0) -> int:
    """Hidden width ``C_width * Gamma^4 * K log K * ||C||^2 / lambda^2`` for perfectly clustered data."""
    C = _center_matrix(centers)
    K = C.shape[0]
    norm_C = np.linalg.norm(C, 2)
    k = C_width * activation.gamma**4 * K * _log_K(K) * norm_C**2 / lambda_C**2
    return max(1, math.ceil(k))


def initial_misfit_check(state0: NetworkState, dataset: CorruptedDataset) -> tuple[float, float]:
    """``||f(W0) - y||`` and its ratio to ``Gamma sqrt(n log K)``."""
    r = state0.activation.phi(dataset.inputs @ state0.W.T) @ state0.v - dataset.labels
    misfit = float(np.linalg.norm(r))
    scale = state0.activation.gamma * math.sqrt(dataset.n * _log_K(dataset.num_clusters))
    return misfit, misfit / scale


# --- tracing ------------------------------------------------------------------


@dataclass
class TrainTrace:
    iters: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    r2: list = field(default_factory=list)
    r_signal: list = field(default_factory=list)
    r_noise: list = field(default_factory=list)
    rinf_clean: list = field(default_factory=list)
    dist_fro: list = field(default_factory=list)
    dist_spec: list = field(default_factory=list)
    err_corrupt: list = field(default_factory=list)
    err_clean: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    residuals: list = field(default_factory=list)  # f(W_tau) - y at each record
    snapshots: dict = field(default_factory=dict)  # iteration -> W
    W0: np.ndarray | None = None
    final_state: NetworkState | None = None
    eta: float = float("nan")
    eps0: float | None = None
    partition: SupportPartition | None = None
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.iters)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name))

    def index_of(self, iteration: int) -> int:
        try:
            return self.iters.index(iteration)
        except ValueError:
            raise KeyError(f"iteration {iteration} was not recorded") from None

    def weights_at(self, iteration: int) -> np.ndarray:
        try:
            return self.snapshots[iteration]
        except KeyError:
            raise KeyError(f"no weight snapshot at iteration {iteration}") from None

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for i in range(len(self)):
                row = [self.iters[i]]
                for name in TRACE_COLUMNS[1:8]:
                    row.append(repr(float(getattr(self, name)[i])))
                row += [int(self.err_corrupt[i]), int(self.err_clean[i])]
                w.writerow(row)


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS}


def class_alphabet(dataset: CorruptedDataset) -> np.ndarray:
    if dataset.centers is not None:
        return dataset.centers.class_labels
    return np.unique(np.concatenate([dataset.clean_labels, dataset.labels]))


class _Recorder:
    def __init__(self, dataset: CorruptedDataset, W0: np.ndarray, trace: TrainTrace):
        self.ds = dataset
        self.W0 = W0
        self.trace = trace
        self.partition = trace.partition
        alphabet = class_alphabet(dataset)
        self.alphabet = alphabet
        self.y_class = classify(dataset.labels, alphabet)
        self.clean_class = classify(dataset.clean_labels, alphabet)
        self.t0 = time.perf_counter()

    def __call__(self, it: int, W: np.ndarray, f: np.ndarray, snapshot: bool) -> None:
        t = self.trace
        r = f - self.ds.labels
        counts = self.partition.cluster_sizes
        signal = (np.bincount(self.partition.membership, weights=r, minlength=counts.size) / counts)[
            self.partition.membership
        ]
        noise = r - signal
        dW = W - self.W0
        pred = classify(f, self.alphabet)
        t.iters.append(int(it))
        t.loss.append(0.5 * float(r @ r))
        t.r2.append(float(np.linalg.norm(r)))
        t.r_signal.append(float(np.linalg.norm(signal)))
        t.r_noise.append(float(np.linalg.norm(noise)))
        t.rinf_clean.append(float(np.max(np.abs(f - self.ds.clean_labels))))
        t.dist_fro.append(float(np.linalg.norm(dW)))
        small = dW.T @ dW if dW.shape[1] <= dW.shape[0] else dW @ dW.T
        t.dist_spec.append(float(np.sqrt(max(np.linalg.eigvalsh(small)[-1], 0.0))))
        t.err_corrupt.append(int(np.sum(pred != self.y_class)))
        t.err_clean.append(int(np.sum(pred != self.clean_class)))
        t.wall.append(time.perf_counter() - self.t0)
        t.residuals.append(r.copy())
        if snapshot:
            t.snapshots[int(it)] = W.copy()


def _partition_of(dataset: CorruptedDataset) -> SupportPartition:
    return SupportPartition.from_membership(dataset.membership, dataset.num_clusters)


def resolve_eta(config: TrainConfig, dataset: CorruptedDataset, activation: Activation) -> float:
    if config.eta != "theoretical":
        return float(config.eta)
    if dataset.centers is None:
        raise ValueError("theoretical eta needs the dataset's centers")
    return theoretical_step_size(dataset.num_clusters, dataset.n, dataset.centers, activation,
                                 config.constants.c_step, dataset.c_up)


def resolve_iterations(config: TrainConfig, dataset: CorruptedDataset, activation: Activation,
                       eta: float) -> int:
    if config.max_iters is not None:
        return int(config.max_iters)
    if dataset.centers is None:
        raise ValueError("theoretical stop time needs the dataset's centers")
    lam = config.lambda_C
    if lam is None:
        lam = cluster_covariance(dataset.centers, activation, config.mc_samples, config.mc_seed).lambda_min
    return theoretical_stop_time(dataset.centers, activation, dataset.n, dataset.num_clusters,
                                 dataset.rho, lam, config.constants.C1, eta=eta)


def train(dataset: CorruptedDataset, state0: NetworkState, config: TrainConfig) -> TrainTrace:
    """Run ``W <- W - eta * grad`` from ``state0`` and record the trajectory."""
    X, y = dataset.inputs, dataset.labels
    if X.shape[1] != state0.d:
        raise ValueError(f"dataset has d={X.shape[1]}, network expects d={state0.d}")
    act = state0.activation
    eta = resolve_eta(config, dataset, act)
    T = resolve_iterations(config, dataset, act, eta)

    trace = TrainTrace(W0=state0.W.copy(), eta=eta, partition=_partition_of(dataset),
                       eps0=dataset.centers.eps0 if dataset.centers is not None else None)
    record = _Recorder(dataset, state0.W, trace)
    v = state0.v
    W = state0.W.copy()
    loss0 = None
    last_finite = 0
    for it in range(T + 1):
        Z = X @ W.T
        P, dP = act.value_and_derivative(Z)
        f = P @ v
        r = f - y
        L = 0.5 * float(r @ r)
        if loss0 is None:
            loss0 = L
        if not math.isfinite(L) or L > config.divergence_factor * max(loss0, 1e-300):
            raise DivergenceError(it, last_finite, L)
        last_finite = it

        stop = it == T
        if config.stop_rule == "loss-threshold" and L <= config.stop_value:
            stop, trace.stop_reason = True, "loss-threshold"
        elif config.stop_rule == "signal-threshold":
            signal = trace.partition.cluster_sizes
            means = np.bincount(trace.partition.membership, weights=r, minlength=signal.size) / signal
            if np.linalg.norm(means[trace.partition.membership]) <= config.stop_value:
                stop, trace.stop_reason = True, "signal-threshold"
        if stop or it % config.record_every == 0:
            snap = it == 0 or stop or (config.snapshot_every and it % config.snapshot_every == 0)
            record(it, W, f, bool(snap))
        if stop:
            trace.stop_reason = trace.stop_reason or "max-iters"
            break
        D = dP * v
        W -= eta * ((D * r[:, None]).T @ X)

    trace.final_state = state0.with_weights(W)
    return trace


def interpolate(dataset: CorruptedDataset, start: NetworkState, rel_tol: float = 1e-3,
                max_steps: int = 100, trace: TrainTrace | None = None, W0=None,
                mu0: float = 1e-6) -> tuple[TrainTrace, bool]:
    """Drive the residual below ``rel_tol * ||r(W0)||`` with Levenberg-Marquardt steps.

    Each step is the minimum-norm damped Gauss-Newton update
    ``dW = J^T (J J^T + mu I)^{-1} r``, formed through the n x n Gram matrix.
    When ``trace`` is given its records are kept and the new steps are appended
    with continuing iteration numbers; every accepted step is snapshotted.
    Returns the trace and whether the tolerance was met.
    """
    X, y = dataset.inputs, dataset.labels
    act, v = start.activation, start.v
    if trace is None:
        W0 = start.W.copy() if W0 is None else np.asarray(W0, dtype=float)
        trace = TrainTrace(W0=W0.copy(), eta=float("nan"), partition=_partition_of(dataset),
                           eps0=dataset.centers.eps0 if dataset.centers is not None else None)
        offset = 0
    else:
        trace = copy_trace(trace)
        offset = trace.iters[-1] if trace.iters else 0
    W0 = trace.W0
    record = _Recorder(dataset, W0, trace)

    r0_norm = np.linalg.norm(act.phi(X @ W0.T) @ v - y)
    W = start.W.copy()
    f = act.phi(X @ W.T) @ v
    if not trace.iters:
        record(0, W, f, True)
    mu = mu0
    converged = np.linalg.norm(f - y) <= rel_tol * r0_norm
    step = 0
    while not converged and step < max_steps:
        r = f - y
        G = jacobian_gram(start.with_weights(W), X)
        scale = np.trace(G) / G.shape[0]
        for _ in range(30):
            z = np.linalg.solve(G + mu * scale * np.eye(G.shape[0]), r)
            D = act.dphi(X @ W.T) * v
            W_new = W - (D * z[:, None]).T @ X
            f_new = act.phi(X @ W_new.T) @ v
            if np.linalg.norm(f_new - y) < np.linalg.norm(r):
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 10.0
        else:
            break
        W, f = W_new, f_new
        step += 1
        converged = np.linalg.norm(f - y) <= rel_tol * r0_norm
        record(offset + step, W, f, True)
    trace.final_state = start.with_weights(W)
    trace.stop_reason = "interpolated" if converged else "interpolation-failed"
    return trace, bool(converged)


def copy_trace(trace: TrainTrace) -> TrainTrace:
    copied = {name: list(getattr(trace, name)) for name in (
        "iters", "loss", "r2", "r_signal", "r_noise", "rinf_clean", "dist_fro",
        "dist_spec", "err_corrupt", "err_clean", "wall", "residuals")}
    return replace(trace, snapshots=dict(trace.snapshots), **copied)


def make_training_set(X, y, y_clean=None, membership=None) -> CorruptedDataset:
    """Wrap raw arrays (e.g. two-point problems) as a dataset; one cluster by default."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    y_clean = y if y_clean is None else np.asarray(y_clean, dtype=float)
    membership = np.zeros(len(y), dtype=int) if membership is None else np.asarray(membership)
    return CorruptedDataset(X, y, y_clean, membership, y != y_clean)


def center_set_of(dataset: CorruptedDataset) -> CenterSet:
    if dataset.centers is None:
        raise ValueError("dataset carries no center set")
    return dataset.centers
