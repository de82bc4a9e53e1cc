"""Checks of the convergence, robustness and lower-bound guarantees against measured runs.

Each verifier returns a :class:`BoundReport` with ``holds == (lhs <= rhs + tolerance)``.
Bounds with explicit constants are checked literally; bounds whose constants are
only known up to scaling are checked with measured singular values or as trends.
Verifiers recompute everything from raw weights and residual snapshots.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .dataset import CorruptedDataset
from .network import (
    TANH,
    Activation,
    NetworkState,
    average_jacobian,
    classify,
    gradient,
    jacobian,
    jacobian_gram,
    predict,
)
from .spectral import (
    SupportPartition,
    diffusedness,
    noise_projection,
    subspace_alpha,
    subspace_extremes,
    support_projection,
)
from .trainer import TrainTrace, class_alphabet, copy_trace, interpolate, make_training_set


class NotApplicable(Exception):
    """The verifier's precondition is not met by the supplied run."""


@dataclass
class BoundReport:
    name: str
    holds: bool
    lhs: float
    rhs: float
    margin: float
    tolerance: float = 0.0
    details: dict = field(default_factory=dict)
    applicable: bool = True
    in_regime: bool = True
    note: str = ""

    @classmethod
    def compare(cls, name: str, lhs: float, rhs: float, tolerance: float = 0.0, **kw) -> "BoundReport":
        lhs, rhs = float(lhs), float(rhs)
        return cls(name, bool(lhs <= rhs + tolerance), lhs, rhs, rhs - lhs, float(tolerance), **kw)

    @classmethod
    def not_applicable(cls, name: str, note: str, **details) -> "BoundReport":
        nan = float("nan")
        return cls(name, False, nan, nan, nan, details=details, applicable=False, note=note)

    @property
    def failed_in_regime(self) -> bool:
        return self.applicable and self.in_regime and not self.holds

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --- trajectory invariants ---------------------------------------------------


def _require_clean_inputs(trace: TrainTrace, what: str) -> None:
    if trace.eps0 is None:
        raise ValueError(f"{what}: trace does not record eps0")
    if trace.eps0 > 0:
        raise ValueError(f"{what} is exact only for perfectly clustered inputs (eps0 = 0), got eps0={trace.eps0}")


def verify_noise_freeze(trace: TrainTrace, tol: float = 1e-6, floor: float = 1e-8) -> BoundReport:
    """The S- component of the residual never moves when inputs sit exactly on the centers.

    Drift is measured relative to ``|e_0|``, floored at ``floor * |r_0|`` so that
    clean labels (where ``e_0`` is pure rounding noise) are still judged sensibly.
    """
    _require_clean_inputs(trace, "noise freeze")
    part = trace.partition
    e0 = noise_projection(part, trace.residuals[0])
    scale = max(np.linalg.norm(e0), floor * np.linalg.norm(trace.residuals[0]), 1e-300)
    drift = np.array([np.linalg.norm(noise_projection(part, r) - e0) / scale for r in trace.residuals])
    return BoundReport.compare(
        "noise_freeze", drift.max(), tol,
        details={"iters": list(trace.iters), "relative_drift": drift, "noise_norm0": float(np.linalg.norm(e0))},
    )


def trajectory_alpha(trace: TrainTrace, X, v=None, activation: Activation | None = None) -> float:
    """Smallest S+ singular value of the Jacobian over the stored weight snapshots."""
    if not trace.snapshots:
        raise ValueError("trace holds no weight snapshots")
    ref = trace.final_state
    v = ref.v if v is None else v
    activation = ref.activation if activation is None else activation
    return min(
        subspace_alpha(NetworkState(W, v, activation), X, trace.partition)
        for W in trace.snapshots.values()
    )


def _signal_norms(trace: TrainTrace) -> np.ndarray:
    return np.array([np.linalg.norm(support_projection(trace.partition, r)) for r in trace.residuals])


def verify_signal_decay(trace: TrainTrace, alpha_hat: float, eta: float | None = None,
                        tol: float = 1e-6, atol: float = 1e-20) -> BoundReport:
    """``|r+_t|^2 <= (1 - eta alpha^2 / 2)^t |r+_0|^2`` at every recorded iterate.

    ``atol`` (relative to ``|r+_0|^2``) absorbs the rounding floor once the
    signal residual has reached machine precision.
    """
    eta = trace.eta if eta is None else eta
    if not alpha_hat > 0:
        raise ValueError("alpha_hat must be positive")
    rate = eta * alpha_hat**2
    if rate >= 2:
        raise ValueError(f"eta * alpha_hat^2 = {rate:.3g} >= 2: contraction factor is not in (0, 1)")
    it = np.asarray(trace.iters, dtype=float)
    s2 = _signal_norms(trace) ** 2
    s2_0 = max(s2[0], 1e-300)
    bound = (1.0 - rate / 2.0) ** it * s2_0
    ratio = s2 / (bound + atol * s2_0)
    return BoundReport.compare(
        "signal_decay", ratio.max(), 1.0, tol,
        details={"iters": it.astype(int), "signal_sq": s2, "bound": bound, "alpha_hat": alpha_hat, "eta": eta},
        in_regime=rate <= 1.0,
    )


def verify_distance_budget(trace: TrainTrace, alpha_hat: float, tol: float = 1e-6) -> BoundReport:
    """``(alpha/4) |W_t - W_0|_F + |r+_t| <= |r+_0|`` at every iterate with stored weights."""
    snaps = sorted(trace.snapshots)
    if not snaps:
        raise ValueError("trace holds no weight snapshots")
    signal = _signal_norms(trace)
    s0 = max(signal[0], 1e-300)
    W0 = trace.W0
    dist = np.array([np.linalg.norm(trace.snapshots[t] - W0) for t in snaps])
    sig = np.array([signal[trace.index_of(t)] for t in snaps])
    ratio = (alpha_hat / 4.0 * dist + sig) / s0
    return BoundReport.compare(
        "distance_budget", ratio.max(), 1.0, tol,
        details={"iters": snaps, "dist_fro": dist, "signal": sig, "alpha_hat": alpha_hat,
                 "dist_cap": 4.0 * s0 / alpha_hat},
    )


def distance_drift_term(K: int, lambda_C: float, norm_C: float, tau: int, eps0: float) -> float:
    """Reported (not asserted) scale ``sqrt(K/lambda) + K^2/(lambda |C|^2) tau eps0`` for perturbed inputs."""
    return math.sqrt(K / lambda_C) + K**2 / (lambda_C * norm_C**2) * tau * eps0


# --- dataset-level bounds ----------------------------------------------------


def _exact(x: float) -> Fraction:
    # decimal reading of the float, so 0.3 means 3/10
    return Fraction(repr(float(x)))


def verify_label_projection(dataset: CorruptedDataset) -> BoundReport:
    """Largest cluster mean of ``y - y_clean`` against ``2 rho``, in exact rational arithmetic."""
    m = dataset.membership
    worst = Fraction(0)
    per_cluster = []
    for c in range(dataset.num_clusters):
        idx = np.flatnonzero(m == c)
        total = sum((_exact(a) - _exact(b) for a, b in zip(dataset.labels[idx], dataset.clean_labels[idx])), Fraction(0))
        mean = abs(total) / len(idx)
        per_cluster.append(float(mean))
        worst = max(worst, mean)
    rhs = 2 * _exact(dataset.rho)
    report = BoundReport.compare("label_projection", float(worst), float(rhs), 0.0,
                                 details={"cluster_means": per_cluster})
    report.holds = worst <= rhs
    return report


def verify_sparse_projection(partition: SupportPartition, r, tol: float = 1e-12) -> BoundReport:
    """``|P+ r|_inf <= gamma sqrt(s) / n |r|_2`` for an s-sparse ``r``."""
    r = np.asarray(r, dtype=float)
    s = int(np.count_nonzero(r))
    lhs = float(np.max(np.abs(support_projection(partition, r)))) if r.size else 0.0
    rhs = diffusedness(partition) * math.sqrt(s) / partition.n * float(np.linalg.norm(r))
    return BoundReport.compare("sparse_projection", lhs, rhs, tol * max(rhs, 1.0), details={"s": s})


# --- prediction-level bounds ----------------------------------------------------


def verify_classification(trace: TrainTrace, dataset: CorruptedDataset, delta: float | None = None) -> BoundReport:
    """Every sample assigned to its true class and ``|f - y_clean|_inf <= 4 rho`` at the stop iterate."""
    state = trace.final_state
    f = predict(state, dataset.inputs)
    alphabet = class_alphabet(dataset)
    wrong = int(np.sum(classify(f, alphabet) != classify(dataset.clean_labels, alphabet)))
    lhs = float(np.max(np.abs(f - dataset.clean_labels)))
    rhs = 4.0 * dataset.rho
    if delta is None and dataset.centers is not None:
        delta = dataset.centers.delta
    in_regime = delta is None or dataset.rho <= delta / 8.0
    report = BoundReport.compare(
        "classification", lhs, rhs, 0.0,
        details={"misclassified": wrong, "stop_iter": trace.iters[-1], "delta": delta},
        in_regime=bool(in_regime),
    )
    report.holds = report.holds and wrong == 0
    return report


# --- distance lower bounds ------------------------------------------------------


def _path_spectra(states, X, partition: SupportPartition) -> tuple[float, float]:
    """Largest ``|J|`` and largest S- norm of ``J`` over the given states."""
    beta = eps = 0.0
    for st in states:
        G = jacobian_gram(st, X)
        Q = G - support_projection(partition, G)
        Q = Q - support_projection(partition, Q.T).T
        beta = max(beta, math.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0)))
        eps = max(eps, math.sqrt(max(np.linalg.eigvalsh(0.5 * (Q + Q.T))[-1], 0.0)))
    return beta, eps


def verify_overfit_distance(trace: TrainTrace, X, partition: SupportPartition | None = None,
                            early_iteration: int | None = None, interp_tol: float = 1e-3,
                            tol: float = 1e-3, path_nodes: int = 16) -> BoundReport:
    """An interpolating endpoint is at least ``max(E+/beta, E-/eps)`` away from the start.

    ``E+`` and ``E-`` split the initial residual over S+ and S-; ``beta`` and
    ``eps`` are the largest full and S- Jacobian norms measured over the stored
    snapshots and along the straight segment from ``W_0`` to the endpoint.
    """
    part = trace.partition if partition is None else partition
    r0, rT = trace.residuals[0], trace.residuals[-1]
    if np.linalg.norm(rT) > interp_tol * np.linalg.norm(r0):
        return BoundReport.not_applicable(
            "overfit_distance", "interpolation threshold not reached",
            final_relative_residual=float(np.linalg.norm(rT) / np.linalg.norm(r0)),
        )
    end = trace.final_state
    W0 = trace.W0
    states = [end.with_weights(W) for W in trace.snapshots.values()]
    states += [end.with_weights(W0 + t * (end.W - W0)) for t in np.linspace(0.0, 1.0, path_nodes)]
    beta, eps = _path_spectra(states, X, part)

    signal, noise = support_projection(part, r0), noise_projection(part, r0)
    E_plus, E_minus = float(np.linalg.norm(signal)), float(np.linalg.norm(noise))
    floor = 1e-12 * float(np.linalg.norm(r0))
    terms = [E_plus / beta if beta > 0 else math.inf]
    if E_minus > floor:
        terms.append(E_minus / eps if eps > 0 else math.inf)
    bound = max(terms)
    dist = float(np.linalg.norm(end.W - W0))
    details = {"E_plus": E_plus, "E_minus": E_minus, "beta_hat": beta, "eps_hat": eps, "distance": dist}
    if early_iteration is not None:
        early = float(np.linalg.norm(trace.weights_at(early_iteration) - W0))
        details.update(early_iteration=early_iteration, early_distance=early,
                       distance_factor=dist / early if early > 0 else math.inf)
    # lhs <= rhs form: bound * (1 - tol) <= distance
    return BoundReport.compare("overfit_distance", bound * (1.0 - tol), dist, 0.0, details=details)


def lemma_points(s: int, d: int, eps0: float, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A random unit center and two groups of s points ``c + N(0, eps0^2/d I)``."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(d)
    c /= np.linalg.norm(c)
    X = c + rng.normal(scale=eps0 / math.sqrt(d), size=(s, d))
    Xt = c + rng.normal(scale=eps0 / math.sqrt(d), size=(s, d))
    return c, X, Xt


def verify_min_norm_lower_bound(eps0: float, delta: float, s: int, d: int, seed: int, k: int = 100,
                                activation: Activation = TANH, interp_tol: float = 1e-6,
                                max_steps: int = 200, init_scale: float = 1.0) -> BoundReport:
    """Any weights fitting two groups of nearby points with labels ``delta`` apart have ``|W|_F >= sqrt(s) delta / (5 Gamma eps0)``."""
    if s > d:
        raise ValueError("need s <= d")
    if eps0 <= 0:
        raise ValueError("eps0 must be positive")
    _, X, Xt = lemma_points(s, d, eps0, seed)
    spread = float(np.linalg.norm(X - Xt, 2))
    premise = spread <= 5.0 * eps0
    bound = math.sqrt(s) * delta / (5.0 * activation.gamma * eps0)
    if delta == 0:
        return BoundReport.compare("min_norm_lower_bound", 0.0, 0.0, 0.0,
                                   details={"premise_spread": spread, "premise_holds": premise})

    y = np.r_[np.full(s, delta / 2.0), np.full(s, -delta / 2.0)]
    data = make_training_set(np.vstack([X, Xt]), y)
    start = NetworkState.initial(k, d, seed + 1, activation)
    start = start.with_weights(init_scale * start.W)
    trace, ok = interpolate(data, start, rel_tol=interp_tol, max_steps=max_steps)
    details = {"premise_spread": spread, "premise_rhs": 5.0 * eps0, "premise_holds": premise,
               "final_relative_residual": trace.r2[-1] / trace.r2[0], "k": k}
    if not ok:
        return BoundReport.not_applicable("min_norm_lower_bound", "interpolation not reached", **details)
    norm_W = float(np.linalg.norm(trace.final_state.W))
    details["norm_W"] = norm_W
    report = BoundReport.compare("min_norm_lower_bound", bound, norm_W, 0.0, details=details,
                                 in_regime=premise)
    return report


def two_point_inputs(d: int, eps0: float, seed: int) -> np.ndarray:
    """Two unit vectors at Euclidean distance ``eps0`` (at most 2)."""
    if not 0 < eps0 <= 2:
        raise ValueError("eps0 must lie in (0, 2]")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(d)
    a /= np.linalg.norm(a)
    u = rng.standard_normal(d)
    u -= (u @ a) * a
    u /= np.linalg.norm(u)
    theta = 2.0 * math.asin(eps0 / 2.0)
    return np.vstack([a, math.cos(theta) * a + math.sin(theta) * u])


def two_point_distance(eps0: float, delta: float, k: int, d: int, seed: int,
                       activation: Activation = TANH, interp_tol: float = 1e-6) -> float:
    """Spectral distance from initialization to weights fitting labels ``+-delta/2`` on two points."""
    X = two_point_inputs(d, eps0, seed)
    data = make_training_set(X, np.array([delta / 2.0, -delta / 2.0]))
    start = NetworkState.initial(k, d, seed + 1, activation)
    trace, ok = interpolate(data, start, rel_tol=interp_tol, max_steps=200)
    if not ok:
        raise NotApplicable(f"two-point fit did not converge (eps0={eps0}, seed={seed})")
    return float(np.linalg.norm(trace.final_state.W - start.W, 2))


def verify_two_point_stretch(eps0_list, delta: float = 1.0, k: int = 100, d: int = 10, seeds=range(5),
                             band: float = 10.0, halving_ratio=(1.3, 3.0),
                             activation: Activation = TANH) -> BoundReport:
    """Required movement scales like ``1/eps0``: non-increasing in eps0 and ``distance*eps0`` within ``band``.

    When consecutive list entries are exact halvings the per-halving growth is
    additionally required to lie in ``halving_ratio``.
    """
    eps = [float(e) for e in eps0_list]
    seeds = list(seeds)
    try:
        dist = np.array([[two_point_distance(e, delta, k, d, s, activation) for s in seeds] for e in eps])
    except NotApplicable as exc:
        return BoundReport.not_applicable("two_point_stretch", str(exc))
    mean = dist.mean(axis=1)
    order = np.argsort(eps)
    mean_sorted = mean[order]
    monotone = bool(np.all(np.diff(mean_sorted) <= 0))
    scaled = mean * np.array(eps)
    spread = float(scaled.max() / scaled.min())
    ratios = []
    for a, b in zip(order[:-1], order[1:]):
        if math.isclose(eps[b], 2 * eps[a]):
            ratios.append(float(mean[a] / mean[b]))
    ratios_ok = all(halving_ratio[0] <= q <= halving_ratio[1] for q in ratios)
    report = BoundReport.compare(
        "two_point_stretch", spread, band, 0.0,
        details={"eps0": eps, "mean_distance": mean, "distance_times_eps0": scaled,
                 "halving_ratios": ratios, "monotone": monotone, "per_seed": dist, "k": k, "d": d},
        in_regime=k >= d,
    )
    report.holds = report.holds and monotone and ratios_ok
    return report


# --- Jacobian structure -----------------------------------------------------------


def verify_jacobian_theorems(states, X, partition: SupportPartition, centers, lambda_C: float,
                             c_up: float = 2.0, c_low: float = 0.5, n_pairs: int = 50,
                             n_directions: int = 100, seed: int = 0, tol: float = 1e-10) -> BoundReport:
    """Spectral-norm, smoothness, S+ conditioning at ``states[0]`` and range-in-S+ checks.

    Pairs for the smoothness check are drawn around the given states with
    Frobenius separations log-uniform in ``[1e-3, 10]``.
    """
    states = list(states)
    X = np.asarray(X, dtype=float)
    C = np.asarray(getattr(centers, "centers", centers), dtype=float)
    n, K = partition.n, partition.K
    norm_C = float(np.linalg.norm(C, 2))
    rng = np.random.default_rng(seed)
    act = states[0].activation
    g = act.gamma

    top_cap = math.sqrt(c_up * n / K) * g * norm_C
    tops = np.array([math.sqrt(max(np.linalg.eigvalsh(jacobian_gram(st, X))[-1], 0.0)) for st in states])

    smooth_ratio = []
    XX = X @ X.T
    for _ in range(n_pairs):
        st = states[rng.integers(len(states))]
        step = rng.standard_normal(st.W.shape)
        sep = 10.0 ** rng.uniform(-3, 1)
        step *= sep / np.linalg.norm(step)
        D1 = act.dphi(X @ st.W.T) * st.v
        D2 = act.dphi(X @ (st.W + step).T) * st.v
        dD = D2 - D1
        diff = math.sqrt(max(np.linalg.eigvalsh(XX * (dD @ dD.T))[-1], 0.0))
        cap = g * math.sqrt(c_up * n / (st.k * K)) * norm_C * sep
        smooth_ratio.append(diff / cap)
    smooth_ratio = np.array(smooth_ratio)

    alpha0 = subspace_alpha(states[0], X, partition)
    alpha_floor = math.sqrt(c_low * n * lambda_C / (2.0 * K))

    leak = []
    for st in states[: max(1, min(len(states), 5))]:
        J = jacobian(st, X)
        U = rng.standard_normal((J.shape[1], n_directions // min(len(states), 5) + 1))
        JU = J @ U
        leak.extend(np.linalg.norm(noise_projection(partition, JU), axis=0) / np.linalg.norm(JU, axis=0))
    leak = np.array(leak)

    checks = {
        "top_singular": float(tops.max() / top_cap),
        "smoothness": float(smooth_ratio.max()),
        "support_conditioning": float(alpha_floor / alpha0) if alpha0 > 0 else math.inf,
    }
    worst = max(checks.values())
    report = BoundReport.compare(
        "jacobian_theorems", worst, 1.0, tol,
        details={"ratios": checks, "top_singular_values": tops, "top_cap": top_cap,
                 "alpha_at_first_state": alpha0, "alpha_floor": alpha_floor,
                 "max_range_leak": float(leak.max()), "n_states": len(states)},
    )
    report.holds = report.holds and bool(leak.max() <= 1e-10)
    return report


# --- residual linearization --------------------------------------------------------


def verify_linearization(state: NetworkState, X, y, eta: float, nodes: int = 32, tol: float = 1e-8) -> BoundReport:
    """One GD step obeys ``r_1 = (I - eta Jbar(W_1, W_0) J(W_0)^T) r_0`` up to quadrature error."""
    X = np.asarray(X, dtype=float)
    r0 = predict(state, X) - y
    nxt = state.with_weights(state.W - eta * gradient(state, X, y))
    r1 = predict(nxt, X) - y
    Jbar = average_jacobian(nxt, state, X, nodes)
    predicted = r0 - eta * Jbar @ (jacobian(state, X).T @ r0)
    err = float(np.linalg.norm(r1 - predicted) / max(np.linalg.norm(r0), 1e-300))
    return BoundReport.compare("linearization", err, tol, 0.0, details={"nodes": nodes, "eta": eta})


def tamper_noise(trace: TrainTrace, iteration: int, size: float = 1.0, seed: int = 0) -> TrainTrace:
    """Copy of ``trace`` whose residual at ``iteration`` gains an S- component of norm ``size``.

    Used as a negative control for :func:`verify_noise_freeze`.
    """
    out = copy_trace(trace)
    i = out.index_of(iteration)
    w = noise_projection(out.partition, np.random.default_rng(seed).standard_normal(out.partition.n))
    out.residuals[i] = out.residuals[i] + size * w / np.linalg.norm(w)
    return out


def suite_failed(reports) -> bool:
    return any(r.failed_in_regime for r in reports)


def subspace_extreme_norms(state: NetworkState, X, partition: SupportPartition) -> tuple[float, float]:
    return subspace_extremes(jacobian_gram(state, X), partition)
