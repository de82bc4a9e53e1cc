"""Experiment configs, presets and the runs shared by the CLI, scripts and acceptance suite."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset import CORRUPTION_MODES, CorruptedDataset, corrupt_labels, generate_centers, generate_clusterable
from .network import NetworkState, get_activation, jacobian, jacobian_gram
from .spectral import (
    SupportPartition,
    bimodality_report,
    cluster_covariance,
    histogram,
    write_histogram_csv,
)
from .trainer import (
    TheoryConstants,
    TrainConfig,
    TrainTrace,
    interpolate,
    theoretical_width,
    train,
)
from . import verify as V


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    K: int = 5
    K_bar: int = 5
    d: int = 30
    n: int = 200
    eps0: float = 0.0
    delta: float = 0.5
    rho: float = 0.1
    mode: str = "reassign-other"
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1 or self.K_bar < 1:
            raise ConfigError("data.K and data.K_bar must be >= 1")
        if self.K_bar > self.K:
            raise ConfigError(f"data.K_bar={self.K_bar} exceeds data.K={self.K}")
        if self.d < 2:
            raise ConfigError("data.d must be >= 2")
        if self.n < self.K:
            raise ConfigError(f"data.n={self.n} must be at least data.K={self.K}")
        if not self.eps0 >= 0:
            raise ConfigError("data.eps0 must be >= 0")
        if not self.delta > 0:
            raise ConfigError("data.delta must be > 0")
        if self.K_bar > 2.0 / self.delta + 1 + 1e-12:
            raise ConfigError(f"{self.K_bar} classes cannot be {self.delta}-separated in [-1, 1]; lower data.delta")
        if not 0 <= self.rho <= 1:
            raise ConfigError("data.rho must lie in [0, 1]")
        if self.mode not in CORRUPTION_MODES:
            raise ConfigError(f"data.mode must be one of {CORRUPTION_MODES}")


@dataclass(frozen=True)
class NetworkConfig:
    k: int | str = "theoretical"
    activation: str = "tanh"
    init_seed: int = 0
    allow_nonsmooth: bool = False

    def validate(self) -> None:
        if isinstance(self.k, str):
            if self.k != "theoretical":
                raise ConfigError("network.k must be a positive integer or 'theoretical'")
        elif self.k < 1:
            raise ConfigError("network.k must be >= 1")
        try:
            get_activation(self.activation, allow_nonsmooth=True)
        except ValueError as exc:
            raise ConfigError(f"network.activation: {exc}") from None
        if self.activation == "relu" and not self.allow_nonsmooth:
            raise ConfigError("network.activation=relu needs network.allow_nonsmooth=true")


VERIFIERS = (
    "noise_freeze", "signal_decay", "distance_budget", "label_projection", "classification",
    "jacobian_theorems", "linearization", "overfit_distance", "min_norm_lower_bound", "two_point_stretch",
)


@dataclass(frozen=True)
class VerifyConfig:
    names: tuple = ()
    exact_tol: float = 1e-6
    measured_tol: float = 1e-3
    jacobian_states: int = 50
    lb_eps0: float = 0.1
    lb_delta: float = 1.0
    lb_s: int = 5
    lb_d: int = 30
    lb_seeds: tuple = (0, 1, 2, 3, 4)
    stretch_eps0: tuple = (0.4, 0.2, 0.1, 0.05)
    stretch_k: int = 100
    stretch_d: int = 10
    negative_control: bool = False  # corrupt the recorded noise residual to test the suite itself

    def validate(self) -> None:
        unknown = set(self.names) - set(VERIFIERS)
        if unknown:
            raise ConfigError(f"unknown verifiers {sorted(unknown)}; choose from {VERIFIERS}")
        if self.lb_s > self.lb_d:
            raise ConfigError("verify.lb_s must not exceed verify.lb_d")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    hist_iters: tuple = ()
    bins: int = 50
    output_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.network.validate()
        self.verify.validate()
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        if any(i < 0 for i in self.hist_iters):
            raise ConfigError("hist_iters must be non-negative")
        if self.train.eta == "theoretical" or self.train.max_iters is None:
            if self.train.max_iters is None and self.data.rho == 0 and self.train.stop_rule == "fixed-T":
                raise ConfigError("rho = 0 has no theoretical stop time; set train.max_iters or use signal-threshold")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["verify"]["names"] = list(self.verify.names)
        out["verify"]["lb_seeds"] = list(self.verify.lb_seeds)
        out["verify"]["stretch_eps0"] = list(self.verify.stretch_eps0)
        out["hist_iters"] = list(self.hist_iters)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        try:
            data = _build(DataConfig, raw.pop("data", {}), "data")
            network = _build(NetworkConfig, raw.pop("network", {}), "network")
            tr = dict(raw.pop("train", {}))
            constants = _build(TheoryConstants, tr.pop("constants", {}), "train.constants")
            train_cfg = _build(TrainConfig, dict(tr, constants=constants), "train")
            ver = dict(raw.pop("verify", {}))
            for key in ("names", "lb_seeds", "stretch_eps0"):
                if key in ver:
                    ver[key] = tuple(ver[key])
            verify_cfg = _build(VerifyConfig, ver, "verify")
            if "hist_iters" in raw:
                raw["hist_iters"] = tuple(int(i) for i in raw["hist_iters"])
            top = _build(cls, dict(raw, data=data, network=network, train=train_cfg, verify=verify_cfg), "")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return top.validate()


def _build(kind, values: dict, where: str):
    names = {f.name for f in fields(kind)}
    unknown = set(values) - names
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config keys {sorted(prefix + u for u in unknown)}")
    return kind(**values)


def set_path(raw: dict, dotted: str, value) -> dict:
    """Return a copy of the nested dict ``raw`` with ``a.b.c = value``."""
    out = json.loads(json.dumps(raw))
    node = out
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {key} is not a section")
    node[keys[-1]] = value
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# --- presets -----------------------------------------------------------------

FIG4_ETA = 0.02

PRESETS = {
    "fig4": ExperimentConfig(
        data=DataConfig(K=2, K_bar=2, d=20, n=400, eps0=0.5, delta=1.0, rho=0.3, mode="shuffle-uniform"),
        network=NetworkConfig(k=1000),
        train=TrainConfig(eta=FIG4_ETA, max_iters=4500, record_every=1, snapshot_every=500),
        verify=VerifyConfig(names=("label_projection", "overfit_distance")),
        hist_iters=(80, 4500),
    ),
    "clustered-theorem": ExperimentConfig(
        data=DataConfig(K=5, K_bar=5, d=30, n=200, eps0=0.0, delta=0.5, rho=0.5 / 16),
        network=NetworkConfig(k="theoretical"),
        train=TrainConfig(eta="theoretical", max_iters=None, record_every=10, snapshot_every=10),
        verify=VerifyConfig(names=("noise_freeze", "signal_decay", "distance_budget", "label_projection",
                                   "classification", "jacobian_theorems", "linearization")),
    ),
    "lower-bounds": ExperimentConfig(
        data=DataConfig(K=2, K_bar=2, d=20, n=400, eps0=0.5, delta=1.0, rho=0.3, mode="shuffle-uniform"),
        network=NetworkConfig(k=1000),
        train=TrainConfig(eta=FIG4_ETA, max_iters=0),
        verify=VerifyConfig(names=("min_norm_lower_bound", "two_point_stretch")),
    ),
}


# --- building blocks ------------------------------------------------------------


def build_dataset(cfg: DataConfig) -> CorruptedDataset:
    """Centers, samples and corruption use seeds ``seed``, ``seed+1``, ``seed+2``."""
    centers = generate_centers(cfg.K, cfg.K_bar, cfg.d, cfg.delta, cfg.eps0, seed=cfg.seed)
    clean = generate_clusterable(centers, cfg.n, seed=cfg.seed + 1)
    return corrupt_labels(clean, cfg.rho, mode=cfg.mode, seed=cfg.seed + 2)


def covariance_for(cfg: ExperimentConfig, dataset: CorruptedDataset, activation):
    return cluster_covariance(dataset.centers, activation, cfg.train.mc_samples, cfg.train.mc_seed)


def build_network(cfg: ExperimentConfig, dataset: CorruptedDataset, lambda_C: float | None = None) -> NetworkState:
    act = get_activation(cfg.network.activation, cfg.network.allow_nonsmooth)
    k = cfg.network.k
    if k == "theoretical":
        if lambda_C is None:
            lambda_C = covariance_for(cfg, dataset, act).lambda_min
        k = theoretical_width(dataset.centers, act, lambda_C, cfg.train.constants.C_width)
    return NetworkState.initial(int(k), dataset.d, cfg.network.init_seed, act)


@dataclass
class Run:
    config: ExperimentConfig
    dataset: CorruptedDataset
    state0: NetworkState
    trace: TrainTrace
    lambda_C: float | None = None
    lambda_se: float | None = None


def run_training(cfg: ExperimentConfig, train_cfg: TrainConfig | None = None) -> Run:
    cfg.validate()
    dataset = build_dataset(cfg.data)
    tc = cfg.train if train_cfg is None else train_cfg
    act = get_activation(cfg.network.activation, cfg.network.allow_nonsmooth)
    lam = se = None
    needs_lambda = cfg.network.k == "theoretical" or tc.max_iters is None
    if needs_lambda and tc.lambda_C is None:
        cov = covariance_for(cfg, dataset, act)
        lam, se = cov.lambda_min, cov.lambda_se
        tc = replace(tc, lambda_C=lam)
    state0 = build_network(cfg, dataset, lam if lam is not None else tc.lambda_C)
    trace = train(dataset, state0, tc)
    return Run(cfg, dataset, state0, trace, lam if lam is not None else tc.lambda_C, se)


def for_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with every seed derived from ``seed``."""
    return replace(cfg, data=replace(cfg.data, seed=seed), network=replace(cfg.network, init_seed=seed),
                   train=replace(cfg.train, mc_seed=seed))


# --- per-sample losses ----------------------------------------------------------


def per_sample_loss(residual) -> np.ndarray:
    r = np.asarray(residual, dtype=float)
    return 0.5 * r * r


def overlap_coefficient(a, b, bins: int = 50) -> float:
    """Shared area of the two normalized histograms over common bins; nan if either is empty."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        return float("nan")
    both = np.concatenate([a, b])
    edges, ca = histogram(a, bins, (both.min(), both.max() if both.max() > both.min() else both.min() + 1.0))
    _, cb = histogram(b, bins, (edges[0], edges[-1]))
    return float(np.minimum(ca / a.size, cb / b.size).sum())


def loss_histograms(run: Run, iteration: int, bins: int = 50):
    """(edges, clean counts, corrupted counts, overlap) of per-sample losses at a recorded iteration."""
    r = run.trace.residuals[run.trace.index_of(iteration)]
    losses = per_sample_loss(r)
    mask = run.dataset.corrupted_mask
    lo, hi = float(losses.min()), float(losses.max())
    edges, clean = histogram(losses[~mask], bins, (lo, hi if hi > lo else lo + 1.0))
    _, bad = histogram(losses[mask], bins, (edges[0], edges[-1]))
    return edges, clean, bad, overlap_coefficient(losses[~mask], losses[mask], bins)


# --- the clustered-data experiment with eps0 > 0 (overfitting after early success) --


@dataclass
class Fig4Result:
    seed: int
    early_iter: int
    early_error: float
    late_error: float
    overlap_early: float
    overlap_late: float
    late_iter: int
    run: Run | None = None

    @property
    def min_error_ok(self) -> bool:
        return self.early_error <= 0.05

    @property
    def overfits(self) -> bool:
        return self.late_error - self.early_error >= 0.05

    @property
    def overlap_grows(self) -> bool:
        return self.overlap_early < self.overlap_late

    @property
    def passed(self) -> bool:
        return self.min_error_ok and self.overfits and self.overlap_grows

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("seed", "early_iter", "early_error", "late_error", "late_iter",
                                              "overlap_early", "overlap_late", "min_error_ok", "overfits",
                                              "overlap_grows", "passed")}


def run_fig4(seed: int, cfg: ExperimentConfig | None = None, early_window: int = 200,
             keep_run: bool = False) -> Fig4Result:
    cfg = for_seed(PRESETS["fig4"] if cfg is None else cfg, seed)
    run = run_training(cfg)
    tr = run.trace
    n = run.dataset.n
    err = np.asarray(tr.err_clean) / n
    iters = np.asarray(tr.iters)
    window = iters <= early_window
    i_early = int(np.argmin(np.where(window, err, np.inf)))
    late_iter = iters[-1]
    _, _, _, ov_early = loss_histograms(run, int(iters[i_early]), cfg.bins)
    _, _, _, ov_late = loss_histograms(run, int(late_iter), cfg.bins)
    return Fig4Result(seed, int(iters[i_early]), float(err[i_early]), float(err[-1]),
                      ov_early, ov_late, int(late_iter), run if keep_run else None)


def early_weights(run: Run, iteration: int) -> np.ndarray:
    """Weights at ``iteration``, replaying the deterministic GD run if no snapshot was kept."""
    if iteration in run.trace.snapshots:
        return run.trace.snapshots[iteration]
    tc = replace(run.config.train, max_iters=iteration, stop_rule="fixed-T", snapshot_every=0,
                 eta=run.trace.eta)
    return train(run.dataset, run.state0, tc).final_state.W


def overfit_distance_report(run: Run, early_iteration: int, interp_tol: float = 1e-3,
                            max_steps: int = 100) -> V.BoundReport:
    """Continue a GD run to interpolation and compare the endpoint distance with the early-stop distance."""
    full, _ = interpolate(run.dataset, run.trace.final_state, rel_tol=interp_tol, max_steps=max_steps,
                          trace=run.trace)
    full.snapshots[early_iteration] = early_weights(run, early_iteration)
    return V.verify_overfit_distance(full, run.dataset.inputs, early_iteration=early_iteration,
                                     interp_tol=interp_tol, tol=1e-3)


# --- spectrum ---------------------------------------------------------------------


def spectrum(run: Run, at: str = "both", bins: int = 50):
    """Singular values of the Jacobian at init and/or the final iterate with shared histogram bins."""
    states = {"init": run.state0, "final": run.trace.final_state}
    chosen = ["init", "final"] if at == "both" else [at]
    part = SupportPartition.from_membership(run.dataset.membership, run.dataset.num_clusters)
    reports, values = {}, {}
    for name in chosen:
        try:
            # the explicit SVD resolves singular values far below sqrt(eps) * beta
            J = jacobian(states[name], run.dataset.inputs)
            rep = bimodality_report(J, part, lambda_C=run.lambda_C, lambda_se=run.lambda_se)
        except MemoryError:
            G = jacobian_gram(states[name], run.dataset.inputs)
            rep = bimodality_report(gram=G, partition=part, lambda_C=run.lambda_C, lambda_se=run.lambda_se)
        reports[name] = rep
        values[name] = np.asarray(rep.singular_values)
    allv = np.concatenate(list(values.values()))
    lo, hi = float(allv.min()), float(allv.max())
    edges = None
    counts = {}
    for name in chosen:
        edges, counts[name] = histogram(values[name], bins, (lo, hi if hi > lo else lo + 1.0))
    return edges, counts, reports


def spectral_gap(singular_values, K: int) -> float:
    s = np.asarray(singular_values)
    if s.size <= K:
        return math.inf
    return float(s[K - 1] / s[K]) if s[K] > 0 else math.inf


# --- verification suite --------------------------------------------------------------


def _lower_bound_report(vc: VerifyConfig) -> V.BoundReport:
    """One report over all seeds: the certified bound against the smallest interpolating norm."""
    per_seed = [V.verify_min_norm_lower_bound(vc.lb_eps0, vc.lb_delta, vc.lb_s, vc.lb_d, s) for s in vc.lb_seeds]
    details = {"seeds": list(vc.lb_seeds), "per_seed": [r.to_dict() for r in per_seed]}
    if not all(r.applicable for r in per_seed):
        return V.BoundReport.not_applicable("min_norm_lower_bound", "interpolation not reached", **details)
    rep = V.BoundReport.compare("min_norm_lower_bound", max(r.lhs for r in per_seed),
                                min(r.rhs for r in per_seed), 0.0, details=details,
                                in_regime=all(r.in_regime for r in per_seed))
    rep.holds = all(r.holds for r in per_seed)
    return rep


def jacobian_states(state0: NetworkState, count: int, seed: int) -> list:
    """``state0`` followed by random perturbations of it at Frobenius radii spread over [1e-2, sqrt(k)]."""
    rng = np.random.default_rng(seed)
    states = [state0]
    for radius in np.geomspace(1e-2, math.sqrt(state0.k), max(count - 1, 0)):
        step = rng.standard_normal(state0.W.shape)
        states.append(state0.with_weights(state0.W + radius * step / np.linalg.norm(step)))
    return states


def run_suite(cfg: ExperimentConfig, run: Run | None = None) -> list:
    """Run the selected verifiers; trains first when a verifier needs a trajectory."""
    vc = cfg.verify
    names = list(vc.names)
    needs_run = set(names) & {"noise_freeze", "signal_decay", "distance_budget", "classification",
                              "jacobian_theorems", "linearization", "overfit_distance", "label_projection"}
    if run is None and needs_run:
        run = run_training(cfg)
    reports = []
    alpha = None
    for name in names:
        if name == "noise_freeze":
            tr = run.trace
            if vc.negative_control:
                tr = V.tamper_noise(tr, tr.iters[len(tr.iters) // 2], size=1.0, seed=cfg.data.seed)
            reports.append(V.verify_noise_freeze(tr, vc.exact_tol))
        elif name in ("signal_decay", "distance_budget"):
            if alpha is None:
                alpha = V.trajectory_alpha(run.trace, run.dataset.inputs)
            if name == "signal_decay":
                reports.append(V.verify_signal_decay(run.trace, alpha, tol=vc.exact_tol))
            else:
                reports.append(V.verify_distance_budget(run.trace, alpha, vc.exact_tol))
        elif name == "label_projection":
            reports.append(V.verify_label_projection(run.dataset))
        elif name == "classification":
            reports.append(V.verify_classification(run.trace, run.dataset))
        elif name == "jacobian_theorems":
            lam = run.lambda_C
            if lam is None:
                lam = covariance_for(cfg, run.dataset, run.state0.activation).lambda_min
            part = SupportPartition.from_membership(run.dataset.membership, run.dataset.num_clusters)
            states = jacobian_states(run.state0, vc.jacobian_states, cfg.data.seed)
            reports.append(V.verify_jacobian_theorems(states, run.dataset.inputs, part, run.dataset.centers,
                                                      lam, c_up=run.dataset.c_up, c_low=run.dataset.c_low,
                                                      seed=cfg.data.seed))
        elif name == "linearization":
            reports.append(V.verify_linearization(run.state0, run.dataset.inputs, run.dataset.labels,
                                                  run.trace.eta))
        elif name == "overfit_distance":
            err = np.asarray(run.trace.err_clean)
            iters = np.asarray(run.trace.iters)
            window = iters <= 200
            early = int(iters[int(np.argmin(np.where(window, err, np.iinfo(np.int64).max)))])
            reports.append(overfit_distance_report(run, early))
        elif name == "min_norm_lower_bound":
            reports.append(_lower_bound_report(vc))
        elif name == "two_point_stretch":
            reports.append(V.verify_two_point_stretch(vc.stretch_eps0, vc.lb_delta, vc.stretch_k, vc.stretch_d,
                                                      seeds=vc.lb_seeds))
    return reports


def write_suite(reports, outdir) -> Path:
    out = Path(outdir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for rep in reports:
        (out / "reports" / f"{rep.name}.json").write_text(rep.to_json() + "\n")
    summary = out / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "holds", "lhs", "rhs", "margin"])
        for rep in reports:
            w.writerow([rep.name, rep.holds if rep.applicable else "n/a", repr(rep.lhs), repr(rep.rhs),
                        repr(rep.margin)])
    return summary


def write_loss_histograms(run: Run, iterations, outdir, bins: int = 50) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    overlaps = {}
    for it in iterations:
        edges, clean, bad, ov = loss_histograms(run, it, bins)
        write_histogram_csv(out / f"loss_hist_{it}.csv", edges, clean=clean, corrupted=bad)
        overlaps[str(it)] = ov
    (out / "overlap.json").write_text(json.dumps(V.jsonable(overlaps), indent=2, sort_keys=True) + "\n")
    return overlaps
