"""Cluster covariance, the cluster-constant subspace and Jacobian spectrum diagnostics.

``S+`` is the K-dimensional space of vectors that are constant on every
cluster and ``S-`` its orthogonal complement. Projection onto ``S+`` replaces
each entry by its cluster mean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .network import Activation, NetworkState, jacobian_gram


@dataclass(frozen=True)
class SupportPartition:
    membership: np.ndarray
    cluster_sizes: np.ndarray

    def __post_init__(self):
        m = np.array(self.membership, dtype=int, copy=True)
        sizes = np.array(self.cluster_sizes, dtype=int, copy=True)
        if m.ndim != 1 or m.min() < 0 or m.max() >= sizes.size:
            raise ValueError("membership must index into cluster_sizes")
        if not np.array_equal(np.bincount(m, minlength=sizes.size), sizes):
            raise ValueError("cluster_sizes disagree with membership")
        if np.any(sizes == 0):
            raise ValueError("every cluster must be nonempty")
        m.setflags(write=False)
        sizes.setflags(write=False)
        object.__setattr__(self, "membership", m)
        object.__setattr__(self, "cluster_sizes", sizes)

    @classmethod
    def from_membership(cls, membership, K: int | None = None) -> "SupportPartition":
        m = np.asarray(membership, dtype=int)
        K = int(m.max()) + 1 if K is None else K
        return cls(m, np.bincount(m, minlength=K))

    @property
    def n(self) -> int:
        return self.membership.size

    @property
    def K(self) -> int:
        return self.cluster_sizes.size

    def basis(self) -> np.ndarray:
        """Orthonormal basis of S+ (normalized cluster indicators), shape (n, K)."""
        B = np.zeros((self.n, self.K))
        B[np.arange(self.n), self.membership] = 1.0
        return B / np.sqrt(self.cluster_sizes)


def support_projection(partition: SupportPartition, r) -> np.ndarray:
    """Project onto S+ along the first axis (vectors or row-stacked matrices)."""
    r = np.asarray(r, dtype=float)
    if r.shape[0] != partition.n:
        raise ValueError(f"expected {partition.n} rows, got {r.shape[0]}")
    sums = np.zeros((partition.K,) + r.shape[1:])
    np.add.at(sums, partition.membership, r)
    means = sums / partition.cluster_sizes.reshape((-1,) + (1,) * (r.ndim - 1))
    return means[partition.membership]


def noise_projection(partition: SupportPartition, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return r - support_projection(partition, r)


def decompose_residual(partition: SupportPartition, r) -> tuple[np.ndarray, np.ndarray]:
    """Split ``r`` into its S+ part (signal) and S- part (noise)."""
    signal = support_projection(partition, r)
    return signal, np.asarray(r, dtype=float) - signal


def diffusedness(partition: SupportPartition) -> float:
    """Smallest gamma with ``|v|_inf <= sqrt(gamma/n) |v|_2`` on S+; equals n / min cluster size."""
    return partition.n / float(partition.cluster_sizes.min())


# --- cluster covariance ------------------------------------------------------


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    lambda_min: float
    lambda_se: float
    mc_samples: int


def _jackknife_lambda(gram: np.ndarray, block_sums: np.ndarray, block_counts: np.ndarray):
    total = block_sums.sum(axis=0)
    m = block_counts.sum()
    B = len(block_counts)
    if B < 2:
        return float("nan")
    loo = np.empty(B)
    for b in range(B):
        mean = (total - block_sums[b]) / (m - block_counts[b])
        loo[b] = np.linalg.eigvalsh(gram * mean)[0]
    return float(np.sqrt((B - 1) / B * np.sum((loo - loo.mean()) ** 2)))


def cluster_covariance(
    centers,
    activation: Activation,
    mc_samples: int = 20_000,
    seed: int = 0,
    n_blocks: int = 20,
    chunk_size: int = 4096,
) -> CovarianceEstimate:
    """Monte-Carlo estimate of ``(C C^T) * E[phi'(Cg) phi'(Cg)^T]`` and its minimum eigenvalue.

    Draws are generated in fixed-size chunks, each from its own spawned
    substream, so the result depends only on ``(seed, mc_samples, chunk_size)``.
    The standard error of the minimum eigenvalue is a delete-one-block jackknife.
    """
    C = np.asarray(getattr(centers, "centers", centers), dtype=float)
    if mc_samples < 1:
        raise ValueError("mc_samples must be positive")
    K, d = C.shape
    n_blocks = max(1, min(n_blocks, mc_samples))
    edges = np.linspace(0, mc_samples, n_blocks + 1).astype(int)
    block_sums = np.zeros((n_blocks, K, K))
    block_counts = np.diff(edges)

    n_chunks = -(-mc_samples // chunk_size)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    for c, ss in enumerate(streams):
        lo, hi = c * chunk_size, min((c + 1) * chunk_size, mc_samples)
        g = np.random.default_rng(ss).standard_normal((hi - lo, d))
        D = activation.dphi(g @ C.T)
        # split the chunk across the jackknife blocks it overlaps
        for b in range(n_blocks):
            a, z = max(lo, edges[b]), min(hi, edges[b + 1])
            if a < z:
                part = D[a - lo : z - lo]
                block_sums[b] += part.T @ part

    gram = C @ C.T
    sigma = gram * (block_sums.sum(axis=0) / mc_samples)
    sigma = 0.5 * (sigma + sigma.T)
    lam = float(np.linalg.eigvalsh(sigma)[0])
    se = _jackknife_lambda(gram, block_sums, block_counts)
    return CovarianceEstimate(sigma, lam, se, mc_samples)


# --- spectrum diagnostics ----------------------------------------------------


@dataclass(frozen=True)
class SpectralReport:
    alpha: float  # min ||J^T v|| over unit v in S+
    beta: float  # ||J||
    eps_minus: float  # max ||J^T w|| over unit w in S-
    gamma: float
    singular_values: tuple
    lambda_C: float | None = None
    lambda_se: float | None = None

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=float)
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be non-negative and descending")
        if self.alpha > self.beta * (1 + 1e-12) + 1e-300:
            raise ValueError("alpha exceeds beta")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["singular_values"] = [float(s) for s in self.singular_values]
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _top_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1]) if M.size else 0.0


def subspace_extremes(gram: np.ndarray, partition: SupportPartition) -> tuple[float, float]:
    """(min, max) of ``||J^T v||`` over unit v in S+, from the Gram matrix ``J J^T``."""
    B = partition.basis()
    ev = np.linalg.eigvalsh(B.T @ gram @ B)
    return float(np.sqrt(max(ev[0], 0.0))), float(np.sqrt(max(ev[-1], 0.0)))


def subspace_alpha(state: NetworkState, X, partition: SupportPartition) -> float:
    """Minimum singular value of the network Jacobian restricted to S+."""
    return subspace_extremes(jacobian_gram(state, X), partition)[0]


def bimodality_report(
    J=None,
    partition: SupportPartition | None = None,
    gram=None,
    lambda_C: float | None = None,
    lambda_se: float | None = None,
) -> SpectralReport:
    """Measure alpha, beta and eps over S+/S- for a Jacobian.

    Pass the explicit ``J`` when it fits in memory: the S- norm is then taken
    from ``(I - P) J`` directly, which keeps exact zeros at rounding level.
    With only ``gram`` the S- figure carries sqrt(machine eps) relative error.
    """
    if partition is None:
        raise ValueError("partition is required")
    if J is not None:
        J = np.asarray(J, dtype=float)
        if J.shape[0] != partition.n:
            raise ValueError(f"J has {J.shape[0]} rows, partition has {partition.n}")
        sv = np.linalg.svd(J, compute_uv=False)
        G = J @ J.T
        A = J - support_projection(partition, J)
        eps = np.sqrt(max(_top_eig(A @ A.T), 0.0))
    elif gram is not None:
        G = np.asarray(gram, dtype=float)
        if G.shape != (partition.n, partition.n):
            raise ValueError("gram must be n x n")
        sv = np.sqrt(np.clip(np.linalg.eigvalsh(G), 0.0, None))[::-1]
        Q = G - support_projection(partition, G)
        Q = Q - support_projection(partition, Q.T).T
        eps = np.sqrt(max(_top_eig(Q), 0.0))
    else:
        raise ValueError("need J or gram")
    alpha, _ = subspace_extremes(G, partition)
    beta = float(sv[0]) if sv.size else 0.0
    return SpectralReport(
        alpha=min(alpha, beta),
        beta=beta,
        eps_minus=float(eps),
        gamma=diffusedness(partition),
        singular_values=tuple(float(s) for s in np.sort(sv)[::-1]),
        lambda_C=lambda_C,
        lambda_se=lambda_se,
    )


def histogram(values, bins: int = 50, value_range=None) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=float)
    if value_range is None:
        lo, hi = (float(values.min()), float(values.max())) if values.size else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1.0
        value_range = (lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return edges, counts


def write_histogram_csv(path, edges, **counts) -> None:
    """One row per bin: ``bin_left, bin_right`` then one count column per keyword."""
    names = list(counts) or ["count"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right"] + names)
        for b in range(len(edges) - 1):
            w.writerow([repr(float(edges[b])), repr(float(edges[b + 1]))] + [int(counts[c][b]) for c in names])
