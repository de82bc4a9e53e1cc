"""Clusterable datasets with per-cluster label corruption.

Inputs live on the unit sphere, each within ``eps0`` of one of ``K`` unit-norm
cluster centers. Every cluster belongs to a class and carries that class's
scalar label; corruption reassigns a fixed fraction of labels inside each
cluster. Cluster and class indices are 0-based throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CORRUPTION_MODES = ("reassign-other", "shuffle-uniform")


class SeparationError(RuntimeError):
    """Raised when centers of different classes cannot be separated by 2*eps0."""

    def __init__(self, achieved_gap: float, required_gap: float, rounds: int):
        self.achieved_gap = achieved_gap
        self.required_gap = required_gap
        super().__init__(
            f"could not separate inter-class centers by {required_gap:.4g} after "
            f"{rounds} rounds (best minimum gap {achieved_gap:.4g})"
        )


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CenterSet:
    centers: np.ndarray  # (K, d), unit rows
    class_of_cluster: np.ndarray  # (K,), values in [0, K_bar)
    class_labels: np.ndarray  # (K_bar,)
    delta: float
    eps0: float

    def __post_init__(self):
        object.__setattr__(self, "centers", _frozen(self.centers, float))
        object.__setattr__(self, "class_of_cluster", _frozen(self.class_of_cluster, int))
        object.__setattr__(self, "class_labels", _frozen(self.class_labels, float))

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def K_bar(self) -> int:
        return self.class_labels.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def cluster_labels(self) -> np.ndarray:
        """Label value of every cluster, shape (K,)."""
        return self.class_labels[self.class_of_cluster]

    def min_interclass_gap(self) -> float:
        return _min_interclass_gap(self.centers, self.class_of_cluster)

    def check(self, atol: float = 1e-12) -> None:
        norms = np.linalg.norm(self.centers, axis=1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ValueError("cluster centers must have unit norm")
        if self.K_bar > 1:
            labels = np.sort(self.class_labels)
            if np.min(np.diff(labels)) < self.delta - 1e-12:
                raise ValueError("class labels are not delta-separated")
        if self.min_interclass_gap() < 2 * self.eps0 - 1e-12:
            raise ValueError("centers of different classes are closer than 2*eps0")


@dataclass(frozen=True)
class CorruptedDataset:
    inputs: np.ndarray  # X, (n, d)
    labels: np.ndarray  # y, possibly corrupted
    clean_labels: np.ndarray  # y tilde
    membership: np.ndarray  # cluster index of every sample
    corrupted_mask: np.ndarray  # y != y tilde
    rho: float = 0.0
    centers: CenterSet | None = field(default=None, compare=False)
    c_low: float = 0.5
    c_up: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "inputs", _frozen(self.inputs, float))
        object.__setattr__(self, "labels", _frozen(self.labels, float))
        object.__setattr__(self, "clean_labels", _frozen(self.clean_labels, float))
        object.__setattr__(self, "membership", _frozen(self.membership, int))
        object.__setattr__(self, "corrupted_mask", _frozen(self.corrupted_mask, bool))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_clusters(self) -> int:
        if self.centers is not None:
            return self.centers.K
        return int(self.membership.max()) + 1

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.num_clusters)

    @property
    def noise(self) -> np.ndarray:
        """Label corruption e = y - y_clean."""
        return self.labels - self.clean_labels

    @property
    def eps0(self) -> float:
        if self.centers is None:
            raise ValueError("dataset carries no center set")
        return self.centers.eps0


def _min_interclass_gap(centers: np.ndarray, class_of_cluster: np.ndarray) -> float:
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    other = class_of_cluster[:, None] != class_of_cluster[None, :]
    if not other.any():
        return math.inf
    return float(dist[other].min())


def default_class_labels(K_bar: int, delta: float) -> np.ndarray:
    """Labels spaced exactly ``delta`` apart, the largest one pinned at 1.

    With ``delta = 2/(K_bar-1)`` this is the evenly spaced grid on [-1, 1];
    ``K_bar=2, delta=1`` gives ``{0, 1}``.
    """
    return 1.0 - delta * np.arange(K_bar - 1, -1, -1, dtype=float)


def generate_centers(
    K: int,
    K_bar: int,
    d: int,
    delta: float,
    eps0: float,
    seed: int,
    class_labels=None,
    class_of_cluster=None,
    max_rounds: int = 1000,
) -> CenterSet:
    """Sample ``K`` unit centers uniformly on the sphere in ``R^d``.

    Clusters are assigned to classes round-robin unless ``class_of_cluster`` is
    given. The whole center matrix is resampled until every pair of clusters
    from different classes is at least ``2*eps0`` apart.
    """
    if K < 1 or K_bar < 1:
        raise ValueError("K and K_bar must be positive")
    if K_bar > K:
        raise ValueError(f"K_bar={K_bar} exceeds K={K}")
    if d < 2:
        raise ValueError("d must be at least 2")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if eps0 < 0:
        raise ValueError("eps0 must be non-negative")
    if K_bar > 2.0 / delta + 1 + 1e-12:
        raise ValueError(f"K_bar={K_bar} classes cannot be {delta}-separated inside [-1, 1]")

    if class_labels is None:
        labels = default_class_labels(K_bar, delta)
    else:
        labels = np.asarray(class_labels, dtype=float)
        if labels.shape != (K_bar,):
            raise ValueError("class_labels must have K_bar entries")
        if np.any(np.abs(labels) > 1):
            raise ValueError("class labels must lie in [-1, 1]")
        if K_bar > 1 and np.min(np.diff(np.sort(labels))) < delta - 1e-12:
            raise ValueError("class_labels are not delta-separated")

    if class_of_cluster is None:
        assign = np.arange(K) % K_bar
    else:
        assign = np.asarray(class_of_cluster, dtype=int)
        if assign.shape != (K,) or assign.min() < 0 or assign.max() >= K_bar:
            raise ValueError("class_of_cluster must map K clusters into [0, K_bar)")

    rng = np.random.default_rng(seed)
    best = -math.inf
    for _ in range(max_rounds):
        C = rng.standard_normal((K, d))
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        gap = _min_interclass_gap(C, assign)
        if gap >= 2 * eps0:
            return CenterSet(C, assign, labels, float(delta), float(eps0))
        best = max(best, gap)
    raise SeparationError(best, 2 * eps0, max_rounds)


def balanced_sizes(n: int, K: int) -> np.ndarray:
    """Split ``n`` into ``K`` near-equal parts (largest remainder, ties to low index)."""
    quota = np.full(K, n / K)
    sizes = np.floor(quota).astype(int)
    remainder = quota - sizes
    order = np.argsort(-remainder, kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes


def _sample_around(center: np.ndarray, eps0: float, count: int, rng) -> np.ndarray:
    out = np.empty((count, center.shape[0]))
    filled = 0
    while filled < count:
        u = rng.standard_normal((count - filled, center.shape[0]))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        x = center + eps0 * u
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        ok = norms[:, 0] > 0
        x = x[ok] / norms[ok]
        # only reachable for eps0 >= 1, where renormalization can overshoot
        x = x[np.linalg.norm(x - center, axis=1) <= eps0 + 1e-12]
        out[filled : filled + len(x)] = x
        filled += len(x)
    return out


def generate_clusterable(
    centers: CenterSet,
    n: int,
    seed: int,
    c_low: float = 0.5,
    c_up: float = 2.0,
) -> CorruptedDataset:
    """Draw ``n`` unit-norm inputs, clusters stored contiguously in index order."""
    K = centers.K
    if n < K:
        raise ValueError(f"n={n} is smaller than the number of clusters K={K}")
    if not 0 < c_low < c_up:
        raise ValueError("need 0 < c_low < c_up")
    sizes = balanced_sizes(n, K)
    if sizes.min() < c_low * n / K or sizes.max() > c_up * n / K:
        raise ValueError("balanced cluster sizes violate the c_low/c_up band")

    rng = np.random.default_rng(seed)
    membership = np.repeat(np.arange(K), sizes)
    X = np.empty((n, centers.d))
    start = 0
    for ell, size in enumerate(sizes):
        c = centers.centers[ell]
        if centers.eps0 == 0:
            X[start : start + size] = c
        else:
            X[start : start + size] = _sample_around(c, centers.eps0, size, rng)
        start += size
    dist = np.linalg.norm(X - centers.centers[membership], axis=1)
    assert np.all(dist <= centers.eps0 + 1e-12), "sample left its eps0-ball"

    y = centers.cluster_labels[membership]
    return CorruptedDataset(
        inputs=X,
        labels=y,
        clean_labels=y,
        membership=membership,
        corrupted_mask=np.zeros(n, dtype=bool),
        rho=0.0,
        centers=centers,
        c_low=c_low,
        c_up=c_up,
    )


def corruption_budget(rho: float, cluster_size: int) -> int:
    # guards against 0.29*100 == 28.999999999999996
    return int(math.floor(rho * cluster_size + 1e-9))


def corrupt_labels(
    dataset: CorruptedDataset,
    rho: float,
    mode: str = "reassign-other",
    seed: int = 0,
) -> CorruptedDataset:
    """Corrupt exactly ``floor(rho * n_l)`` chosen labels in every cluster.

    ``reassign-other`` draws a different class label uniformly; ``shuffle-uniform``
    draws any class label uniformly, so some picks keep their original value.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    if dataset.corrupted_mask.any() or not np.array_equal(dataset.labels, dataset.clean_labels):
        raise ValueError("dataset is already corrupted")
    if dataset.centers is None:
        raise ValueError("corruption needs the dataset's center set for the label alphabet")

    alphabet = dataset.centers.class_labels
    K_bar = alphabet.shape[0]
    rng = np.random.default_rng(seed)
    y = dataset.clean_labels.copy()
    true_class = dataset.centers.class_of_cluster[dataset.membership]
    for ell in range(dataset.num_clusters):
        idx = np.flatnonzero(dataset.membership == ell)
        m = corruption_budget(rho, idx.size)
        if m == 0:
            continue
        chosen = np.sort(rng.choice(idx, size=m, replace=False))
        if mode == "shuffle-uniform":
            y[chosen] = alphabet[rng.integers(0, K_bar, size=m)]
        elif K_bar > 1:
            # shift by 1..K_bar-1 classes: uniform over the other labels
            shift = rng.integers(1, K_bar, size=m)
            y[chosen] = alphabet[(true_class[chosen] + shift) % K_bar]
    return replace(dataset, labels=y, corrupted_mask=y != dataset.clean_labels, rho=float(rho))


def nearest_cluster(x, centers: CenterSet) -> int:
    """Index of the closest center; near-exact ties go to the lowest index."""
    x = np.asarray(x, dtype=float)
    dist = np.linalg.norm(centers.centers - x, axis=1)
    best = dist.min()
    return int(np.flatnonzero(dist <= best * (1 + 1e-12) + 1e-15)[0])


def ground_truth_label(x, centers: CenterSet) -> float:
    ell = nearest_cluster(x, centers)
    return float(centers.class_labels[centers.class_of_cluster[ell]])


# --- CSV serialization -------------------------------------------------------


def save_dataset_csv(dataset: CorruptedDataset, path) -> None:
    path = Path(path)
    header = [f"x_{j + 1}" for j in range(dataset.d)] + ["y", "y_clean", "cluster", "corrupted"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.inputs[i]]
            row += [
                repr(float(dataset.labels[i])),
                repr(float(dataset.clean_labels[i])),
                str(int(dataset.membership[i])),
                str(int(dataset.corrupted_mask[i])),
            ]
            writer.writerow(row)


def load_dataset_csv(path, centers: CenterSet | None = None, rho: float = 0.0) -> CorruptedDataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = sum(1 for h in header if h.startswith("x_"))
    expected = [f"x_{j + 1}" for j in range(d)] + ["y", "y_clean", "cluster", "corrupted"]
    if header != expected:
        raise ValueError(f"unexpected dataset header {header[:3]}...")
    data = np.array(rows, dtype=float).reshape(len(rows), d + 4)
    return CorruptedDataset(
        inputs=data[:, :d],
        labels=data[:, d],
        clean_labels=data[:, d + 1],
        membership=data[:, d + 2].astype(int),
        corrupted_mask=data[:, d + 3].astype(bool),
        rho=rho,
        centers=centers,
    )
