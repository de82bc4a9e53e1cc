"""One-hidden-layer network ``x -> v^T phi(W x)`` with fixed output weights.

Only the hidden weights ``W`` (k x d) are trained. Jacobian columns are
indexed by ``(unit, input coordinate)`` in row-major order, i.e. column
``u * d + j`` holds ``df/dW[u, j]``; :func:`flatten`/:func:`unflatten` are the
only conversions used anywhere in the package.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf, expit

# above this many entries the explicit Jacobian is refused; use jacobian_gram
MAX_JACOBIAN_ENTRIES = 10**8

WEIGHTS_MAGIC = b"RGDWGT01"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Activation:
    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    ddphi: Callable[[np.ndarray], np.ndarray]
    gamma: float  # bounds |phi(0)|, |phi'|, |phi''|
    smooth: bool = True
    fused: Callable[[np.ndarray], tuple] | None = None  # (phi, phi') sharing work

    def value_and_derivative(self, z):
        if self.fused is not None:
            return self.fused(z)
        return self.phi(z), self.dphi(z)


def _tanh_d(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_dd(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


_SQRT2 = np.sqrt(2.0)
_GAUSS_PEAK = np.sqrt(2.0 / np.pi)

def _tanh_fused(z):
    t = np.tanh(z)
    return t, 1.0 - t * t


TANH = Activation("tanh", np.tanh, _tanh_d, _tanh_dd, gamma=1.0, fused=_tanh_fused)
SOFTPLUS = Activation(
    "softplus",
    lambda z: np.logaddexp(0.0, z),
    expit,
    lambda z: expit(z) * (1.0 - expit(z)),
    gamma=1.0,
)
# Gaussian CDF rescaled to (-1, 1)
ERF_SIGMOID = Activation(
    "erf",
    lambda z: erf(z / _SQRT2),
    lambda z: _GAUSS_PEAK * np.exp(-0.5 * np.square(z)),
    lambda z: -z * _GAUSS_PEAK * np.exp(-0.5 * np.square(z)),
    gamma=1.0,
)
IDENTITY = Activation(
    "identity",
    lambda z: np.asarray(z, dtype=float).copy(),
    lambda z: np.ones_like(z, dtype=float),
    lambda z: np.zeros_like(z, dtype=float),
    gamma=1.0,
)
RELU = Activation(
    "relu",
    lambda z: np.maximum(z, 0.0),
    lambda z: (np.asarray(z) > 0).astype(float),
    lambda z: np.zeros_like(z, dtype=float),
    gamma=1.0,
    smooth=False,
)

_ACTIVATIONS = {a.name: a for a in (TANH, SOFTPLUS, ERF_SIGMOID, IDENTITY, RELU)}


def get_activation(name: str, allow_nonsmooth: bool = False) -> Activation:
    try:
        act = _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None
    if not act.smooth:
        if not allow_nonsmooth:
            raise ValueError(f"{name} has an unbounded second derivative; pass allow_nonsmooth=True")
        warnings.warn(f"{name} violates the smoothness hypothesis; results are exploratory", stacklevel=2)
    return act


def init_weights(k: int, d: int, seed: int) -> np.ndarray:
    if k < 1 or d < 1:
        raise ValueError("k and d must be positive")
    return np.random.default_rng(seed).standard_normal((k, d))


def make_output_vector(k: int) -> np.ndarray:
    """First half ``+1/sqrt(k)``, second half ``-1/sqrt(k)``, zero in the middle for odd k."""
    if k < 1:
        raise ValueError("k must be positive")
    half = k // 2
    v = np.zeros(k)
    v[:half] = 1.0 / np.sqrt(k)
    v[k - half :] = -1.0 / np.sqrt(k)
    return v


@dataclass(frozen=True)
class NetworkState:
    W: np.ndarray
    v: np.ndarray
    activation: Activation = TANH

    def __post_init__(self):
        W = np.array(self.W, dtype=float, copy=True)
        v = np.array(self.v, dtype=float, copy=True)
        if W.ndim != 2 or v.shape != (W.shape[0],):
            raise DimensionError(f"W {W.shape} and v {v.shape} disagree")
        W.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "v", v)

    @classmethod
    def initial(cls, k: int, d: int, seed: int, activation: Activation = TANH) -> "NetworkState":
        return cls(init_weights(k, d, seed), make_output_vector(k), activation)

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def with_weights(self, W) -> "NetworkState":
        return NetworkState(W, self.v, self.activation)


def _check_inputs(state: NetworkState, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != state.d:
        raise DimensionError(f"inputs have shape {X.shape}, network expects d={state.d}")
    return X


def _check_labels(X: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise DimensionError(f"{X.shape[0]} inputs but labels have shape {y.shape}")
    return y


def predict(state: NetworkState, X) -> np.ndarray:
    X = _check_inputs(state, X)
    return state.activation.phi(X @ state.W.T) @ state.v


def residual(state: NetworkState, X, y) -> np.ndarray:
    """``f(W) - y``."""
    X = _check_inputs(state, X)
    return predict(state, X) - _check_labels(X, y)


def loss(state: NetworkState, X, y) -> float:
    r = residual(state, X, y)
    return 0.5 * float(r @ r)


def _weighted_derivs(state: NetworkState, X: np.ndarray) -> np.ndarray:
    # D[i, u] = v_u * phi'(<w_u, x_i>)
    return state.activation.dphi(X @ state.W.T) * state.v


def flatten(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).reshape(-1)


def unflatten(theta: np.ndarray, k: int, d: int) -> np.ndarray:
    return np.asarray(theta).reshape(k, d)


def jacobian(state: NetworkState, X) -> np.ndarray:
    """Explicit n x (k*d) Jacobian of the predictions with respect to ``W``."""
    X = _check_inputs(state, X)
    n = X.shape[0]
    if n * state.k * state.d > MAX_JACOBIAN_ENTRIES:
        raise MemoryError(
            f"Jacobian would hold {n * state.k * state.d} entries; use jacobian_gram instead"
        )
    D = _weighted_derivs(state, X)
    return (D[:, :, None] * X[:, None, :]).reshape(n, state.k * state.d)


def jacobian_gram(state: NetworkState, X) -> np.ndarray:
    """``J J^T`` as ``(X X^T) * (D D^T)`` without forming J."""
    X = _check_inputs(state, X)
    D = _weighted_derivs(state, X)
    return (X @ X.T) * (D @ D.T)


def gradient(state: NetworkState, X, y) -> np.ndarray:
    """Gradient of the half squared loss, shaped like ``W``."""
    X = _check_inputs(state, X)
    y = _check_labels(X, y)
    Z = X @ state.W.T
    r = state.activation.phi(Z) @ state.v - y
    D = state.activation.dphi(Z) * state.v
    return (D * r[:, None]).T @ X


def average_jacobian(state_a: NetworkState, state_b: NetworkState, X, nodes: int = 16) -> np.ndarray:
    """Gauss-Legendre estimate of the mean Jacobian on the segment from ``W_a`` to ``W_b``."""
    if state_a.W.shape != state_b.W.shape or not np.array_equal(state_a.v, state_b.v):
        raise DimensionError("states must share k, d and the output vector")
    if state_a.activation is not state_b.activation:
        raise DimensionError("states must share the activation")
    if nodes < 1:
        raise ValueError("need at least one quadrature node")
    t, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    step = state_b.W - state_a.W
    out = None
    for ti, wi in zip(t, w):
        J = jacobian(state_a.with_weights(state_a.W + ti * step), X)
        out = wi * J if out is None else out + wi * J
    return out


def classify(prediction, class_labels) -> np.ndarray | int:
    """Index of the nearest class label (lowest index on ties). Works elementwise."""
    labels = np.asarray(class_labels, dtype=float)
    if labels.size == 0:
        raise ValueError("class_labels must be nonempty")
    p = np.asarray(prediction, dtype=float)
    idx = np.argmin(np.abs(p[..., None] - labels), axis=-1)
    return int(idx) if p.ndim == 0 else idx


# --- binary weight container -------------------------------------------------


def save_weights(path, W) -> None:
    W = np.ascontiguousarray(W, dtype="<f8")
    if W.ndim != 2:
        raise DimensionError("weights must be a matrix")
    with Path(path).open("wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<qq", *W.shape))
        fh.write(W.tobytes(order="C"))


def load_weights(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    rows, cols = struct.unpack("<qq", raw[8:24])
    body = raw[24:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: truncated weight file")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)
