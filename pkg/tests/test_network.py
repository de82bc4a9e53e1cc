import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustgd.network import (
    ERF_SIGMOID,
    IDENTITY,
    SOFTPLUS,
    TANH,
    DimensionError,
    NetworkState,
    average_jacobian,
    classify,
    flatten,
    get_activation,
    gradient,
    init_weights,
    jacobian,
    jacobian_gram,
    load_weights,
    loss,
    make_output_vector,
    predict,
    save_weights,
    unflatten,
)

SMOOTH = [TANH, SOFTPLUS, ERF_SIGMOID]


def random_instance(seed, n=7, k=9, d=5, activation=TANH):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = rng.uniform(-1, 1, n)
    return NetworkState(rng.standard_normal((k, d)), make_output_vector(k), activation), X, y


@pytest.mark.parametrize("act", SMOOTH + [IDENTITY], ids=lambda a: a.name)
def test_activation_bounds(act):
    z = np.random.default_rng(0).uniform(-20, 20, 10**5)
    assert np.all(np.abs(act.dphi(z)) <= act.gamma)
    assert np.all(np.abs(act.ddphi(z)) <= act.gamma)
    assert abs(act.phi(np.array(0.0))) <= act.gamma


@pytest.mark.parametrize("act", SMOOTH, ids=lambda a: a.name)
def test_derivatives_match_finite_differences(act):
    z = np.linspace(-4, 4, 81)
    h = 1e-5
    fd1 = (act.phi(z + h) - act.phi(z - h)) / (2 * h)
    fd2 = (act.dphi(z + h) - act.dphi(z - h)) / (2 * h)
    assert np.allclose(act.dphi(z), fd1, rtol=1e-6, atol=1e-9)
    assert np.allclose(act.ddphi(z), fd2, rtol=1e-6, atol=1e-9)


def test_relu_needs_explicit_flag():
    with pytest.raises(ValueError):
        get_activation("relu")
    with pytest.warns(UserWarning):
        assert not get_activation("relu", allow_nonsmooth=True).smooth


def test_init_weights_moments_and_determinism():
    W = init_weights(1000, 1000, seed=5)
    assert abs(W.mean()) <= 0.01 and 0.99 <= W.var() <= 1.01
    assert np.array_equal(init_weights(3, 4, 1), init_weights(3, 4, 1))
    assert init_weights(1000, 20, 0).shape == (1000, 20)


def test_output_vector_examples():
    assert np.allclose(make_output_vector(4), [0.5, 0.5, -0.5, -0.5])
    s = 1 / np.sqrt(3)
    assert np.allclose(make_output_vector(3), [s, 0, -s])


@given(st.integers(1, 501))
def test_output_vector_structure(k):
    v = make_output_vector(k)
    assert math.fsum(v) == 0.0
    assert np.sum(v > 0) == np.sum(v < 0) == k // 2
    assert np.sum(v == 0) == k % 2
    if k % 2 == 0:
        assert np.isclose(np.linalg.norm(v), 1.0)


def test_zero_weights_predict_zero():
    state = NetworkState(np.zeros((6, 3)), make_output_vector(6), SOFTPLUS)
    assert np.all(predict(state, np.eye(3)) == 0.0)


def test_identity_prediction_is_linear():
    state, X, _ = random_instance(1, activation=IDENTITY)
    assert np.allclose(predict(state, X), X @ state.W.T @ state.v, atol=1e-14)


def test_duplicate_rows_identical_outputs():
    state, X, _ = random_instance(2)
    X2 = np.vstack([X[:1], X[:1]])
    p = predict(state, X2)
    assert p[0] == p[1]
    J = jacobian(state, X2)
    assert np.array_equal(J[0], J[1])


def test_dimension_mismatch():
    state, X, y = random_instance(3)
    with pytest.raises(DimensionError):
        predict(state, X[:, :-1])
    with pytest.raises(DimensionError):
        loss(state, X, y[:-1])


def test_loss_examples():
    state, X, y = random_instance(4, n=3)
    assert loss(state, X, predict(state, X)) == 0.0
    f = predict(state, X[:1])[0]
    assert loss(state, X[:1], [f + 0.3]) == pytest.approx(0.045, rel=1e-12)
    naive = 0.0
    for i in range(3):
        out = sum(state.v[u] * np.tanh(state.W[u] @ X[i]) for u in range(state.k))
        naive += 0.5 * (y[i] - out) ** 2
    assert loss(state, X, y) == pytest.approx(naive, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_central_differences(seed):
    state, X, _ = random_instance(seed)
    J = jacobian(state, X)
    h = 1e-6
    theta = flatten(state.W)
    fd = np.empty_like(J)
    for p in range(theta.size):
        e = np.zeros_like(theta)
        e[p] = h
        up = predict(state.with_weights(unflatten(theta + e, state.k, state.d)), X)
        dn = predict(state.with_weights(unflatten(theta - e, state.k, state.d)), X)
        fd[:, p] = (up - dn) / (2 * h)
    assert np.linalg.norm(J - fd) / np.linalg.norm(J) <= 1e-5


def test_identity_jacobian_rows_have_unit_norm():
    state, X, _ = random_instance(6, k=8, activation=IDENTITY)
    J = jacobian(state, X)
    assert np.allclose(J[0], np.outer(state.v, X[0]).ravel())
    assert np.allclose(np.linalg.norm(J, axis=1), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20), st.integers(1, 30), st.integers(1, 10))
def test_gradient_equals_jacobian_transpose_residual(seed, n, k, d):
    state, X, y = random_instance(seed, n, k, d)
    r = predict(state, X) - y
    g = gradient(state, X, y)
    assert np.allclose(g, unflatten(jacobian(state, X).T @ r, k, d), rtol=0, atol=1e-12 * max(1, np.abs(g).max()))


def test_zero_residual_zero_gradient():
    state, X, _ = random_instance(7)
    assert np.all(gradient(state, X, predict(state, X)) == 0.0)


def test_small_step_decreases_loss():
    state, X, y = random_instance(8)
    after = state.with_weights(state.W - 1e-3 * gradient(state, X, y))
    assert loss(after, X, y) < loss(state, X, y)


def test_gram_matches_explicit_jacobian():
    state, X, _ = random_instance(9)
    J = jacobian(state, X)
    assert np.allclose(jacobian_gram(state, X), J @ J.T, atol=1e-13)


@pytest.mark.parametrize("seed", range(4))
def test_spectral_norm_and_smoothness_bounds(seed):
    state, X, _ = random_instance(seed, n=12, k=20, d=6)
    rng = np.random.default_rng(seed)
    norm_X = np.linalg.norm(X, 2)
    J = jacobian(state, X)
    assert np.linalg.norm(J, 2) <= TANH.gamma * norm_X * (1 + 1e-12)
    other = state.with_weights(state.W + rng.standard_normal(state.W.shape) * 0.3)
    diff = np.linalg.norm(jacobian(other, X) - J, 2)
    bound = TANH.gamma / np.sqrt(state.k) * norm_X * np.linalg.norm(other.W - state.W)
    assert diff <= bound


def test_average_jacobian_constant_path_and_identity():
    state, X, _ = random_instance(10)
    assert np.allclose(average_jacobian(state, state, X, nodes=3), jacobian(state, X), atol=1e-15)
    lin, X2, _ = random_instance(11, activation=IDENTITY)
    other = lin.with_weights(lin.W + 1.0)
    assert np.allclose(average_jacobian(lin, other, X2), jacobian(other, X2), atol=1e-14)


def test_average_jacobian_quadrature_converges():
    state, X, _ = random_instance(12)
    other = state.with_weights(state.W + 0.2 * np.random.default_rng(0).standard_normal(state.W.shape))
    a16 = average_jacobian(state, other, X, nodes=16)
    a32 = average_jacobian(state, other, X, nodes=32)
    assert np.max(np.abs(a16 - a32)) <= 1e-9


def test_average_jacobian_shape_mismatch():
    state, X, _ = random_instance(13)
    with pytest.raises(DimensionError):
        average_jacobian(state, NetworkState.initial(state.k + 2, state.d, 0), X)


def test_classify_examples():
    assert classify(1.0, [0.0, 1.0]) == 1
    assert classify(0.3, [0.0, 1.0]) == 0
    assert classify(0.5, [0.0, 1.0]) == 0  # tie goes to the lower index


@given(st.integers(2, 5), st.floats(0, 0.999), st.integers(0, 4))
def test_classify_within_half_gap_is_correct(K_bar, frac, which):
    labels = np.linspace(-1, 1, K_bar)
    delta = labels[1] - labels[0]
    true = which % K_bar
    for sign in (-1, 1):
        assert classify(labels[true] + sign * frac * delta / 2, labels) == true


def test_weights_round_trip(tmp_path):
    W = np.random.default_rng(0).standard_normal((5, 3))
    save_weights(tmp_path / "w.bin", W)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:8] == b"RGDWGT01" and len(raw) == 8 + 16 + 15 * 8
    assert np.array_equal(load_weights(tmp_path / "w.bin"), W)
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad.bin")
