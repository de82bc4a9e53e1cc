import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustgd.dataset import generate_centers, generate_clusterable
from robustgd.network import IDENTITY, TANH, NetworkState, jacobian, jacobian_gram
from robustgd.spectral import (
    SpectralReport,
    SupportPartition,
    bimodality_report,
    cluster_covariance,
    decompose_residual,
    diffusedness,
    histogram,
    noise_projection,
    support_projection,
    write_histogram_csv,
)
from robustgd.trainer import theoretical_width

# E[tanh'(g)^2] for g ~ N(0, 1), 200-point Gauss-Hermite quadrature
TANH_DERIV_SQ_MEAN = 0.464402902448266


def dense_projector(membership):
    m = np.asarray(membership)
    same = (m[:, None] == m[None, :]).astype(float)
    return same / same.sum(axis=1, keepdims=True)


partitions = st.lists(st.integers(0, 4), min_size=1, max_size=30).map(
    lambda m: SupportPartition.from_membership(np.unique(m, return_inverse=True)[1])
)


def test_partition_validation():
    with pytest.raises(ValueError):
        SupportPartition(np.array([0, 0, 2]), np.array([2, 0, 1]))
    with pytest.raises(ValueError):
        SupportPartition(np.array([0, 1]), np.array([1, 2]))


def test_projection_of_piecewise_constant_and_zero_mean():
    p = SupportPartition.from_membership([0, 0, 1, 1, 1])
    r = np.array([2.0, 2.0, -1.0, -1.0, -1.0])
    assert np.array_equal(support_projection(p, r), r)
    z = np.array([1.0, -1.0, 2.0, -1.0, -1.0])
    assert np.allclose(support_projection(p, z), 0.0)


@settings(max_examples=50, deadline=None)
@given(partitions, st.integers(0, 10**6))
def test_projection_matches_dense_projector(p, seed):
    r = np.random.default_rng(seed).standard_normal(p.n)
    P = dense_projector(p.membership)
    assert np.allclose(support_projection(p, r), P @ r, atol=1e-12)
    # idempotent and symmetric
    pr = support_projection(p, r)
    assert np.allclose(support_projection(p, pr), pr, atol=1e-12)
    u = np.random.default_rng(seed + 1).standard_normal(p.n)
    assert np.isclose(support_projection(p, r) @ u, r @ support_projection(p, u))


@settings(max_examples=50, deadline=None)
@given(partitions, st.integers(0, 10**6))
def test_decomposition_properties(p, seed):
    r = np.random.default_rng(seed).standard_normal(p.n)
    s, e = decompose_residual(p, r)
    assert np.allclose(s + e, r)
    scale = r @ r
    assert abs(s @ e) <= 1e-10 * scale
    assert abs(s @ s + e @ e - scale) <= 1e-10 * scale
    s2, e2 = decompose_residual(p, s)
    assert np.allclose(s2, s) and np.allclose(e2, 0.0, atol=1e-12)


def test_diffusedness_examples():
    assert diffusedness(SupportPartition.from_membership(np.repeat(np.arange(4), 25))) == 4
    assert diffusedness(SupportPartition.from_membership(np.zeros(9, dtype=int))) == 1


@settings(max_examples=50, deadline=None)
@given(partitions, st.integers(0, 10**6))
def test_diffusedness_bound_and_extremal_vector(p, seed):
    gamma = diffusedness(p)
    coeffs = np.random.default_rng(seed).standard_normal(p.K)
    v = coeffs[p.membership]
    assert np.max(np.abs(v)) <= np.sqrt(gamma / p.n) * np.linalg.norm(v) * (1 + 1e-12)
    smallest = np.argmin(p.cluster_sizes)
    ind = (p.membership == smallest).astype(float)
    assert np.isclose(np.max(ind), np.sqrt(gamma / p.n) * np.linalg.norm(ind))


@settings(max_examples=100, deadline=None)
@given(partitions, st.integers(1, 30), st.integers(0, 10**6))
def test_sparse_vectors_have_small_projection(p, s, seed):
    s = min(s, p.n)
    rng = np.random.default_rng(seed)
    r = np.zeros(p.n)
    r[rng.choice(p.n, s, replace=False)] = rng.standard_normal(s)
    lhs = np.max(np.abs(support_projection(p, r)))
    assert lhs <= diffusedness(p) * np.sqrt(s) / p.n * np.linalg.norm(r) * (1 + 1e-12)


def test_single_center_covariance_matches_quadrature():
    x, w = np.polynomial.hermite_e.hermegauss(200)
    assert float(w @ ((1 - np.tanh(x) ** 2) ** 2) / np.sqrt(2 * np.pi)) == pytest.approx(TANH_DERIV_SQ_MEAN, abs=1e-14)
    c = generate_centers(1, 1, 8, 1.0, 0.0, seed=0)
    est = cluster_covariance(c, TANH, mc_samples=20_000, seed=1)
    assert est.matrix.shape == (1, 1)
    assert abs(est.lambda_min - TANH_DERIV_SQ_MEAN) <= 3 * est.lambda_se


def test_identity_covariance_is_center_gram():
    c = generate_centers(4, 2, 6, 1.0, 0.0, seed=3)
    est = cluster_covariance(c, IDENTITY, mc_samples=100, seed=0)
    G = c.centers @ c.centers.T
    assert np.allclose(est.matrix, G, atol=1e-14)
    assert est.lambda_min == pytest.approx(np.linalg.eigvalsh(G)[0], abs=1e-14)


def test_duplicate_centers_are_singular():
    c = generate_centers(3, 3, 10, 0.5, 0.0, seed=2)
    C = c.centers.copy()
    C[1] = C[0]
    est = cluster_covariance(C, TANH, mc_samples=20_000, seed=0)
    assert est.lambda_min <= 3 * est.lambda_se + 1e-12


def test_monte_carlo_consistency_and_determinism():
    c = generate_centers(5, 5, 30, 0.5, 0.0, seed=0)
    a = cluster_covariance(c, TANH, mc_samples=10_000, seed=4)
    b = cluster_covariance(c, TANH, mc_samples=20_000, seed=5)
    assert abs(a.lambda_min - b.lambda_min) <= 4 * np.hypot(a.lambda_se, b.lambda_se)
    again = cluster_covariance(c, TANH, mc_samples=10_000, seed=4)
    assert np.array_equal(a.matrix, again.matrix)


def clustered_problem(K=3, n=30, d=8, k=40, eps0=0.0, seed=0):
    c = generate_centers(K, K, d, 2.0 / max(K - 1, 1), eps0, seed=seed)
    ds = generate_clusterable(c, n, seed=seed)
    state = NetworkState.initial(k, d, seed)
    return c, ds, state, SupportPartition.from_membership(ds.membership, K)


def test_exact_clusters_give_rank_K_jacobian():
    _, ds, state, part = clustered_problem()
    rep = bimodality_report(jacobian(state, ds.inputs), part)
    assert rep.eps_minus <= 1e-10 * rep.beta
    assert np.sum(np.asarray(rep.singular_values) > 1e-8 * rep.beta) <= 3
    u = np.random.default_rng(0).standard_normal((state.k * state.d, 20))
    Ju = jacobian(state, ds.inputs) @ u
    assert np.all(np.linalg.norm(noise_projection(part, Ju), axis=0) <= 1e-10 * np.linalg.norm(Ju, axis=0))


def test_alpha_at_init_with_theorem_width():
    c, ds, _, part = clustered_problem(K=5, n=200, d=30)
    lam = cluster_covariance(c, TANH, seed=0).lambda_min
    k = theoretical_width(c, TANH, lam)
    state = NetworkState.initial(k, 30, seed=1)
    rep = bimodality_report(gram=jacobian_gram(state, ds.inputs), partition=part)
    assert rep.alpha >= np.sqrt(0.5 * 200 * lam / (2 * 5))


def test_report_matches_grid_search():
    rng = np.random.default_rng(3)
    part = SupportPartition.from_membership([0, 0, 1, 1])
    J = rng.standard_normal((4, 6))
    rep = bimodality_report(J, part)
    B = part.basis()
    N = np.array([[1, -1, 0, 0], [0, 0, 1, -1]]).T / np.sqrt(2)
    t = np.linspace(0, 2 * np.pi, 100_000)
    circle = np.vstack([np.cos(t), np.sin(t)])
    plus = np.linalg.norm(J.T @ (B @ circle), axis=0)
    minus = np.linalg.norm(J.T @ (N @ circle), axis=0)
    full = rng.standard_normal((4, 200_000))
    full /= np.linalg.norm(full, axis=0)
    assert rep.alpha == pytest.approx(plus.min(), abs=1e-3)
    assert rep.eps_minus == pytest.approx(minus.max(), abs=1e-3)
    assert rep.beta == pytest.approx(np.linalg.norm(J.T @ full, axis=0).max(), abs=1e-2)
    assert rep.beta == pytest.approx(np.linalg.norm(J, 2), rel=1e-12)


def test_gram_and_explicit_routes_agree():
    _, ds, state, part = clustered_problem(eps0=0.3)
    J = jacobian(state, ds.inputs)
    a = bimodality_report(J, part)
    b = bimodality_report(gram=J @ J.T, partition=part)
    assert a.alpha == pytest.approx(b.alpha, rel=1e-8)
    assert a.beta == pytest.approx(b.beta, rel=1e-10)
    assert a.eps_minus == pytest.approx(b.eps_minus, rel=1e-6)


def test_report_invariants_and_json(tmp_path):
    with pytest.raises(ValueError):
        SpectralReport(alpha=2.0, beta=1.0, eps_minus=0.0, gamma=1.0, singular_values=(1.0,))
    with pytest.raises(ValueError):
        SpectralReport(alpha=0.1, beta=1.0, eps_minus=0.0, gamma=1.0, singular_values=(0.5, 1.0))
    _, ds, state, part = clustered_problem()
    rep = bimodality_report(jacobian(state, ds.inputs), part, lambda_C=0.2, lambda_se=0.01)
    back = json.loads(rep.to_json(tmp_path / "r.json"))
    assert back["beta"] == rep.beta and len(back["singular_values"]) == ds.n


def test_histogram_csv(tmp_path):
    edges, counts = histogram(np.arange(10.0), bins=5)
    assert counts.sum() == 10 and len(edges) == 6
    write_histogram_csv(tmp_path / "h.csv", edges, init=counts, final=counts)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,init,final" and len(lines) == 6
