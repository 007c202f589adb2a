import itertools
from unittest.mock import patch

import numpy as np
import pytest
from scipy.linalg import eigh
from scipy.special import softmax
from scipy.stats import norm

from capclust.metrics import adjusted_rand_index, projection_similarity
from capclust.mixture import (
    beta_objective,
    constraint_matrix,
    e_step,
    em_fit,
    fit_gating,
    fit_with_restarts,
    gamma_matrix,
    gating_objective,
    log_expert_density,
    observed_loglik,
    predict_membership,
    quad_forms,
    random_init,
    spectral_init,
    update_beta_newton,
    update_gamma,
)
from capclust.models import Dataset, EmConfig, ModelParams, Responsibilities, SimConfig, SubjectRecord
from capclust.simgen import generate_dataset
from capclust.utils.errors import (
    AllRestartsFailed,
    DegenerateResponsibility,
    DimensionMismatch,
    EmptyCluster,
    NumericOverflow,
)
from conftest import make_dataset, random_params


def test_log_expert_density_matches_normal_logpdf(dataset):
    subject = dataset.subjects[0]
    params = random_params(dataset, 2)
    z = subject.Y @ params.gamma
    sd = np.exp(0.5 * subject.x @ params.beta[1])
    expected = norm.logpdf(z, scale=sd).sum()
    assert np.isclose(log_expert_density(subject, params.gamma, params.beta[1]), expected, rtol=1e-12)


def test_log_expert_density_checks_shapes(dataset):
    with pytest.raises(DimensionMismatch):
        log_expert_density(dataset.subjects[0], np.ones(dataset.p + 1), np.zeros(dataset.q1))


def test_observed_loglik_matches_latent_marginalization():
    d = make_dataset(n=3, p=2, T=2, seed=4)
    params = random_params(d, 2, seed=1)
    pi = softmax(d.W @ params.alpha.T, axis=1)

    total = 0.0
    for assignment in itertools.product(range(2), repeat=d.n):
        log_term = 0.0
        for i, k in enumerate(assignment):
            subject = d.subjects[i]
            z = subject.Y @ params.gamma
            sd = np.exp(0.5 * subject.x @ params.beta[k])
            log_term += np.log(pi[i, k]) + norm.logpdf(z, scale=sd).sum()
        total += np.exp(log_term)
    assert np.isclose(observed_loglik(d, params), np.log(total), rtol=0.0, atol=1e-8)


def test_e_step_rows_are_posteriors(dataset):
    params = random_params(dataset, 3)
    resp = e_step(dataset, params)
    assert resp.eta.shape == (dataset.n, 3)
    assert np.allclose(resp.eta.sum(axis=1), 1.0)
    assert np.all(resp.eta > 0.0)


def test_e_step_checks_dimensions(dataset):
    params = ModelParams(gamma=np.ones(dataset.p), beta=np.zeros((2, dataset.q1 + 1)), alpha=np.zeros((2, dataset.q2)))
    with pytest.raises(DimensionMismatch):
        e_step(dataset, params)


def _dead_intercepts(dataset, dead_clusters, gamma=None):
    beta = np.zeros((2, dataset.q1))
    beta[dead_clusters, 0] = -1000.0
    gamma = np.ones(dataset.p) if gamma is None else gamma
    return ModelParams(gamma=gamma, beta=beta, alpha=np.zeros((2, dataset.q2)))


def test_e_step_rejects_subject_with_no_supporting_cluster(dataset):
    with pytest.raises(DegenerateResponsibility) as raised:
        e_step(dataset, _dead_intercepts(dataset, [0, 1]))
    assert raised.value.row == 0


def test_e_step_survives_one_vanishing_density(dataset):
    resp = e_step(dataset, _dead_intercepts(dataset, [1]))
    assert np.allclose(resp.eta.sum(axis=1), 1.0)
    assert np.allclose(resp.eta[:, 0], 1.0)


def test_e_step_rejects_undefined_density(dataset):
    with pytest.raises(NumericOverflow):
        e_step(dataset, _dead_intercepts(dataset, [0, 1], gamma=np.zeros(dataset.p)))


def test_predict_membership():
    params = ModelParams(gamma=[1.0], beta=[[0.0], [0.0]], alpha=[[0.0, 0.0], [1.0, -2.0]])
    probabilities = predict_membership(np.array([[1.0, 0.0], [1.0, 1.0]]), params)
    assert probabilities.shape == (2, 2)
    assert np.allclose(probabilities.sum(axis=1), 1.0)
    assert np.isclose(probabilities[0, 1], 1.0 / (1.0 + np.exp(-1.0)))
    with pytest.raises(DimensionMismatch):
        predict_membership(np.ones(3), params)
    with pytest.raises(DimensionMismatch):
        predict_membership(1.0, params)
    with pytest.raises(DimensionMismatch):
        predict_membership(np.ones((1, 1, 2)), params)


def _central_difference(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        grad[j] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


@pytest.mark.parametrize("seed", range(20))
def test_gating_gradient_and_hessian(seed):
    d = make_dataset(n=10, p=3, q2=3, seed=seed, equal_T=False)
    rng = np.random.default_rng(seed)
    eta = rng.dirichlet(np.ones(3), size=d.n)
    alpha = rng.normal(size=(3, d.q2))
    alpha[0] = 0.0

    def value(free):
        full = np.vstack([np.zeros(d.q2), free.reshape(2, d.q2)])
        return gating_objective(full, eta, d.W, d.T)[0]

    _, grad, hess = gating_objective(alpha, eta, d.W, d.T)
    numeric = _central_difference(value, alpha[1:].ravel())
    assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-5 * np.abs(numeric).max())

    def gradient(free, j):
        full = np.vstack([np.zeros(d.q2), free.reshape(2, d.q2)])
        return gating_objective(full, eta, d.W, d.T)[1][j]

    numeric_hess = np.array(
        [_central_difference(lambda free, j=j: gradient(free, j), alpha[1:].ravel()) for j in range(grad.size)]
    )
    # the returned matrix is the negative Hessian
    assert np.allclose(hess, -numeric_hess, rtol=1e-4, atol=1e-4 * np.abs(hess).max())


@pytest.mark.parametrize("seed", range(20))
def test_beta_gradient_and_hessian(seed):
    d = make_dataset(n=10, p=3, q1=3, seed=seed)
    rng = np.random.default_rng(seed)
    weights = 0.5 * d.T * rng.uniform(size=d.n)
    quad = quad_forms(d, rng.standard_normal(d.p))
    beta = rng.normal(scale=0.3, size=d.q1)

    _, grad, hess = beta_objective(beta, weights, d.X, quad)
    numeric = _central_difference(lambda b: beta_objective(b, weights, d.X, quad)[0], beta)
    assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-5 * np.abs(numeric).max())
    numeric_hess = np.array(
        [_central_difference(lambda b, j=j: beta_objective(b, weights, d.X, quad)[1][j], beta) for j in range(d.q1)]
    )
    assert np.allclose(hess, numeric_hess, rtol=1e-4, atol=1e-4 * np.abs(hess).max())


def test_fit_gating_reaches_stationary_point(dataset):
    rng = np.random.default_rng(2)
    resp = Responsibilities(eta=rng.dirichlet(np.ones(2), size=dataset.n))
    alpha = fit_gating(resp, dataset)
    assert np.all(alpha[0] == 0.0)
    _, grad, _ = gating_objective(alpha, resp.eta, dataset.W, dataset.T)
    assert np.max(np.abs(grad)) < 1e-6


def test_fit_gating_single_cluster(dataset):
    resp = Responsibilities(eta=np.ones((dataset.n, 1)))
    assert np.array_equal(fit_gating(resp, dataset), np.zeros((1, dataset.q2)))


def test_update_beta_newton_reaches_stationary_point(dataset):
    params = random_params(dataset, 2, seed=5)
    resp = e_step(dataset, params)
    beta = update_beta_newton(resp, dataset, params.gamma, np.zeros((2, dataset.q1)))
    quad = quad_forms(dataset, params.gamma)
    for k in range(2):
        _, grad, _ = beta_objective(beta[k], 0.5 * dataset.T * resp.eta[:, k], dataset.X, quad)
        assert np.max(np.abs(grad)) < 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_update_gamma_solves_generalized_eigenproblem(seed):
    rng = np.random.default_rng(seed)
    p = 5
    M = rng.standard_normal((p, p))
    A = M @ M.T + 0.1 * np.eye(p)
    N = rng.standard_normal((p, p))
    H = N @ N.T + p * np.eye(p)

    gamma, lam = update_gamma(A, H)
    assert np.isclose(gamma @ H @ gamma, 1.0)
    assert np.linalg.norm(A @ gamma - lam * H @ gamma) <= 1e-8 * (1.0 + np.linalg.norm(A))
    assert np.isclose(lam, eigh(A, H, eigvals_only=True)[0])
    assert gamma[np.argmax(np.abs(gamma))] > 0.0


def test_update_gamma_minimizes_quadratic_form(dataset):
    params = random_params(dataset, 2)
    resp = e_step(dataset, params)
    H = constraint_matrix(dataset)
    A = gamma_matrix(resp, dataset, params.beta)
    gamma, lam = update_gamma(A, H)
    assert np.isclose(gamma @ A @ gamma, lam)
    assert gamma @ A @ gamma <= (params.gamma @ A @ params.gamma) * (1.0 + 1e-10)


@pytest.mark.parametrize("seed", range(100))
def test_em_log_likelihood_is_monotone(seed):
    d, _ = generate_dataset(SimConfig(p=5, n=40, T=40, seed=seed))
    cfg = EmConfig(max_iter=30, tol=1e-12, empty_cluster_tol=0.0)
    fit = em_fit(d, 2, random_init(d, 2, np.random.default_rng(seed), constraint_matrix(d)), cfg)
    trace = np.array(fit.trace)
    assert np.all(np.diff(trace) >= -1e-8)
    assert np.isclose(fit.loglik, observed_loglik(d, fit.params), rtol=0.0, atol=1e-8)


def test_em_fit_is_equivariant_under_relabeling(simulated):
    d, _ = simulated
    cfg = EmConfig(tol=1e-10, max_iter=500)
    init = random_init(d, 2, np.random.default_rng(11), constraint_matrix(d))
    fit = em_fit(d, 2, init, cfg)
    swapped = em_fit(d, 2, init.permuted([1, 0]), cfg)
    assert abs(fit.loglik - swapped.loglik) <= 1e-6
    assert adjusted_rand_index(fit.labels, swapped.labels) == 1.0
    assert np.allclose(fit.params.beta, swapped.params.beta[[1, 0]], atol=1e-6)


def test_fit_gating_intercept_only_matches_weighted_shares():
    d = make_dataset(n=20, q2=1, equal_T=False, seed=5)
    eta = np.random.default_rng(5).dirichlet(np.ones(3), size=d.n)
    alpha = fit_gating(Responsibilities(eta=eta), d)
    mass = d.T @ eta
    assert np.allclose(alpha[:, 0], np.log(mass / mass[0]), atol=1e-6)


def test_fit_gating_separated_covariate_stays_finite():
    rng = np.random.default_rng(2)
    subjects = []
    for i in range(20):
        w1 = float(i % 2)
        Y = rng.standard_normal((30, 3))
        subjects.append(SubjectRecord.from_observations(f"s{i:02d}", Y, np.array([1.0]), np.array([1.0, w1])))
    d = Dataset(subjects=subjects)
    eta = np.column_stack([1.0 - d.W[:, 1], d.W[:, 1]])
    alpha = fit_gating(Responsibilities(eta=eta), d)
    assert np.all(np.isfinite(alpha))
    assert np.allclose(softmax(d.W @ alpha.T, axis=1), eta, atol=1e-3)


def test_em_fit_fixed_gamma_keeps_projection(dataset, em_config):
    init = random_params(dataset, 2, seed=3)
    fit = em_fit(dataset, 2, init, em_config, fix_gamma=True)
    assert np.array_equal(fit.params.gamma, init.gamma)
    assert fit.fixed_gamma


def test_em_fit_rejects_wrong_K(dataset):
    with pytest.raises(DimensionMismatch):
        em_fit(dataset, 3, random_params(dataset, 2))


def test_em_fit_reports_non_convergence(dataset):
    fit = em_fit(dataset, 2, random_params(dataset, 2, seed=1), EmConfig(max_iter=1, tol=1e-15))
    assert fit.iterations == 1
    assert not fit.converged


def test_spectral_init_normalization(dataset):
    H = constraint_matrix(dataset)
    params = spectral_init(dataset, 3, H)
    assert np.isclose(params.gamma @ H @ params.gamma, 1.0)
    assert np.all(np.diff(params.beta[:, 0]) >= 0.0)
    assert np.all(params.alpha == 0.0)


def test_random_init_is_seeded(dataset):
    H = constraint_matrix(dataset)
    a = random_init(dataset, 2, np.random.default_rng(4), H)
    b = random_init(dataset, 2, np.random.default_rng(4), H)
    assert np.array_equal(a.gamma, b.gamma)
    assert np.array_equal(a.beta, b.beta)


def test_fit_with_restarts_is_deterministic(dataset, em_config):
    first = fit_with_restarts(dataset, 2, cfg=em_config)
    second = fit_with_restarts(dataset, 2, cfg=em_config)
    threaded = fit_with_restarts(dataset, 2, cfg=em_config.model_copy(update={"threads": 3}))
    assert first.loglik == second.loglik
    assert np.array_equal(first.labels, second.labels)
    assert threaded.loglik == first.loglik
    assert threaded.restart_index == first.restart_index


def test_fit_with_restarts_all_failed(dataset, em_config):
    with patch("capclust.mixture.em_fit", side_effect=EmptyCluster(2)), pytest.raises(AllRestartsFailed) as info:
        fit_with_restarts(dataset, 2, cfg=em_config)
    assert len(info.value.errors) == em_config.n_restarts + 1


def test_fit_with_restarts_recovers_structured_direction(simulated, em_config):
    d, truth = simulated
    fit = fit_with_restarts(d, 2, cfg=em_config.model_copy(update={"n_restarts": 5}))
    similarity = max(projection_similarity(fit.params.gamma, truth.projection(dim)) for dim in truth.structured_dims)
    assert similarity > 0.9


def test_single_cluster_fit(dataset, em_config):
    fit = fit_with_restarts(dataset, 1, cfg=em_config)
    assert fit.params.K == 1
    assert np.all(fit.labels == 0)
    assert np.isclose(fit.loglik, observed_loglik(dataset, fit.params))
    assert np.allclose(fit.resp.eta, 1.0)
