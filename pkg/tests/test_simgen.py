import numpy as np
import pytest
from pydantic import ValidationError

from capclust.models import SimConfig
from capclust.simgen import generate_dataset, random_orthonormal


def test_random_orthonormal():
    Q = random_orthonormal(5, np.random.default_rng(0))
    assert np.allclose(Q.T @ Q, np.eye(5))
    assert np.array_equal(random_orthonormal(1, np.random.default_rng(0)), [[1.0]])
    with pytest.raises(ValueError):
        random_orthonormal(0, np.random.default_rng(0))


def test_generate_dataset_shapes(sim_config):
    d, truth = generate_dataset(sim_config)
    assert d.n == sim_config.n
    assert d.p == sim_config.p
    assert d.x_names == ["intercept", "x1", "x2"]
    assert d.w_names == ["intercept", "w1"]
    assert np.all(d.T == sim_config.T)
    assert np.all(d.X[:, 0] == 1.0)
    assert set(np.unique(d.X[:, 1])) <= {0.0, 1.0}
    assert truth.log_eigenvalues.shape == (sim_config.n, sim_config.p)
    assert sorted(truth.memberships) == [2, 4]
    for labels in truth.memberships.values():
        assert labels.shape == (sim_config.n,)
        assert set(np.unique(labels)) <= {1, 2}


def test_generate_dataset_is_deterministic(sim_config):
    first, truth_a = generate_dataset(sim_config)
    second, truth_b = generate_dataset(sim_config)
    assert np.array_equal(first.S, second.S)
    assert np.array_equal(truth_a.Pi, truth_b.Pi)
    other, _ = generate_dataset(sim_config.model_copy(update={"seed": sim_config.seed + 1}))
    assert not np.array_equal(first.S, other.S)


def test_structured_log_eigenvalues_follow_expert_model(sim_config):
    d, truth = generate_dataset(sim_config)
    beta = truth.beta_for(2)
    labels = truth.memberships[2] - 1
    expected = np.einsum("iq,iq->i", d.X, beta[labels])
    assert np.allclose(truth.log_eigenvalues[:, 1], expected)


def test_truth_covariance_matches_sample_covariance():
    cfg = SimConfig(p=4, n=3, T=20000, structured_dims=[2], alpha_true=[[[0.0, 0.0]]],
                    beta_true=[[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]], seed=1)
    d, truth = generate_dataset(cfg)
    for i in range(d.n):
        Sigma = truth.covariance(i)
        relative = np.linalg.norm(d.S[i] - Sigma) / np.linalg.norm(Sigma)
        assert relative < 0.1


def test_intercept_only_gating():
    cfg = SimConfig(p=5, n=10, T=20, structured_dims=[1], alpha_true=[[[0.3, 0.0]]],
                    beta_true=[[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]], intercept_only_gating=True)
    d, _ = generate_dataset(cfg)
    assert d.q2 == 1
    assert d.w_names == ["intercept"]
    assert np.all(d.W == 1.0)


def test_partial_common_eigenstructure():
    cfg = SimConfig(p=6, n=5, T=20, structured_dims=[1, 2], eigenstructure="partial_common", shared_count=3)
    _, truth = generate_dataset(cfg)
    assert truth.subject_bases.shape == (5, 6, 6)
    for basis in truth.subject_bases:
        assert np.allclose(basis[:, :3], truth.Pi[:, :3])
        assert np.allclose(basis.T @ basis, np.eye(6))
    assert not np.allclose(truth.subject_bases[0][:, 3:], truth.Pi[:, 3:])


def test_student_t_noise_is_heavier_tailed():
    base = SimConfig(p=4, n=4, T=4000, structured_dims=[1], alpha_true=[[[0.0, 0.0]]],
                     beta_true=[[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]], seed=2)
    gaussian, truth = generate_dataset(base)
    heavy, _ = generate_dataset(base.model_copy(update={"noise": "student_t", "df": 4.0}))

    def kurtosis(d):
        Y = d.subjects[0].Y @ truth.Pi[:, 0]
        return np.mean(Y**4) / np.mean(Y**2) ** 2

    assert kurtosis(heavy) > kurtosis(gaussian)


def test_single_cluster_design():
    cfg = SimConfig(p=4, n=8, T=10, K=1, structured_dims=[2], alpha_true=[[]], beta_true=[[[0.0, 1.0, 0.0]]])
    _, truth = generate_dataset(cfg)
    assert np.all(truth.memberships[2] == 1)


def test_sim_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(p=4, structured_dims=[5], alpha_true=[[[0.0, 0.0]]], beta_true=[[[0.0] * 3, [0.0] * 3]])
    with pytest.raises(ValidationError):
        SimConfig(structured_dims=[2, 2])
    with pytest.raises(ValidationError):
        SimConfig(K=3)
