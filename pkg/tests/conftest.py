import numpy as np
import pytest

from capclust.models import Dataset, EmConfig, ModelParams, SimConfig, SubjectRecord
from capclust.simgen import generate_dataset


def make_dataset(n=12, p=4, T=30, q1=2, q2=2, seed=0, equal_T=True):
    """Random Gaussian subjects with Bernoulli and normal covariates"""
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        rows = T if equal_T else T + int(rng.integers(0, 10))
        scale = np.exp(0.5 * rng.normal(size=p))
        Y = rng.standard_normal((rows, p)) * scale
        x = np.concatenate([[1.0], rng.normal(size=q1 - 1)])
        w = np.concatenate([[1.0], rng.binomial(1, 0.5, size=q2 - 1).astype(float)])
        subjects.append(SubjectRecord.from_observations(f"s{i:02d}", Y, x, w))
    return Dataset(subjects=subjects)


def random_params(d, K, seed=0):
    rng = np.random.default_rng(seed)
    gamma = rng.standard_normal(d.p)
    gamma /= np.sqrt(gamma @ d.pooled @ gamma)
    beta = rng.normal(scale=0.5, size=(K, d.q1))
    alpha = rng.normal(scale=0.5, size=(K, d.q2))
    alpha[0] = 0.0
    return ModelParams(gamma=gamma, beta=beta, alpha=alpha)


@pytest.fixture
def dataset():
    return make_dataset()


@pytest.fixture
def em_config():
    return EmConfig(n_restarts=2, max_iter=200, tol=1e-8, seed=0)


@pytest.fixture
def sim_config():
    return SimConfig(p=6, n=60, T=80, K=2, structured_dims=[2, 4], seed=3)


@pytest.fixture
def simulated(sim_config):
    return generate_dataset(sim_config)
