import json

import numpy as np
import pytest

from capclust.components import (
    complement_basis,
    components_from_payload,
    components_payload,
    deflate,
    dfd,
    dfd_frame,
    extract_components,
    labels_frame,
    loadings_frame,
    orthonormal_basis,
    polar_frame,
    project_out,
    select_num_components,
)
from capclust.metrics import match_components, projection_similarity
from capclust.mixture import observed_loglik
from capclust.models import ComponentSet, Dataset, ModelParams, SimConfig, SubjectRecord
from capclust.simgen import generate_dataset
from capclust.utils.errors import (
    DegenerateProjections,
    DfDSingular,
    InvalidInput,
    NoComplementLeft,
    RawDataRequired,
)
from capclust.utils.helpers import dumps_json
from conftest import make_dataset, random_params


def _covariance_dataset(diagonals):
    subjects = [
        SubjectRecord(id=f"s{i}", x=[1.0], w=[1.0], S=np.diag(values), T=10) for i, values in enumerate(diagonals)
    ]
    return Dataset(subjects=subjects)


def test_dfd_single_projection_is_one(dataset):
    assert dfd([np.random.default_rng(0).standard_normal(dataset.p)], dataset) == 1.0


def test_dfd_of_common_eigenvectors_is_one():
    d = _covariance_dataset([[1.0, 2.0, 3.0], [4.0, 0.5, 1.0]])
    eye = np.eye(3)
    assert np.isclose(dfd([eye[:, 0], eye[:, 2]], d), 1.0, rtol=0.0, atol=1e-12)


def test_dfd_is_at_least_one_for_random_projections():
    d = make_dataset(n=8, p=5, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = int(rng.integers(2, 4))
        Gamma = list(rng.standard_normal((r, d.p)))
        assert dfd(Gamma, d) >= 1.0 - 1e-12


def test_dfd_singular_projection():
    d = _covariance_dataset([[1.0, 0.0, 1.0]])
    eye = np.eye(3)
    with pytest.raises(DfDSingular) as info:
        dfd([eye[:, 0], eye[:, 1]], d)
    assert info.value.subject == 0


def test_complement_basis_is_orthogonal():
    rng = np.random.default_rng(3)
    Gamma = list(rng.standard_normal((2, 6)))
    Q = complement_basis(Gamma)
    assert Q.shape == (6, 4)
    assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)
    assert np.allclose(np.column_stack(Gamma).T @ Q, 0.0, atol=1e-10)


def test_complement_basis_errors():
    eye = np.eye(2)
    with pytest.raises(NoComplementLeft):
        complement_basis([eye[:, 0], eye[:, 1]])
    with pytest.raises(DegenerateProjections):
        orthonormal_basis([np.array([1.0, 2.0, 0.0]), np.array([2.0, 4.0, 0.0])])
    with pytest.raises(InvalidInput):
        orthonormal_basis([])


def test_project_out_removes_directions():
    rng = np.random.default_rng(4)
    Y = rng.standard_normal((20, 5))
    Gamma = [rng.standard_normal(5)]
    residual = project_out(Y, Gamma)
    assert np.allclose(residual @ Gamma[0], 0.0, atol=1e-10)


def test_project_out_is_idempotent():
    rng = np.random.default_rng(6)
    Y = rng.standard_normal((25, 6))
    Gamma = [rng.standard_normal(6), rng.standard_normal(6)]
    once = project_out(Y, Gamma)
    assert np.allclose(project_out(once, Gamma), once, rtol=0.0, atol=1e-12)


def test_deflate_does_not_depend_on_projection_basis(dataset):
    rng = np.random.default_rng(7)
    g1, g2 = rng.standard_normal(dataset.p), rng.standard_normal(dataset.p)
    reduced1, Q1 = deflate(dataset, [g1, g2])
    reduced2, Q2 = deflate(dataset, [g1 + g2, g1 - g2])
    assert np.allclose(Q1 @ Q1.T, Q2 @ Q2.T, atol=1e-10)
    for S1, S2 in zip(reduced1.S, reduced2.S):
        assert np.allclose(Q1 @ S1 @ Q1.T, Q2 @ S2 @ Q2.T, atol=1e-10)

    params = random_params(reduced1, 2, seed=8)
    rotated = ModelParams(gamma=Q2.T @ Q1 @ params.gamma, beta=params.beta, alpha=params.alpha)
    assert np.isclose(observed_loglik(reduced1, params), observed_loglik(reduced2, rotated), rtol=1e-10)


def test_deflate_reduces_dimension(dataset):
    gamma = np.random.default_rng(5).standard_normal(dataset.p)
    reduced, Q = deflate(dataset, [gamma])
    assert reduced.p == dataset.p - 1
    assert np.allclose(reduced.S[0], Q.T @ dataset.S[0] @ Q)
    assert reduced.ids == dataset.ids


def test_deflate_requires_raw():
    d = _covariance_dataset([[1.0, 2.0, 3.0]])
    with pytest.raises(RawDataRequired):
        deflate(d, [np.array([1.0, 0.0, 0.0])])


def test_extract_components_in_original_space(simulated, em_config):
    d, _ = simulated
    cs = extract_components(d, 2, 2, em_config)
    assert cs.r >= 1
    assert cs.dfd_trace[0] == 1.0
    assert cs.accepted[0]
    H = d.pooled
    for gamma, fit in zip(cs.gammas, cs.fits):
        assert np.isclose(gamma @ H @ gamma, 1.0)
        assert np.isclose(fit.loglik, observed_loglik(d, fit.params))
    if cs.r == 2:
        assert abs(cs.gammas[0] @ cs.gammas[1]) <= 1e-6 * np.linalg.norm(cs.gammas[0]) * np.linalg.norm(cs.gammas[1])


def test_extract_components_is_deterministic(simulated, em_config):
    d, _ = simulated
    first = extract_components(d, 2, 2, em_config)
    second = extract_components(d, 2, 2, em_config)
    assert first.dfd_trace == second.dfd_trace
    for a, b in zip(first.gammas, second.gammas):
        assert np.array_equal(a, b)


def test_extract_components_argument_checks(dataset, em_config):
    with pytest.raises(InvalidInput):
        extract_components(dataset, 2, dataset.p, em_config)
    covariances = _covariance_dataset([[1.0, 2.0, 3.0], [2.0, 1.0, 3.0]])
    with pytest.raises(RawDataRequired):
        extract_components(covariances, 2, 2, em_config)


def test_extract_components_stops_at_rejected_component(simulated, em_config):
    d, _ = simulated
    cs = extract_components(d, 2, 3, em_config.model_copy(update={"dfd_threshold": 1.0}))
    # a threshold of exactly one rejects any second component
    assert cs.accepted[0]
    assert cs.r <= 2
    if cs.r == 2:
        assert not cs.accepted[1]


def test_select_num_components():
    cs = ComponentSet(K=2, dfd_trace=[1.0, 1.5, 2.5], accepted=[True, True, False])
    assert select_num_components(cs, 2.0) == 2
    assert select_num_components(cs, 3.0) == 3
    with pytest.raises(InvalidInput):
        select_num_components(ComponentSet(K=2))


def test_components_payload_round_trip(simulated, em_config):
    d, _ = simulated
    cs = extract_components(d, 2, 2, em_config)
    payload = json.loads(dumps_json(components_payload(cs)))
    restored = components_from_payload(payload)
    assert restored.dfd_trace == cs.dfd_trace
    assert restored.accepted == cs.accepted
    for a, b in zip(restored.fits, cs.fits):
        assert np.array_equal(a.params.gamma, b.params.gamma)
        assert np.array_equal(a.labels, b.labels)
        assert a.loglik == b.loglik


def test_component_frames(simulated, em_config):
    dataset, _ = simulated
    cs = extract_components(dataset, 2, 2, em_config)
    labels = labels_frame(cs, dataset)
    assert list(labels.columns) == ["subject", "component", "cluster", "responsibility"]
    assert set(labels["cluster"]) <= {1, 2}
    assert len(labels) == dataset.n * cs.r
    polar = polar_frame(cs, dataset)
    assert polar["angle"].between(0.0, 2.0 * np.pi, inclusive="left").all()
    assert len(loadings_frame(cs)) == dataset.p * cs.r
    assert dfd_frame(cs)["component"].tolist() == list(range(1, cs.r + 1))


@pytest.mark.slow
def test_components_recover_both_structured_dimensions(em_config):
    d, truth = generate_dataset(SimConfig(p=10, n=300, T=100, seed=11))
    cs = extract_components(d, 2, 3, em_config.model_copy(update={"n_restarts": 5}))
    matched = match_components(cs.accepted_gammas, truth)
    assert projection_similarity(cs.accepted_gammas[matched[2]], truth.projection(2)) > 0.98
    assert projection_similarity(cs.accepted_gammas[matched[4]], truth.projection(4)) > 0.9


def _mean_recovery(sim: SimConfig, em_config, seeds, dims=(2, 4)):
    cfg = em_config.model_copy(update={"n_restarts": 5})
    scores = {dim: [] for dim in dims}
    for seed in seeds:
        d, truth = generate_dataset(sim.model_copy(update={"seed": seed}))
        cs = extract_components(d, 2, 2, cfg)
        assert cs.r >= 1
        for dim in dims:
            scores[dim].append(max(projection_similarity(g, truth.projection(dim)) for g in cs.gammas))
    return {dim: float(np.mean(values)) for dim, values in scores.items()}


@pytest.mark.slow
@pytest.mark.parametrize(
    "design",
    [{"misspec": "variance_interaction"}, {"misspec": "both_interactions"}, {"noise": "student_t"}],
    ids=["variance_interaction", "both_interactions", "student_t"],
)
def test_recovery_is_robust_to_misspecified_designs(em_config, design):
    sim = SimConfig(p=12, n=100, T=100, **design)
    recovery = _mean_recovery(sim, em_config, seeds=range(3))
    assert recovery[2] >= 0.95
    assert recovery[4] >= 0.9


@pytest.mark.slow
def test_partially_common_eigenstructure_recovers_only_shared_direction(em_config):
    sim = SimConfig(p=12, n=100, T=100, eigenstructure="partial_common", shared_count=3)
    cfg = em_config.model_copy(update={"n_restarts": 5})
    shared, unshared = [], []
    for seed in range(3):
        d, truth = generate_dataset(sim.model_copy(update={"seed": seed}))
        cs = extract_components(d, 2, 2, cfg)
        shared.append(max(projection_similarity(g, truth.projection(2)) for g in cs.gammas))
        unshared.extend(projection_similarity(g, truth.projection(4)) for g in cs.gammas)
    assert np.mean(shared) >= 0.95
    assert max(unshared) < 0.8
