import numpy as np
import pytest

from capclust.models import ComponentSet, FitResult, ModelParams, Responsibilities, SimConfig
from capclust.selection import bic, bic_report, parameter_count, select_num_clusters
from capclust.simgen import generate_dataset
from capclust.utils.errors import InvalidInput, NoAcceptedComponents


def _fit(d, K, loglik):
    params = ModelParams(gamma=np.ones(d.p), beta=np.zeros((K, d.q1)), alpha=np.zeros((K, d.q2)))
    eta = np.full((d.n, K), 1.0 / K)
    return FitResult(
        params=params,
        resp=Responsibilities(eta=eta),
        labels=np.zeros(d.n, dtype=int),
        loglik=loglik,
        trace=[loglik],
        iterations=1,
        converged=True,
    )


def _set(d, K, logliks, accepted=None):
    fits = [_fit(d, K, value) for value in logliks]
    return ComponentSet(
        K=K,
        gammas=[f.params.gamma for f in fits],
        fits=fits,
        dfd_trace=[1.0] * len(fits),
        accepted=accepted if accepted is not None else [True] * len(fits),
    )


def test_parameter_count():
    assert parameter_count(2, 3, 2, 50) == 58
    assert parameter_count(1, 3, 2, 50) == 53


def test_bic(dataset):
    fit = _fit(dataset, 2, -100.0)
    M = parameter_count(2, dataset.q1, dataset.q2, dataset.p)
    assert np.isclose(bic(fit, dataset), M * np.log(dataset.total_T) + 200.0)


def test_bic_report_averages_accepted_components(dataset):
    sets = {
        1: _set(dataset, 1, [-500.0]),
        2: _set(dataset, 2, [-300.0, -320.0, -900.0], accepted=[True, True, False]),
    }
    report = bic_report(sets, dataset)
    assert len(report.per_component[2]) == 2
    assert np.isclose(report.average[2], np.mean([bic(f, dataset) for f in sets[2].accepted_fits]))
    assert report.chosen_K == 2


def test_bic_report_skips_K_without_accepted_components(dataset):
    sets = {1: _set(dataset, 1, [-500.0]), 2: _set(dataset, 2, [-100.0], accepted=[False])}
    report = bic_report(sets, dataset)
    assert report.chosen_K == 1
    assert 2 not in report.average
    assert report.warnings == ["K=2 skipped: no accepted components"]


def test_bic_report_needs_an_accepted_component(dataset):
    with pytest.raises(NoAcceptedComponents):
        bic_report({2: _set(dataset, 2, [-100.0], accepted=[False])}, dataset)


def test_select_num_clusters_range_check(dataset, em_config):
    with pytest.raises(InvalidInput):
        select_num_clusters(dataset, (3, 2), em_config)
    with pytest.raises(InvalidInput):
        select_num_clusters(dataset, (1, dataset.n + 1), em_config)


def test_select_num_clusters_prefers_true_K(simulated, em_config):
    d, _ = simulated
    sets = {}
    report = select_num_clusters(d, (1, 3), em_config, r_max=1, component_sets=sets)
    assert report.chosen_K == 2
    assert sorted(sets) == [1, 2, 3]
    threaded = select_num_clusters(d, (1, 3), em_config.model_copy(update={"threads": 3}), r_max=1)
    assert threaded.average == report.average


@pytest.mark.slow
def test_select_num_clusters_recovers_true_K_in_most_replications(em_config):
    chosen = []
    for seed in range(8):
        d, _ = generate_dataset(SimConfig(p=6, n=100, T=100, seed=seed))
        chosen.append(select_num_clusters(d, (1, 3), em_config, r_max=2).chosen_K)
    assert chosen.count(2) >= 6
