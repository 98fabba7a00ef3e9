import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpsq.errors import ConfigError, InvalidScale, ModelError, SpectralRadiusError
from mpsq.model import (QueueModel, RenewalSpec, RoutingMatrix, ServiceSpec, compute_Q,
                        derived_params, heavy_traffic_sequence, load_model, model_from_dict,
                        neumann_Q, visit_count_covariance)

from conftest import P2


def test_Q_trivial():
    for K in (1, 3):
        np.testing.assert_array_equal(compute_Q(np.zeros((K, K))), np.eye(K))


def test_Q_neumann_oracle():
    Q = compute_Q(P2)
    np.testing.assert_allclose(Q, neumann_Q(P2), atol=1e-12)
    np.testing.assert_allclose(Q @ (np.eye(2) - P2.T), np.eye(2), atol=1e-12)


def test_Q_not_open():
    with pytest.raises(SpectralRadiusError):
        compute_Q(np.array([[1.0]]))
    with pytest.raises(ModelError):
        RoutingMatrix(np.array([[0.7, 0.5], [0.0, 0.0]]))


def test_single_class_gamma_reduction():
    # K=1, P=0: Gamma = alpha b + beta^2 a alpha^3
    beta, alpha = 0.8, 1.1
    m = QueueModel(np.array([alpha]), (ServiceSpec.exponential(1 / beta),), RoutingMatrix([[0.0]]),
                   interarrival=(RenewalSpec("erlang", 3.0),))
    dp = derived_params(m)
    a = (1 / 3) / alpha ** 2
    assert dp.Gamma == pytest.approx(alpha * beta ** 2 + beta ** 2 * a * alpha ** 3, rel=1e-12)
    assert dp.a[0] == pytest.approx(a)


def test_rho_definition(k3):
    dp = derived_params(k3)
    beta = np.array([s.mean for s in k3.services])
    lam = np.linalg.solve(np.eye(3) - k3.P.T, k3.alpha)
    assert dp.rho == pytest.approx(float(beta @ lam), rel=1e-12)
    assert dp.rho == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", ["k2", "k3"])
def test_var_L4_and_psd(name, request):
    dp = derived_params(request.getfixturevalue(name))
    lhs = dp.Lam - dp.Dalpha - dp.P.T @ dp.Lam @ dp.P
    np.testing.assert_allclose(lhs, np.tensordot(dp.lam, dp.H, axes=1), atol=1e-10)
    for Hk in dp.H:
        assert np.linalg.eigvalsh(Hk).min() >= -1e-10
    assert dp.Gamma >= 0 and dp.dstar > 0


def test_visit_covariance_algebra(k3):
    dp = derived_params(k3)
    B = visit_count_covariance(k3.P)
    lhs = np.tensordot(dp.alpha, B, axes=1)
    rhs = dp.Q @ np.tensordot(dp.lam, dp.H, axes=1) @ dp.Q.T
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_heavy_traffic_sequence(k2):
    models = heavy_traffic_sequence(k2, 0.5, [10, 20, 40])
    rhos = [derived_params(m).rho for m in models]
    np.testing.assert_allclose(rhos, [0.95, 0.975, 0.9875], atol=1e-12)
    for r, rho in zip([10, 20, 40], rhos):
        assert abs(r * (1 - rho) - 0.5) < 1e-12
    np.testing.assert_allclose(models[0].alpha, 0.95 * k2.alpha)
    same = heavy_traffic_sequence(k2, 0.0, [7])[0]
    np.testing.assert_array_equal(same.alpha, k2.alpha)
    with pytest.raises(InvalidScale):
        heavy_traffic_sequence(k2, 10.0, [10])


def test_heavy_traffic_initial_counts(k2):
    m = heavy_traffic_sequence(k2, 0.5, [40], zbar0=[0.4, 0.6])[0]
    np.testing.assert_array_equal(m.z0, [16, 24])


@pytest.mark.parametrize("spec", [
    ServiceSpec.exponential(2.0), ServiceSpec.erlang(3, 1.5),
    ServiceSpec.hyperexponential([0.3, 0.7], [0.5, 4.0]), ServiceSpec.uniform(0.5, 2.0),
])
def test_service_moments_match_samples(spec):
    rng = np.random.default_rng(11)
    x = spec.sample(rng, 200_000)
    assert x.min() > 0
    se = x.std() / np.sqrt(x.size)
    assert abs(x.mean() - spec.mean) < 4 * se
    assert abs(np.mean(x ** 2) - spec.moment(2)) < 4 * np.std(x ** 2) / np.sqrt(x.size)
    grid = np.linspace(0, 5 * spec.mean, 7)
    np.testing.assert_allclose(spec.cdf(grid), [np.mean(x <= g) for g in grid], atol=5e-3)


@pytest.mark.parametrize("spec", [ServiceSpec.erlang(2, 1.0), ServiceSpec.uniform(0.5, 1.5),
                                  ServiceSpec.hyperexponential([0.4, 0.6], [1.0, 3.0])])
def test_excess_law(spec):
    e = spec.excess()
    assert e.mean == pytest.approx(spec.moment(2) / (2 * spec.mean))
    x = e.sample(np.random.default_rng(3), 200_000)
    assert abs(x.mean() - e.mean) < 4 * x.std() / np.sqrt(x.size)
    assert ServiceSpec.exponential(2.0).excess() == ServiceSpec.exponential(2.0)


def test_renewal_scv():
    assert RenewalSpec().scv == 1.0
    assert RenewalSpec("erlang", 4).scv == pytest.approx(0.25)
    law = RenewalSpec("hyperexponential", 3.0).for_rate(2.0)
    assert law.mean == pytest.approx(0.5)
    assert law.variance / law.mean ** 2 == pytest.approx(3.0)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_model(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        model_from_dict({"K": 1, "alpha": [1.0]})
    with pytest.raises(ModelError):
        model_from_dict({"K": 1, "alpha": [1.0], "services": [{"family": "pareto"}], "routing": [[0]]})
    bad = tmp_path / "bad.yaml"
    bad.write_text("K: [1,\n")
    with pytest.raises(ConfigError):
        load_model(bad)


def test_load_rescales(k3):
    assert derived_params(k3).rho == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_random_models_identities(K, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((K, K))
    P *= rng.uniform(0.1, 0.9) / P.sum(axis=1, keepdims=True)
    m = QueueModel(rng.uniform(0.1, 1.0, K), tuple(ServiceSpec.exponential(r) for r in rng.uniform(0.5, 3, K)),
                   RoutingMatrix(P))
    dp = derived_params(m)
    np.testing.assert_allclose(dp.Q @ (np.eye(K) - P.T), np.eye(K), atol=1e-10)
    lhs = dp.Lam - dp.Dalpha - P.T @ dp.Lam @ P
    np.testing.assert_allclose(lhs, np.tensordot(dp.lam, dp.H, axes=1), atol=1e-10)
