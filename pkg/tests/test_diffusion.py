import math

import numpy as np
import pytest

from mpsq.diffusion import (conjecture_check, limit_ADZ, limit_measures, reflect, routing_drivers,
                            simulate_bm, simulate_rbm)
from mpsq.errors import GridMismatch
from mpsq.measures import chi, integrate
from mpsq.model import QueueModel, RoutingMatrix, ServiceSpec, derived_params

from conftest import single_class


def test_degenerate_rbm():
    p = simulate_rbm(2.0, 0.5, 0.0, 1e-3, 10.0, rng=0)
    np.testing.assert_allclose(p.values[0], np.maximum(2.0 - 0.5 * p.times, 0.0), atol=1e-12)
    p = simulate_rbm(1.0, -0.3, 0.0, 1e-3, 5.0, rng=0)
    np.testing.assert_allclose(p.values[0], 1.0 + 0.3 * p.times, atol=1e-12)


def test_rbm_nonnegative_and_complementary():
    dt, sigma = 1e-3, 0.7
    p = simulate_rbm(0.5, sigma, 2.0, dt, 2.0, rng=3, n_paths=50, bridge=False)
    assert p.values.min() >= 0
    dL = np.diff(p.regulator, axis=1)
    assert dL.min() >= 0
    assert np.all(p.values[:, 1:][dL > 0] <= dt * abs(sigma) + 1e-12)


def test_rbm_bridge_nonnegative():
    p = simulate_rbm(0.0, 0.0, 1.0, 1e-2, 1.0, rng=4, n_paths=1000)
    assert p.values.min() >= 0 and np.diff(p.regulator, axis=1).min() >= 0


def test_rbm_variance_sigma_zero():
    Gamma = 1.5
    p = simulate_rbm(0.0, 0.0, Gamma, 1e-2, 1.0, rng=5, n_paths=20_000)
    w = p.values[:, -1]
    target = Gamma * (1 - 2 / math.pi)
    se = np.std((w - w.mean()) ** 2) / math.sqrt(w.size)
    assert abs(w.var() - target) < 4 * se


def test_bm_covariance():
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    bm = simulate_bm(np.zeros(2), cov, 0.1, 1.0, rng=0, n_paths=20_000)
    end = bm.values[:, -1, :]
    np.testing.assert_allclose(np.cov(end.T), cov, atol=0.05)


def test_reflect_plain():
    W, L = reflect(np.array([0.0, -1.0, -0.5, -2.0]), 0.5)
    np.testing.assert_allclose(W[0], [0.5, 0.0, 0.5, 0.0])
    np.testing.assert_allclose(L[0], [0.0, 0.5, 0.5, 1.5])


def test_limit_measures(k2_ctx):
    W = np.array([0.0, 0.5, 2.0])
    lp = limit_measures(W, [0, 1, 2], k2_ctx)
    assert np.all(lp.mu[0].mass() == 0) and np.all(lp.Q[0].mass() == 0)
    dp = k2_ctx.dp
    for w, q, z, g in zip(W, lp.Q, lp.Z, lp.gamma):
        np.testing.assert_allclose(q.mass(), dp.Q @ dp.lift_mass * w, atol=5 * k2_ctx.h * max(w, 1))
        assert integrate(chi(1), g) == pytest.approx(w, abs=5 * k2_ctx.h * max(w, 1))
    # linear in W
    np.testing.assert_allclose(lp.mu[2][0].values, 4 * lp.mu[1][0].values)


def test_limit_ADZ_identity(k3):
    dp = derived_params(k3)
    zbar0 = np.diag(dp.M) * dp.lam
    E, Phi = routing_drivers(dp, 1e-2, 1.0, rng=1)
    W = simulate_rbm(dp.workload0(zbar0), 0.5, dp.Gamma, 1e-2, 1.0, rng=2).values[0]
    out = limit_ADZ(E, Phi, W, dp, zbar0)
    np.testing.assert_allclose(out.A - out.D + zbar0, out.Z, atol=1e-10)
    # zero drivers, constant W
    zero = np.zeros_like(E)
    const = limit_ADZ(zero, [zero] * dp.K, np.full(E.shape[0], 0.7), dp, zbar0)
    np.testing.assert_allclose(const.D, np.tile(dp.Q @ (zbar0 - dp.lift_mass * 0.7), (E.shape[0], 1)))
    np.testing.assert_allclose(const.Z[0], dp.lift_mass * 0.7)
    with pytest.raises(GridMismatch):
        limit_ADZ(E, Phi[:1], W, dp, zbar0)


def test_conjecture_check(k2, k3):
    for m in (k2, k3):
        assert conjecture_check(derived_params(m))["passed"]
    dp = derived_params(single_class(rate=1.0, alpha=1.0))
    assert dp.R == pytest.approx(1.0)
    np.testing.assert_allclose(dp.lift_mass, dp.Delta_F)
    rng = np.random.default_rng(8)
    P = np.array([[0.0, 0.4], [0.3, 0.1]])
    m = QueueModel(rng.uniform(0.2, 1, 2), (ServiceSpec.erlang(2, 3.0), ServiceSpec.uniform(0.2, 1.0)),
                   RoutingMatrix(P))
    dp = derived_params(m)
    assert conjecture_check(dp)["max_error"] < 1e-9
    np.testing.assert_allclose(dp.Delta_F, 2 * np.diag(dp.M) * dp.lam / float(np.diag(dp.M2) @ dp.lam))
