import numpy as np
import pytest
from scipy import stats

from mpsq.errors import GridMismatch, NonConvergence, NotIncreasing
from mpsq.gridconv import (GridFun, cdf_diag, compute_calB, constant, identity, invert_monotone,
                           matrix_measure_moment, renewal_U, solve_volterra, stieltjes_convolve)
from mpsq.model import ServiceSpec, derived_params

from conftest import P2


def exp_cdf(h, n, rate=1.0):
    return GridFun(h, 1 - np.exp(-rate * h * np.arange(n + 1)), monotone=True)


def test_constant_times_G():
    h, n = 0.01, 500
    G = cdf_diag([ServiceSpec.exponential(1.0), ServiceSpec.uniform(0.5, 1.5)], h, n)
    C = np.array([[1.0, 2.0], [0.5, -1.0]])
    out = stieltjes_convolve(constant(h, n, C), G)
    np.testing.assert_allclose(out.values, C @ G.values, atol=1e-12)
    np.testing.assert_allclose(stieltjes_convolve(identity(h, n, 2), G).values, G.values, atol=1e-12)


def test_exponential_convolution_is_erlang():
    errs = []
    for h in (0.02, 0.01):
        n = int(20 / h)
        F = exp_cdf(h, n)
        out = stieltjes_convolve(F, F)
        errs.append(np.abs(out.values - stats.gamma(2).cdf(F.grid)).max())
    assert errs[0] < 0.02 * 1.0
    assert errs[1] <= errs[0] / 2 + 1e-12


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        stieltjes_convolve(exp_cdf(0.01, 10), exp_cdf(0.02, 10))


def test_associativity():
    rng = np.random.default_rng(0)
    h, n = 0.01, 800
    fs = []
    for _ in range(3):
        rate = rng.uniform(0.5, 2)
        fs.append(exp_cdf(h, n, rate))
    a = stieltjes_convolve(stieltjes_convolve(fs[0], fs[1]), fs[2])
    b = stieltjes_convolve(fs[0], stieltjes_convolve(fs[1], fs[2]))
    assert np.abs(a.values - b.values).max() < 5 * h


def test_calB_trivial():
    h, n = 0.01, 100
    B = cdf_diag([ServiceSpec.exponential(1.0)] * 2, h, n)
    np.testing.assert_array_equal(compute_calB(B, np.zeros((2, 2))).values, identity(h, n, 2).values)


def test_calB_fixed_point_and_nonconvergence():
    h, n = 0.01, 2000
    B = cdf_diag([ServiceSpec.exponential(1.0), ServiceSpec.exponential(0.875)], h, n)
    cB = compute_calB(B, P2)
    BPt = GridFun(h, B.values @ P2.T, monotone=True)
    resid = cB.values - identity(h, n, 2).values - stieltjes_convolve(BPt, cB).values
    assert np.abs(resid).max() < 1e-10 + 5 * h
    with pytest.raises(NonConvergence):
        compute_calB(B, P2, max_terms=2)


@pytest.mark.parametrize("fixture", ["k2", "k3"])
def test_visit_kernel_moments(fixture, request):
    m = request.getfixturevalue(fixture)
    dp = derived_params(m)
    h = 1e-2
    n = int(80 * max(s.mean for s in m.services) / h)
    B = cdf_diag(m.services, h, n)
    BV = stieltjes_convolve(compute_calB(B, m.P), B)
    Q, M = dp.Q, dp.M
    rel = lambda a, b: np.abs(a - b).max() / np.abs(b).max()
    assert rel(matrix_measure_moment(BV, 0, total=Q), Q) < 5 * h
    assert rel(matrix_measure_moment(BV, 1), Q @ M @ Q) < 5 * h
    assert rel(matrix_measure_moment(BV, 2), Q @ (dp.M2 + 2 * M @ Q @ m.P.T @ M) @ Q) < 5 * h


def test_moment_of_probability_cdf():
    F = exp_cdf(0.01, 3000)
    assert matrix_measure_moment(F, 0) == pytest.approx(1.0, abs=1e-12)


def test_renewal_poisson():
    for rate in (0.5, 2.0):
        h = 0.01
        F = exp_cdf(h, 2000, rate)
        U = renewal_U(F)
        assert U.values[0] == 1.0
        assert np.all(np.diff(U.values) >= 0)
        assert np.abs(U.values - (1 + rate * F.grid)).max() < 10 * h * rate


def test_renewal_zero_and_elementary():
    h = 0.01
    U = renewal_U(constant(h, 100, 0.0))
    np.testing.assert_array_equal(U.values, 1.0)
    spec = ServiceSpec.uniform(0.5, 1.5)
    n = int(40 / h)
    F = GridFun(h, spec.cdf(h * np.arange(n + 1)), monotone=True)
    U = renewal_U(F)
    assert U.values[-1] / (n * h) == pytest.approx(1 / spec.mean, rel=0.02)


def test_volterra_zero_kernel():
    h = 0.01
    H = GridFun(h, np.sin(h * np.arange(201)))
    np.testing.assert_allclose(solve_volterra(H, constant(h, 200, 0.0)).values, H.values)


def test_volterra_dual_route():
    h, n = 0.01, 1500
    F = exp_cdf(h, n, 1.3)
    H = GridFun(h, h * np.arange(n + 1))
    T1 = solve_volterra(H, F)
    T2 = stieltjes_convolve(H, renewal_U(F))
    assert np.abs(T1.values - T2.values).max() < 10 * h
    resid = T1.values - H.values - stieltjes_convolve(T1, F).values
    assert np.abs(resid).max() < 10 * h * 1.3 * (1 + 1.3 * n * h)


def test_invert_monotone():
    h, n = 0.01, 300
    x = h * np.arange(n + 1)
    S = invert_monotone(GridFun(h, 2 * x))
    np.testing.assert_allclose(S.values, S.grid / 2, atol=1e-12)
    S = invert_monotone(GridFun(h, x))
    np.testing.assert_allclose(S.values, S.grid, atol=1e-12)
    rng = np.random.default_rng(4)
    T = GridFun(h, np.concatenate([[0], np.cumsum(rng.uniform(0.2, 3, n) * h)]))
    S = invert_monotone(T)
    back = np.interp(T.values[T.values <= S.grid[-1]], S.grid, S.values)
    assert np.abs(back - x[: back.size]).max() <= h
    with pytest.raises(NotIncreasing):
        invert_monotone(GridFun(h, np.zeros(5)))
