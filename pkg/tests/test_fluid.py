import numpy as np
import pytest

from mpsq.errors import NotCritical
from mpsq.fluid import (FluidContext, build_Bes, build_Bes_dual, build_H_xi, convergence_to_invariant,
                        solve_fluid)
from mpsq.gridconv import GridFun, solve_volterra
from mpsq.measures import MeasureVector, TailFunction, excess_tail, measure_distance
from mpsq.model import ServiceSpec, derived_params, heavy_traffic_sequence

from conftest import single_class


def zero_state(ctx):
    return MeasureVector([TailFunction(ctx.h, np.zeros(ctx.n + 1))] * ctx.model.K)


def test_H_xi_zero_and_linear(k2_ctx):
    assert not build_H_xi(zero_state(k2_ctx), k2_ctx).values.any()
    xi = k2_ctx.state_from([1.0, 0.5], [ServiceSpec.uniform(0.5, 1.5)] * 2)
    xi2 = MeasureVector([c.scaled(2.0) for c in xi])
    np.testing.assert_allclose(build_H_xi(xi2, k2_ctx).values, 2 * build_H_xi(xi, k2_ctx).values)


def test_H_xi_limit_is_workload(k2, k2_ctx):
    dp = derived_params(k2)
    z0 = np.array([0.7, 1.2])
    xi = k2_ctx.state_from(z0, k2.initial_services)
    H = build_H_xi(xi, k2_ctx)
    assert H.values[-1] == pytest.approx(dp.workload0(z0), rel=1e-3)
    assert np.all(np.diff(H.values) >= -1e-15)


def test_Bes_single_class():
    m = single_class(rate=1.0, alpha=1.0)
    ctx = FluidContext(m, 1e-2, 40.0)
    Bes = build_Bes(ctx)
    e = excess_tail(m.services[0], 1e-2, 40.0)
    np.testing.assert_allclose(Bes.values, 1 - e.values, atol=1e-6)


@pytest.mark.parametrize("name", ["k2_ctx", "k3_ctx"])
def test_Bes_mean_and_dual(name, request):
    ctx = request.getfixturevalue(name)
    Bes = build_Bes(ctx)
    assert Bes.values[-1] == pytest.approx(1.0, abs=1e-4)
    mean = float(np.sum(1 - 0.5 * (Bes.values[1:] + Bes.values[:-1])) * ctx.h)
    assert mean == pytest.approx(ctx.dp.dstar, rel=5 * ctx.h)
    assert np.abs(Bes.values - build_Bes_dual(ctx).values).max() < 5 * ctx.h


def test_null_solution(k2_ctx):
    sol = solve_fluid(zero_state(k2_ctx), k2_ctx, [0.0, 1.0, 5.0])
    assert sol.null
    assert all(np.all(mu.mass() == 0) for mu in sol.mu)
    assert all(np.all(q.mass() == 0) for q in sol.Q)


def test_not_critical(k2):
    sub = heavy_traffic_sequence(k2, 0.5, [10])[0]
    ctx = FluidContext(sub)
    with pytest.raises(NotCritical):
        solve_fluid(ctx.invariant_state(1.0), ctx, [0.0, 1.0])


@pytest.mark.parametrize("name", ["k2_ctx", "k3_ctx"])
def test_invariant_state_is_fixed(name, request):
    ctx = request.getfixturevalue(name)
    c = 1.3
    xi = ctx.invariant_state(c)
    t_grid = np.linspace(0, 30, 7)
    sol = solve_fluid(xi, ctx, t_grid)
    # T(u) = c u when Ztilde stays at c M lambda
    assert np.abs(sol.T.values - c * ctx.x).max() <= ctx.h * 1e-3
    Qinv = ctx.lift_Q(c * ctx.dp.dstar)
    for mu, q in zip(sol.mu, sol.Q):
        assert measure_distance(mu, xi, ctx.h) <= 5 * ctx.h
        assert measure_distance(q, Qinv, ctx.h) <= 5 * ctx.h


def test_fluid_identities(k3_ctx):
    ctx = k3_ctx
    xi = ctx.state_from([1.0, 0.4, 0.8], [ServiceSpec.uniform(0.5, 1.5)] * 3)
    sol = solve_fluid(xi, ctx, np.linspace(0, 40, 9))
    # dT/du = e Ztilde
    Tdot = np.gradient(sol.T.values, ctx.h)
    ez = sol.Ztilde.sum(axis=1)
    assert np.abs(Tdot - ez).max() <= 10 * ctx.h * ez.max()
    # <1, Qbar> = Q Zbar
    for mu, q in zip(sol.mu, sol.Q):
        np.testing.assert_allclose(q.mass(), ctx.dp.Q @ mu.mass(), atol=5 * ctx.h)
    # workload conservation
    W_Q = [sol.workload_from_Q(q) for q in sol.Q]
    W_mu = [sol.workload_from_mu(m) for m in sol.mu]
    assert max(abs(w - sol.Wbar0) for w in W_Q + W_mu) < 0.01 * sol.Wbar0
    # Volterra residual
    from mpsq.gridconv import stieltjes_convolve
    from mpsq.fluid import build_Bes, build_H_xi
    resid = sol.T.values - build_H_xi(xi, ctx).values - stieltjes_convolve(sol.T, build_Bes(ctx)).values
    assert np.abs(resid).max() <= 10 * ctx.h * Tdot.max()


def test_T_matches_H_U(k2_ctx):
    from mpsq.gridconv import renewal_U, stieltjes_convolve

    xi = k2_ctx.state_from([1.0, 0.5], [ServiceSpec.uniform(0.5, 1.5)] * 2)
    H = build_H_xi(xi, k2_ctx)
    Bes = build_Bes(k2_ctx)
    T1 = solve_volterra(H, Bes)
    T2 = stieltjes_convolve(H, renewal_U(Bes))
    assert np.abs(T1.values - T2.values).max() < 10 * k2_ctx.h


def test_convergence_doubling(k2_ctx):
    ctx = k2_ctx
    laws = [ServiceSpec.uniform(0.5, 1.5)] * 2
    t_grid = np.linspace(0, 40, 5)
    one = convergence_to_invariant(ctx.state_from([1.0, 0.5], laws), ctx, t_grid)
    two = convergence_to_invariant(ctx.state_from([2.0, 1.0], laws), ctx, t_grid)
    assert two.Wbar0 == pytest.approx(2 * one.Wbar0)
    assert one.final_below() and two.final_below()


def test_convergence_invariant_series(k2_ctx):
    series = convergence_to_invariant(k2_ctx.invariant_state(0.8), k2_ctx, np.linspace(0, 20, 5))
    assert np.all(series.d_mu <= 5 * k2_ctx.h) and np.all(series.d_Q <= 5 * k2_ctx.h)
