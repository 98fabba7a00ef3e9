"""Fluid model solutions computed in cumulative-service coordinates.

Every object is first built as a function of u, the cumulative service
per job, where the dynamics are plain convolutions. Time is recovered
at the end from T(u), the time at which cumulative service reaches u,
which solves the renewal equation T = H^xi + B_s^e * T.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import HorizonTooShort, MassDeficit, NotCritical
from .gridconv import (GridFun, cdf_diag, compute_calB, invert_monotone, solve_volterra,
                       stieltjes_convolve)
from .measures import DEFAULT_H, MeasureVector, TailFunction, excess_tail, lifting_map, measure_distance
from .model import DerivedParams, QueueModel, derived_params

CRITICAL_TOL = 1e-9
BES_MASS_TOL = 1e-3
DEFAULT_EPS = 0.05


def default_x_max(model: QueueModel) -> float:
    return 80.0 * max(s.mean for s in model.services)


class FluidContext:
    """Grid objects shared by every fluid computation for one model."""

    def __init__(self, model: QueueModel, h: float = DEFAULT_H, x_max: float | None = None,
                 dp: DerivedParams | None = None):
        self.model = model
        self.dp = dp if dp is not None else derived_params(model)
        self.h = h
        self.x_max = default_x_max(model) if x_max is None else x_max
        self.n = n = int(round(self.x_max / h))
        self.x = h * np.arange(n + 1)
        K = model.K
        self.B = cdf_diag(model.services, h, n)
        self.calB = compute_calB(self.B, model.P)
        self.nu_e = [excess_tail(s, h, self.x_max) for s in model.services]
        Ve = np.zeros((n + 1, K, K))
        for k, t in enumerate(self.nu_e):
            Ve[:, k, k] = 1.0 - t.values
        self.Ve = GridFun(h, Ve, monotone=True)
        # distribution functions of calB * V and calB * V^e
        self.BV = stieltjes_convolve(self.calB, self.B)
        self.BVe = stieltjes_convolve(self.calB, self.Ve)
        self.exit = np.ones(K) @ (np.eye(K) - model.P.T)
        self.sf = 1.0 - np.diagonal(self.B.values, axis1=1, axis2=2)

    def tail_of(self, F: GridFun, weights) -> np.ndarray:
        """x -> (F-measure)([x, inf)) weights, with the total taken at the grid end."""
        v = F.values @ weights
        return v[-1] - v

    def kernel(self) -> np.ndarray:
        """K(z) = (calB * V)(I(z)) alpha on the grid."""
        return self.tail_of(self.BV, self.dp.alpha)

    def invariant_Q_tail(self) -> np.ndarray:
        """Tail of (calB * V^e) M lambda."""
        dp = self.dp
        return self.tail_of(self.BVe, np.diag(dp.M) * dp.lam)

    def lift(self, w: float) -> MeasureVector:
        return lifting_map(w, self.dp, self.nu_e)

    def lift_Q(self, w: float) -> MeasureVector:
        tails = self.invariant_Q_tail() * (w / self.dp.dstar)
        return MeasureVector([TailFunction(self.h, tails[:, k]) for k in range(self.model.K)])

    def invariant_state(self, c: float) -> MeasureVector:
        """xi = c M Lambda nu^e."""
        coef = c * np.diag(self.dp.M) * self.dp.lam
        return MeasureVector([t.scaled(a) for t, a in zip(self.nu_e, coef)])

    def state_from(self, counts, specs) -> MeasureVector:
        """xi_k = counts_k * (law of specs_k) as gridded tails."""
        return MeasureVector([TailFunction(self.h, c * s.sf(self.x)) for c, s in zip(counts, specs)])


def _xi_tails(xi: MeasureVector, ctx: FluidContext) -> np.ndarray:
    cols = []
    for comp in xi:
        if not isinstance(comp, TailFunction):
            comp = comp.to_tail(ctx.h, ctx.n)
        cols.append(comp.padded(ctx.n).values)
    return np.stack(cols, axis=1)


def _calB_xi_tail(xi_tail: np.ndarray, ctx: FluidContext) -> np.ndarray:
    """(calB * xi)(I(x)) for all grid x."""
    mass = xi_tail[0]
    cdf = GridFun(ctx.h, mass - xi_tail, monotone=True)
    conv = stieltjes_convolve(ctx.calB, cdf).values
    return ctx.calB.values[-1] @ mass - conv


def build_H_xi(xi: MeasureVector, ctx: FluidContext) -> GridFun:
    """H^xi(t) = e(I - P') int_0^t (calB * xi)(I(y)) dy."""
    tail = _calB_xi_tail(_xi_tails(xi, ctx), ctx) @ ctx.exit
    cum = np.concatenate([[0.0], np.cumsum(0.5 * ctx.h * (tail[1:] + tail[:-1]))])
    return GridFun(ctx.h, cum, monotone=True)


def build_Bes(ctx: FluidContext) -> GridFun:
    """B_s^e(u) = e(I - P')(calB * V^e)([0, u]) M lambda."""
    dp = ctx.dp
    v = ctx.BVe.values @ (np.diag(dp.M) * dp.lam) @ ctx.exit
    deficit = abs(dp.rho - v[-1])
    if deficit > BES_MASS_TOL:
        raise MassDeficit(f"B_s^e misses {deficit:.2e} of its mass on the grid")
    return GridFun(ctx.h, v, monotone=True)


def build_Bes_dual(ctx: FluidContext) -> GridFun:
    """The same function as the integral of e(I - P')(calB * V)(I(y)) alpha."""
    k = ctx.kernel() @ ctx.exit
    cum = np.concatenate([[0.0], np.cumsum(0.5 * ctx.h * (k[1:] + k[:-1]))])
    return GridFun(ctx.h, cum, monotone=True)


def workload0(xi: MeasureVector, ctx: FluidContext) -> float:
    """<chi, e xi> + e M P' Q Zbar(0)."""
    from .measures import chi, integrate

    dp = ctx.dp
    z0 = np.array([c.mass() for c in xi])
    first = sum(integrate(chi(1), c) for c in xi)
    return float(first + np.ones(dp.K) @ dp.M @ dp.P.T @ dp.Q @ z0)


def _shifted_stieltjes(F: np.ndarray, dG: np.ndarray, m: int) -> np.ndarray:
    """x_i -> int_[0, u_m] F(x_i + u_m - s) dG(s) for every grid x_i.

    F has shape (N+1, K) on the x-grid (zero past its end); dG has shape
    (N+1,) or (N+1, K) holding the increments of the integrator, dG[0]
    being its jump at 0.
    """
    n = F.shape[0] - 1
    Fp = np.concatenate([F, np.zeros((m + 1,) + F.shape[1:])])
    out = Fp[m: m + n + 1] * (dG[0] if dG.ndim == 1 else dG[0][None, :])
    if m == 0:
        return out
    Fmid = 0.5 * (Fp[:-1] + Fp[1:])
    inc = dG[1: m + 1]
    if inc.ndim == 1:
        inc = inc[:, None]
    conv = fftconvolve(Fmid[: n + m], inc, mode="full", axes=0)
    return out + conv[m - 1: m - 1 + n + 1]


@dataclass
class FluidSolution:
    ctx: FluidContext
    null: bool
    T: GridFun | None
    Sbar: GridFun | None
    Ztilde: np.ndarray  # (N+1, K) in u-coordinates
    Atilde: np.ndarray | None
    Wbar0: float
    t_grid: np.ndarray
    u_grid: np.ndarray
    mu: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    _xi_tail: np.ndarray | None = None
    _BXi: np.ndarray | None = None

    def Zbar(self, t) -> np.ndarray:
        """Fluid queue length at time t."""
        if self.null:
            return np.zeros(self.ctx.model.K)
        u = float(self.Sbar.at(t))
        return np.array([np.interp(u, self.ctx.x, self.Ztilde[:, k]) for k in range(self.ctx.model.K)])

    def _Q_at_index(self, m: int) -> np.ndarray:
        ctx = self.ctx
        dT = np.diff(self.T.values, prepend=0.0)
        BXi = np.concatenate([self._BXi, np.zeros((m + 1, ctx.model.K))])[m: m + ctx.n + 1]
        return BXi + _shifted_stieltjes(ctx.kernel(), dT, m)

    def _mu_at_index(self, m: int) -> np.ndarray:
        ctx = self.ctx
        dA = np.diff(self.Atilde, axis=0, prepend=np.zeros((1, ctx.model.K)))
        xi = np.concatenate([self._xi_tail, np.zeros((m + 1, ctx.model.K))])[m: m + ctx.n + 1]
        return xi + _shifted_stieltjes(ctx.sf, dA, m)

    def _blend(self, fn, u: float) -> np.ndarray:
        h = self.ctx.h
        i = min(int(np.floor(u / h)), self.ctx.n - 1)
        w = u / h - i
        lo = fn(i)
        return lo if w < 1e-12 else (1 - w) * lo + w * fn(i + 1)

    def Q_at_u(self, u: float) -> MeasureVector:
        tails = np.maximum(self._blend(self._Q_at_index, u), 0.0)
        return MeasureVector([TailFunction(self.ctx.h, tails[:, k]) for k in range(tails.shape[1])])

    def mu_at_u(self, u: float) -> MeasureVector:
        tails = np.maximum(self._blend(self._mu_at_index, u), 0.0)
        return MeasureVector([TailFunction(self.ctx.h, tails[:, k]) for k in range(tails.shape[1])])

    def workload_from_Q(self, Qv: MeasureVector) -> float:
        """e(I - P') <chi, Q>."""
        from .measures import chi, integrate

        return float(sum(c * integrate(chi(1), q) for c, q in zip(self.ctx.exit, Qv)))

    def workload_from_mu(self, mu: MeasureVector) -> float:
        """<chi, e mu> + e M Q P' Zbar."""
        from .measures import chi, integrate

        dp = self.ctx.dp
        z = mu.mass()
        return float(sum(integrate(chi(1), c) for c in mu) + np.ones(dp.K) @ dp.M @ dp.Q @ dp.P.T @ z)


def solve_fluid(xi: MeasureVector, ctx: FluidContext, t_grid) -> FluidSolution:
    """Fluid path from initial state xi, sampled at the times in t_grid."""
    t_grid = np.asarray(t_grid, dtype=float)
    K = ctx.model.K
    xi_tail = _xi_tails(xi, ctx)
    if not np.any(xi_tail[0] > 0):
        zero = MeasureVector([TailFunction(ctx.h, np.zeros(ctx.n + 1))] * K)
        return FluidSolution(ctx, True, None, None, np.zeros((ctx.n + 1, K)), None, 0.0,
                             t_grid, np.zeros_like(t_grid), [zero] * len(t_grid), [zero] * len(t_grid))
    if abs(ctx.dp.rho - 1.0) > CRITICAL_TOL:
        raise NotCritical(f"fluid pipeline needs rho = 1, got {ctx.dp.rho!r}")
    H = build_H_xi(xi, ctx)
    Bes = build_Bes(ctx)
    T = solve_volterra(H, Bes)
    BXi = _calB_xi_tail(xi_tail, ctx)
    # Ztilde = (I - P') <1, Qtilde>
    mass_Q = _mass_path(BXi, GridFun(ctx.h, ctx.kernel()), T)
    Ztilde = mass_Q @ (np.eye(K) - ctx.model.P)
    dp = ctx.dp
    # total arrivals in u-coordinates: lambda T + Q P' (Zbar(0) - Ztilde)
    Atilde = np.outer(T.values, dp.lam) + (xi_tail[0] - Ztilde) @ (dp.Q @ dp.P.T).T
    if t_grid.size and t_grid.max() > T.values[-1]:
        raise HorizonTooShort(f"u-grid reaches t = {T.values[-1]:.3g} < {t_grid.max():.3g}; raise x_max")
    Sbar = invert_monotone(T, t_max=T.values[-1])
    u_grid = np.interp(t_grid, T.values, ctx.x)
    sol = FluidSolution(ctx, False, T, Sbar, Ztilde, Atilde, workload0(xi, ctx), t_grid, u_grid,
                        _xi_tail=xi_tail, _BXi=BXi)
    sol.mu = [sol.mu_at_u(u) for u in u_grid]
    sol.Q = [sol.Q_at_u(u) for u in u_grid]
    return sol


def _mass_path(BXi: np.ndarray, kern: GridFun, T: GridFun) -> np.ndarray:
    """<1, Qtilde(u)> = (calB * xi)(I(u)) + (K^0 * T)(u)."""
    return BXi + stieltjes_convolve(kern, T).values


@dataclass
class ConvergenceSeries:
    t: np.ndarray
    d_mu: np.ndarray
    d_Q: np.ndarray
    Wbar0: float

    def final_below(self, eps: float = DEFAULT_EPS) -> bool:
        return bool(self.d_mu[-1] <= eps and self.d_Q[-1] <= eps)


def convergence_to_invariant(xi: MeasureVector, ctx: FluidContext, t_grid) -> ConvergenceSeries:
    """Distances of mu-bar(t) and Q-bar(t) from the lifted fluid workload."""
    sol = solve_fluid(xi, ctx, t_grid)
    mu_inf = ctx.lift(sol.Wbar0)
    Q_inf = ctx.lift_Q(sol.Wbar0)
    d_mu = np.array([measure_distance(m, mu_inf, ctx.h) for m in sol.mu])
    d_Q = np.array([measure_distance(q, Q_inf, ctx.h) for q in sol.Q])
    return ConvergenceSeries(sol.t_grid, d_mu, d_Q, sol.Wbar0)
