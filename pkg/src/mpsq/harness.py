"""Heavy-traffic experiments: scaled views of simulated paths, state
space collapse statistics, workload KS comparisons and the identity suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .diffusion import simulate_rbm
from .errors import HorizonTooShort, MPSQError
from .fluid import FluidContext, build_Bes, build_Bes_dual
from .gridconv import cdf_diag, matrix_measure_moment, stieltjes_convolve
from .measures import MeasureVector, PointMeasure, measure_distance
from .model import QueueModel, derived_params, heavy_traffic_sequence
from .simulator import rep_seed, simulate

DEFAULT_R = (10, 20, 40)
DEFAULT_REPS = 200
DEFAULT_T = 1.0
DEFAULT_SNAPSHOTS = 21
DEFAULT_SIGMA = 0.5
RBM_PATHS = 20_000


# scaling ----------------------------------------------------------------

@dataclass
class ScaledView:
    """Fluid or diffusion scaled accessors over a trajectory.

    Snapshot j of the trajectory, taken at time s_j, is read as scaled
    time s_j / r (fluid) or s_j / r^2 (diffusion).
    """

    traj: object
    r: float
    kind: str
    lam: np.ndarray

    @property
    def time_factor(self) -> float:
        return self.r if self.kind == "fluid" else self.r ** 2

    @property
    def t(self) -> np.ndarray:
        return self.traj.times / self.time_factor

    def _series(self, name: str) -> np.ndarray:
        return self.traj.series(name)

    @property
    def W(self) -> np.ndarray:
        return self._series("W") / self.r

    @property
    def Z(self) -> np.ndarray:
        return self._series("Z") / self.r

    def _centred(self, name: str, rate) -> np.ndarray:
        x = self._series(name).astype(float)
        if self.kind == "fluid":
            return x / self.r
        return (x - np.outer(self.traj.times, rate)) / self.r

    @property
    def A(self) -> np.ndarray:
        return self._centred("A", self.lam)

    @property
    def D(self) -> np.ndarray:
        return self._centred("D", self.lam)

    @property
    def E(self) -> np.ndarray:
        return self._centred("E", self.traj.model.alpha)

    @property
    def S(self) -> np.ndarray:
        """Cumulative service; unscaled in both kinds."""
        return self._series("S")

    def mu(self, j: int) -> MeasureVector:
        return self.traj.snapshots[j].mu.scaled(1.0 / self.r)

    def gamma(self, j: int) -> PointMeasure:
        return self.traj.snapshots[j].gamma.scaled(1.0 / self.r)

    def Q(self, j: int) -> MeasureVector:
        return self.traj.snapshots[j].Q.scaled(1.0 / self.r)


def scale(traj, r: float, kind: str = "diffusion", T: float | None = None) -> ScaledView:
    if kind not in ("fluid", "diffusion"):
        raise ValueError(f"unknown scaling kind {kind!r}")
    factor = r if kind == "fluid" else r * r
    if T is not None and traj.horizon < factor * T - 1e-9:
        raise HorizonTooShort(f"horizon {traj.horizon} < {factor * T}")
    lam = derived_params(traj.model).lam if traj.model.alpha.any() else np.zeros(traj.model.K)
    return ScaledView(traj, float(r), kind, lam)


def ssc_statistic(view: ScaledView, ctx: FluidContext, indices=None) -> tuple[float, float]:
    """sup_j d(mu_hat(t_j), Delta W_hat(t_j)) and the same for Q_hat."""
    W = view.W
    idx = range(len(W)) if indices is None else indices
    d_mu = d_Q = 0.0
    for j in idx:
        w = max(float(W[j]), 0.0)
        d_mu = max(d_mu, measure_distance(view.mu(j), ctx.lift(w), ctx.h))
        d_Q = max(d_Q, measure_distance(view.Q(j), ctx.lift_Q(w), ctx.h))
    return d_mu, d_Q


# campaigns --------------------------------------------------------------

@dataclass
class Experiment:
    model: QueueModel
    sigma: float = DEFAULT_SIGMA
    r_values: tuple = DEFAULT_R
    reps: int = DEFAULT_REPS
    T: float = DEFAULT_T
    n_snapshots: int = DEFAULT_SNAPSHOTS
    seed: int = 0
    h: float = 1e-2
    x_max: float | None = None
    dt: float | None = None
    init_scale: float = 1.0  # Zbar(0) = c M lambda
    rbm_paths: int = RBM_PATHS
    ssc: bool = True

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_snapshots)


@dataclass
class RResult:
    r: float
    W: np.ndarray  # (reps, snapshots)
    Z_gap: np.ndarray  # (reps,) |Z_hat(T) - <1,Delta> W_hat(T)|_1
    ssc_mu: np.ndarray
    ssc_Q: np.ndarray
    ks: np.ndarray  # per snapshot (nan at t = 0)
    events: int
    runtime: float
    errors: dict = field(default_factory=dict)

    @property
    def ks_final(self) -> float:
        return float(self.ks[-1])


@dataclass
class ExperimentReport:
    experiment: Experiment
    zbar0: np.ndarray
    W0: float
    Gamma: float
    results: list

    def table(self) -> list[dict]:
        rows = []
        for res in self.results:
            rows.append({
                "r": res.r,
                "ks_W_T": res.ks_final,
                "ssc_mu": float(np.mean(res.ssc_mu)) if res.ssc_mu.size else float("nan"),
                "ssc_Q": float(np.mean(res.ssc_Q)) if res.ssc_Q.size else float("nan"),
                "Z_gap": float(np.mean(res.Z_gap)),
                "events": res.events,
                "failed_reps": len(res.errors),
            })
        return rows

    def trend(self, key: str) -> bool:
        """Whether the reported statistic decreases strictly along r."""
        vals = [row[key] for row in self.table()]
        return all(b < a for a, b in zip(vals, vals[1:]))


def initial_zbar(model: QueueModel, c: float = 1.0) -> np.ndarray:
    dp = derived_params(model)
    return c * np.diag(dp.M) * dp.lam


def rbm_samples(exp: Experiment, W0: float, Gamma: float) -> np.ndarray:
    """RBM marginals at the snapshot grid, shape (paths, snapshots)."""
    dt = exp.dt if exp.dt is not None else 1e-3 * exp.T
    rng = np.random.default_rng(rep_seed(exp.seed, 10**6))
    path = simulate_rbm(W0, exp.sigma, Gamma, dt, exp.T, rng, n_paths=exp.rbm_paths)
    idx = np.rint(exp.t_grid / dt).astype(int)
    return path.values[:, idx]


def run_experiment(exp: Experiment, progress=None) -> ExperimentReport:
    base = exp.model
    dp = derived_params(base)
    ctx = FluidContext(base, exp.h, exp.x_max, dp) if exp.ssc else None
    zbar0 = initial_zbar(base, exp.init_scale)
    W0 = dp.workload0(zbar0)
    rbm = rbm_samples(exp, W0, dp.Gamma)
    models = heavy_traffic_sequence(base, exp.sigma, exp.r_values, zbar0=zbar0)
    results = []
    descriptors = ("mu", "Q") if exp.ssc else ()
    for ri, (r, m) in enumerate(zip(exp.r_values, models)):
        started = time.perf_counter()
        snaps = (r * r) * exp.t_grid
        W = np.full((exp.reps, len(snaps)), np.nan)
        gaps, s_mu, s_Q, errors, events = [], [], [], {}, 0
        for rep in range(exp.reps):
            seed = np.random.SeedSequence(entropy=exp.seed, spawn_key=(ri, rep))
            try:
                traj = simulate(m, float(snaps[-1]), snaps, descriptors, seed=seed)
            except MPSQError as exc:
                errors[rep] = f"{type(exc).__name__}: {exc}"
                continue
            events += traj.events
            view = scale(traj, r, "diffusion", exp.T)
            W[rep] = view.W
            gaps.append(float(np.abs(view.Z[-1] - dp.lift_mass * view.W[-1]).sum()))
            if exp.ssc:
                a, b = ssc_statistic(view, ctx)
                s_mu.append(a)
                s_Q.append(b)
        ok = ~np.isnan(W[:, -1])
        ks = np.array([np.nan if exp.t_grid[j] == 0 else ks_2samp(W[ok, j], rbm[:, j]).statistic
                       for j in range(len(snaps))])
        res = RResult(r, W, np.array(gaps), np.array(s_mu), np.array(s_Q), ks, events,
                      time.perf_counter() - started, errors)
        results.append(res)
        if progress is not None:
            progress(res)
    return ExperimentReport(exp, zbar0, W0, dp.Gamma, results)


def workload_convergence_test(exp: Experiment) -> list[dict]:
    """KS statistics of W_hat^r(t_j) against RBM marginals, per r."""
    exp = Experiment(**{**exp.__dict__, "ssc": False})
    report = run_experiment(exp)
    return [{"r": res.r, "t": exp.t_grid.tolist(), "ks": res.ks.tolist()} for res in report.results]


# identities ---------------------------------------------------------------

@dataclass
class IdentityRow:
    name: str
    value: object
    reference: object
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def identity_suite(ctx: FluidContext) -> list[IdentityRow]:
    """Every closed-form identity linking grid objects to the matrices of the model."""
    m, dp, h = ctx.model, ctx.dp, ctx.h
    K = dp.K
    e = np.ones(K)
    Q, M, M2, P, lam = dp.Q, dp.M, dp.M2, dp.P, dp.lam
    tol = 5.0 * h
    BV = ctx.BV
    BV0 = stieltjes_convolve(ctx.calB, cdf_diag(m.initial_services, h, ctx.n))
    m0 = matrix_measure_moment(BV, 0)
    m1 = matrix_measure_moment(BV, 1)
    m2 = matrix_measure_moment(BV, 2)
    m10 = matrix_measure_moment(BV0, 1)
    rows = []

    def add(name, value, ref, t=tol, exact=False):
        err = float(np.abs(np.asarray(value) - np.asarray(ref)).max()) if exact else _rel(value, ref)
        rows.append(IdentityRow(name, np.asarray(value).tolist(), np.asarray(ref).tolist(), err, t))

    add("<1, calB*V> = Q", m0, Q)
    add("<chi, calB*V> = QMQ", m1, Q @ M @ Q)
    add("<chi, calB*V0> = Q(M0 + MP'Q)", m10, Q @ (dp.M0 + M @ P.T @ Q))
    add("<chi^2, calB*V> = Q(M2 + 2MQP'M)Q", m2, Q @ (M2 + 2 * M @ Q @ P.T @ M) @ Q)
    z1 = ctx.exit @ m1  # <chi, zeta_k>
    z2 = ctx.exit @ m2  # <chi^2, zeta_k>
    Lam = dp.Lam
    add("var-L1", z2 @ dp.alpha, e @ dp.Sigma @ Lam @ e + e @ M @ Q @ (Lam - P.T @ Lam @ P) @ Q.T @ M @ e)
    add("var-L2", z1 ** 2 @ dp.alpha, e @ M @ Q @ dp.Dalpha @ Q.T @ M @ e)
    add("var-L3", z1 ** 2 @ (dp.a * dp.alpha ** 3), e @ M @ Q @ dp.Pi @ Q.T @ M @ e)
    add("var-L4", Lam - dp.Dalpha - P.T @ Lam @ P, np.tensordot(lam, dp.H, axes=1), 1e-10, exact=True)
    gamma_zeta = float((z2 - z1 ** 2) @ dp.alpha + (z1 ** 2) @ (dp.a * dp.alpha ** 3))
    add("Gamma (zeta moments)", gamma_zeta, dp.Gamma)
    if abs(dp.rho - 1.0) <= 1e-9:
        add("<chi, alpha.zeta> = 1", z1 @ dp.alpha, 1.0)
        Bes = build_Bes(ctx)
        mean = float(np.sum(1.0 - 0.5 * (Bes.values[:-1] + Bes.values[1:])) * h)
        add("mean of B_s^e = dstar", mean, dp.dstar)
        add("B_s^e direct = dual", build_Bes(ctx).values, build_Bes_dual(ctx).values, t=tol, exact=True)
    add("<1, Delta> = R Delta_F", dp.lift_mass, dp.R * dp.Delta_F, 1e-9, exact=True)
    return rows


def format_table(rows: list[IdentityRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'identity':<{width}}  {'error':>10}  {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.error:10.3e}  {r.tol:8.1e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
