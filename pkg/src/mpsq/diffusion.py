"""Heavy-traffic limit objects: Brownian drivers, the reflected workload
W*, and the deterministic maps from W* to the limiting descriptors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch
from .measures import MeasureVector, TailFunction
from .model import DerivedParams


@dataclass
class BMPath:
    """Paths of X(t) = drift*t + B(t) on the grid t_i = i*dt.

    ``values`` has shape (paths, n+1) for scalar motions and
    (paths, n+1, K) for vector motions.
    """

    dt: float
    values: np.ndarray
    drift: object
    variance: object
    seed: object = None

    @property
    def n(self) -> int:
        return self.values.shape[1] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n + 1)


@dataclass
class RBMPath(BMPath):
    W0: float = 0.0
    regulator: np.ndarray = None


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def simulate_bm(drift, cov, dt: float, horizon: float, rng=None, n_paths: int = 1) -> BMPath:
    """Brownian motion with the given drift and (scalar or matrix) covariance."""
    rng = _rng(rng)
    n = int(round(horizon / dt))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        inc = float(drift) * dt + np.sqrt(float(cov) * dt) * rng.standard_normal((n_paths, n))
        vals = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
    else:
        K = cov.shape[0]
        # eigh-based root: the routing covariances are singular
        w, V = np.linalg.eigh(cov)
        root = V * np.sqrt(np.clip(w, 0.0, None))
        z = rng.standard_normal((n_paths, n, K))
        inc = np.asarray(drift, float) * dt + np.sqrt(dt) * z @ root.T
        vals = np.concatenate([np.zeros((n_paths, 1, K)), np.cumsum(inc, axis=1)], axis=1)
    return BMPath(dt, vals, drift, cov)


def reflect(x: np.ndarray, W0: float, cell_min: np.ndarray | None = None):
    """One-sided Skorokhod map of W0 + x on a grid (running-minimum form).

    ``cell_min`` optionally holds the minimum of x inside each grid cell;
    with it the regulator accounts for excursions below 0 between knots.
    Returns (W, L).
    """
    x = np.atleast_2d(x)
    lows = x if cell_min is None else np.concatenate([x[:, :1], cell_min], axis=1)
    L = np.maximum.accumulate(np.maximum(-(W0 + lows), 0.0), axis=1)
    W = np.maximum(W0 + x + L, 0.0)
    return W, L


def simulate_rbm(W0: float, sigma: float, Gamma: float, dt: float, horizon: float, rng=None,
                 n_paths: int = 1, bridge: bool = True) -> RBMPath:
    """Reflected BM with drift -sigma and variance Gamma started at W0.

    With ``bridge`` the minimum of the driving motion inside each cell is
    drawn from its Brownian-bridge law, which makes the grid values exact
    in distribution; without it the map is applied to the knots only.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if W0 < 0 or Gamma < 0:
        raise ValueError("W0 and Gamma must be nonnegative")
    rng = _rng(rng)
    bm = simulate_bm(-sigma, Gamma, dt, horizon, rng, n_paths)
    x = bm.values
    cell_min = None
    if bridge:
        a, b = x[:, :-1], x[:, 1:]
        u = rng.random(a.shape)
        spread = np.sqrt((b - a) ** 2 - 2.0 * dt * Gamma * np.log1p(-u))
        cell_min = 0.5 * (a + b - spread)
    W, L = reflect(x, W0, cell_min)
    return RBMPath(dt, W, -sigma, Gamma, W0=W0, regulator=L)


# maps from W* -------------------------------------------------------------

@dataclass
class LimitPath:
    t: np.ndarray
    W: np.ndarray
    mu: list
    Q: list
    gamma: list
    Z: np.ndarray


def limit_measures(W, t, ctx) -> LimitPath:
    """mu* = Delta W*, Q* = (calB * Delta) W*, gamma* = e(I - P') Q*, Z* = <1, Delta> W*.

    ``ctx`` is a fluid.FluidContext carrying the grid, nu^e and calB.
    """
    W = np.asarray(W, dtype=float)
    dp = ctx.dp
    unit_mu = ctx.lift(1.0)
    unit_Q = ctx.invariant_Q_tail() / dp.dstar
    unit_gamma = unit_Q @ ctx.exit
    mu, Q, gamma = [], [], []
    for w in W:
        mu.append(unit_mu.scaled(w))
        Q.append(MeasureVector([TailFunction(ctx.h, w * unit_Q[:, k]) for k in range(dp.K)]))
        gamma.append(TailFunction(ctx.h, w * unit_gamma))
    return LimitPath(np.asarray(t, float), W, mu, Q, gamma, np.outer(W, dp.lift_mass))


@dataclass
class ADZ:
    A: np.ndarray
    D: np.ndarray
    Z: np.ndarray


def limit_ADZ(E, Phi, W, dp: DerivedParams, zbar0) -> ADZ:
    """Limits of the centred arrival, departure and queue-length processes.

    E has shape (n+1, K). Phi is a list over l of (n+1, K) arrays holding
    Phi^{*,l}(lambda_l t) on the same grid. W has shape (n+1,).
    """
    E = np.asarray(E, dtype=float)
    W = np.asarray(W, dtype=float)
    Phi = [np.asarray(p, dtype=float) for p in Phi]
    if len(Phi) != dp.K or any(p.shape != E.shape for p in Phi) or W.shape[0] != E.shape[0]:
        raise GridMismatch("drivers are not on a shared grid")
    zbar0 = np.asarray(zbar0, dtype=float)
    Z = np.outer(W, dp.lift_mass)
    S = E + sum(Phi)
    D = (zbar0 + S - Z) @ dp.Q.T
    A = ((zbar0 - Z) @ dp.P + S) @ dp.Q.T
    return ADZ(A, D, Z)


def routing_drivers(dp: DerivedParams, dt: float, horizon: float, rng=None):
    """Independent E* (covariance Pi) and Phi^{*,l}(lambda_l t) (covariance lambda_l H^l)."""
    rng = _rng(rng)
    E = simulate_bm(np.zeros(dp.K), dp.Pi, dt, horizon, rng).values[0]
    Phi = [simulate_bm(np.zeros(dp.K), dp.lam[l] * dp.H[l], dt, horizon, rng).values[0]
           for l in range(dp.K)]
    return E, Phi


def conjecture_check(dp: DerivedParams, tol: float = 1e-9) -> dict:
    """<1, Delta> = R Delta_F componentwise."""
    lhs = np.asarray(dp.lift_mass)
    rhs = dp.R * np.asarray(dp.Delta_F)
    err = float(np.abs(lhs - rhs).max())
    return {
        "lift_mass": lhs.tolist(),
        "R_Delta_F": rhs.tolist(),
        "R": dp.R,
        "R2_Gamma": dp.R ** 2 * dp.Gamma,
        "max_error": err,
        "passed": err <= tol,
    }
