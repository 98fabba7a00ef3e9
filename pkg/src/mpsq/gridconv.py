"""Matrix-valued functions on a uniform grid and their Stieltjes algebra.

Values are stored as arrays of shape (N+1,), (N+1, K) or (N+1, K, K):
scalar, vector and matrix functions respectively. A vector function is
treated as a column when convolved from the right.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import GridMismatch, NonConvergence, NotIncreasing, TruncationWarning

MAX_TERMS = 10_000


@dataclass(frozen=True, eq=False)
class GridFun:
    h: float
    values: np.ndarray
    monotone: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def grid(self) -> np.ndarray:
        return self.h * np.arange(self.n + 1)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def at(self, x):
        """Linear interpolation (scalar functions), clamped at the grid end."""
        return np.interp(x, self.grid, self.values)

    def __add__(self, other: "GridFun") -> "GridFun":
        _check_grid(self, other)
        return GridFun(self.h, self.values + other.values)

    def __sub__(self, other: "GridFun") -> "GridFun":
        _check_grid(self, other)
        return GridFun(self.h, self.values - other.values)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def truncated(self, n: int) -> "GridFun":
        return GridFun(self.h, self.values[: n + 1], self.monotone)


# aliases matching the roles the functions play
GridMatrixFun = GridFun
GridVecFun = GridFun


def _check_grid(F: GridFun, G: GridFun) -> None:
    if abs(F.h - G.h) > 1e-12 * F.h or F.n != G.n:
        raise GridMismatch(f"grids differ: (h={F.h}, n={F.n}) vs (h={G.h}, n={G.n})")


def constant(h: float, n: int, C) -> GridFun:
    """C * 1_{x >= 0}."""
    C = np.asarray(C, dtype=float)
    return GridFun(h, np.broadcast_to(C, (n + 1,) + C.shape).copy(), monotone=True)


def identity(h: float, n: int, K: int) -> GridFun:
    return constant(h, n, np.eye(K))


def cdf_diag(specs, h: float, n: int) -> GridFun:
    """diag(B_1, ..., B_K) on the grid."""
    x = h * np.arange(n + 1)
    K = len(specs)
    out = np.zeros((n + 1, K, K))
    for k, s in enumerate(specs):
        out[:, k, k] = s.cdf(x)
    return GridFun(h, out, monotone=True)


def cdf_vec(specs, h: float, n: int, weights=None) -> GridFun:
    x = h * np.arange(n + 1)
    w = np.ones(len(specs)) if weights is None else np.asarray(weights, float)
    return GridFun(h, np.stack([wk * s.cdf(x) for s, wk in zip(specs, w)], axis=1), monotone=True)


def _fft_conv(a: np.ndarray, b: np.ndarray, length: int, subscripts: str) -> np.ndarray:
    nfft = sfft.next_fast_len(a.shape[0] + b.shape[0] - 1, real=True)
    fa = sfft.rfft(a, nfft, axis=0)
    fb = sfft.rfft(b, nfft, axis=0)
    return sfft.irfft(np.einsum(subscripts, fa, fb), nfft, axis=0)[:length]


def _subscripts(fnd: int, gnd: int) -> str:
    if fnd == 0:
        return {0: "f,f->f", 1: "f,fk->fk", 2: "f,fkj->fkj"}[gnd]
    if fnd == 2 and gnd == 2:
        return "fik,fkj->fij"
    if fnd == 2 and gnd == 1:
        return "fik,fk->fi"
    if fnd == 1 and gnd == 0:
        return "fk,f->fk"
    if fnd == 2 and gnd == 0:
        return "fij,f->fij"
    raise ValueError(f"unsupported convolution shapes {fnd}, {gnd}")


def stieltjes_convolve(F: GridFun, G: GridFun) -> GridFun:
    """(F*G)(x) = int_[0,x] F(x - y) dG(y) by midpoint Stieltjes sums.

    G is the integrator; its value at 0 is a jump from 0-.
    """
    _check_grid(F, G)
    Fv, Gv = F.values, G.values
    n = F.n
    dG = np.diff(Gv, axis=0, prepend=np.zeros((1,) + Gv.shape[1:]))
    subs = _subscripts(Fv.ndim - 1, Gv.ndim - 1)
    out = np.einsum(subs, Fv, np.broadcast_to(dG[0], Gv.shape))
    if n > 0:
        Fmid = 0.5 * (Fv[:-1] + Fv[1:])
        out[1:] += _fft_conv(Fmid, dG[1:], n, subs)
    return GridFun(F.h, out, monotone=F.monotone and G.monotone)


def compute_calB(B: GridFun, P, tol: float = 1e-10, max_terms: int = MAX_TERMS) -> GridFun:
    """sum_{n>=0} (B P')^{*n}, truncated once a term's sup-norm drops below tol."""
    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    BPt = GridFun(B.h, B.values @ P.T, monotone=True)
    term = identity(B.h, B.n, K)
    total = term.values.copy()
    for _ in range(max_terms):
        term = stieltjes_convolve(term, BPt)
        total += term.values
        if term.sup_norm() < tol:
            return GridFun(B.h, total, monotone=True)
    raise NonConvergence(f"calB series did not converge in {max_terms} terms")


def matrix_measure_moment(F: GridFun, p: int, total=None) -> np.ndarray:
    """<chi^p, dF> entrywise; the jump at 0 only counts for p = 0.

    If ``total`` (the exact total mass) is given, warn when the grid
    misses more than 1e-6 of it.
    """
    v = F.values
    if total is not None:
        total = np.asarray(total, dtype=float)
        missing = np.abs(total - v[-1]).max()
        if missing > 1e-6 * max(np.abs(total).max(), 1e-300):
            warnings.warn(f"grid misses {missing:.2e} of the mass", TruncationWarning, stacklevel=2)
    if p == 0:
        return v[-1].copy()
    dv = np.diff(v, axis=0)
    mids = (F.h * (np.arange(F.n) + 0.5)) ** p
    return np.tensordot(mids, dv, axes=(0, 0))


def solve_volterra(H: GridFun, F: GridFun) -> GridFun:
    """Solve T = H + F*T by forward stepping.

    F (scalar, F(0) = 0) acts as the integrator. The only implicit term
    is the first cell, which is solved for directly at each step.
    """
    _check_grid(H, F)
    Fv = F.values
    if Fv.ndim != 1:
        raise ValueError("the kernel must be scalar")
    if abs(Fv[0]) > 1e-12:
        raise ValueError("the kernel must vanish at 0")
    Hv = H.values
    n = H.n
    dF = np.diff(Fv, prepend=0.0)
    T = np.zeros_like(Hv)
    Tmid = np.zeros_like(Hv)
    T[0] = Hv[0]
    c = 0.5 * dF[1] if n > 0 else 0.0
    for i in range(1, n + 1):
        rest = Hv[i] + c * T[i - 1]
        if i >= 2:
            rest = rest + np.tensordot(dF[i:1:-1], Tmid[: i - 1], axes=(0, 0))
        T[i] = rest / (1.0 - c)
        Tmid[i - 1] = 0.5 * (T[i - 1] + T[i])
    return GridFun(H.h, T)


def renewal_U(Bes: GridFun) -> GridFun:
    """U = sum_n Bes^{*n}, i.e. the solution of U = 1 + Bes*U."""
    return solve_volterra(constant(Bes.h, Bes.n, 1.0), Bes)


def invert_monotone(T: GridFun, h: float | None = None, t_max: float | None = None) -> GridFun:
    """Inverse of a strictly increasing scalar T, sampled on a uniform t-grid.

    The t-grid has step ``h`` (default: T's step) and spans [T(0), t_max].
    """
    v = T.values
    if v.ndim != 1 or np.any(np.diff(v) <= 0):
        raise NotIncreasing("T must be strictly increasing")
    h = T.h if h is None else h
    t_max = v[-1] if t_max is None else min(t_max, v[-1])
    n = int(np.floor((t_max - v[0]) / h + 1e-9))
    t = v[0] + h * np.arange(n + 1)
    return GridFun(h, np.interp(t, v, T.grid), monotone=True)
