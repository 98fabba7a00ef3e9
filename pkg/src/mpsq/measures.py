"""Finite nonnegative measures on R_+ as weighted atoms or gridded tails."""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import GridMismatch, NegativeWorkload, TruncationWarning

DEFAULT_H = 1e-2
DEFAULT_XMAX = 50.0
TRUNCATION_TOL = 1e-6
_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class PointMeasure:
    """sum_i mass_i * delta^+_{loc_i}; atoms at locations <= 0 are dropped."""

    locs: np.ndarray
    masses: np.ndarray

    def __init__(self, locs=(), masses=None):
        locs = np.asarray(locs, dtype=float).ravel()
        masses = np.ones_like(locs) if masses is None else np.broadcast_to(
            np.asarray(masses, dtype=float), locs.shape).copy()
        keep = (locs > 0) & (masses > 0)
        object.__setattr__(self, "locs", locs[keep])
        object.__setattr__(self, "masses", masses[keep])

    @classmethod
    def empty(cls) -> "PointMeasure":
        return cls()

    def mass(self) -> float:
        return float(self.masses.sum())

    def scaled(self, c: float) -> "PointMeasure":
        return PointMeasure(self.locs, self.masses * c)

    def __len__(self):
        return self.locs.shape[0]

    def to_tail(self, h: float = DEFAULT_H, n: int | None = None) -> "TailFunction":
        """Discretize: t_i = mu([i h, inf))."""
        top = int(np.floor(self.locs.max() / h + _EPS)) if len(self) else 0
        n = max(top + 1, 1) if n is None else n
        idx = np.floor(self.locs / h + _EPS).astype(np.int64)
        counts = np.zeros(max(n, top + 1) + 1)
        np.add.at(counts, idx, self.masses)
        tail = np.cumsum(counts[::-1])[::-1]
        return TailFunction(h, tail[: n + 1])


@dataclass(frozen=True, eq=False)
class TailFunction:
    """Gridded tail x_i -> mu([i h, inf)), i = 0..N."""

    h: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def grid(self) -> np.ndarray:
        return self.h * np.arange(self.values.shape[0])

    def mass(self) -> float:
        return float(self.values[0]) if self.values.size else 0.0

    def scaled(self, c: float) -> "TailFunction":
        return TailFunction(self.h, self.values * c)

    def at(self, x) -> np.ndarray:
        """Tail at arbitrary x (linear between knots, zero past the end)."""
        return np.interp(x, self.grid, self.values, left=self.mass(), right=0.0)

    def cell_masses(self) -> np.ndarray:
        v = self.values
        return np.append(v[:-1] - v[1:], v[-1])

    def padded(self, n: int) -> "TailFunction":
        if n <= self.n:
            return TailFunction(self.h, self.values[: n + 1])
        return TailFunction(self.h, np.concatenate([self.values, np.zeros(n - self.n)]))


Measure = Union[PointMeasure, TailFunction]


class MeasureVector(tuple):
    """K-tuple of measures of one kind."""

    def __new__(cls, components: Sequence[Measure]):
        components = tuple(components)
        kinds = {type(c) for c in components}
        if len(kinds) > 1:
            raise TypeError("MeasureVector components must share a representation")
        return super().__new__(cls, components)

    @property
    def K(self) -> int:
        return len(self)

    def mass(self) -> np.ndarray:
        return np.array([c.mass() for c in self])

    def scaled(self, c: float) -> "MeasureVector":
        return MeasureVector([m.scaled(c) for m in self])


class Chi:
    """x -> x^p."""

    def __init__(self, p: float = 1.0):
        self.p = p

    def __call__(self, x):
        return np.asarray(x, dtype=float) ** self.p


class IndicatorTail:
    """Indicator of [x, inf)."""

    def __init__(self, x: float):
        self.x = x

    def __call__(self, y):
        return (np.asarray(y) >= self.x).astype(float)


def chi(p: float = 1.0) -> Chi:
    return Chi(p)


def integrate(g: Callable, mu: Measure) -> float:
    """<g, mu>. On a TailFunction the cell mass t_i - t_{i+1} sits at the cell midpoint."""
    if isinstance(mu, PointMeasure):
        if isinstance(g, IndicatorTail):
            return float(mu.masses[mu.locs >= g.x].sum())
        return float(np.sum(g(mu.locs) * mu.masses))
    if isinstance(g, IndicatorTail):
        return float(mu.at(g.x))
    if isinstance(g, Chi) and g.p > 6:
        raise ValueError("moments above order 6 are not supported on a grid")
    v = mu.values
    if v.size == 0:
        return 0.0
    total = v[0]
    if total > 0 and v[-1] > TRUNCATION_TOL * total:
        warnings.warn(f"{v[-1] / total:.2e} of the mass lies beyond the grid end",
                      TruncationWarning, stacklevel=2)
    mids = mu.h * (np.arange(v.size - 1) + 0.5)
    return float(np.sum(g(mids) * (v[:-1] - v[1:])) + g(mu.h * (v.size - 1)) * v[-1])


def shift_truncate(mu: PointMeasure, s: float) -> PointMeasure:
    """Move every atom left by s and drop the ones that reach 0."""
    return PointMeasure(mu.locs - s, mu.masses)


def _simpson_cumulative(f: Callable, h: float, n: int) -> np.ndarray:
    x = h * np.arange(n + 1)
    fx = f(x)
    fm = f(x[:-1] + 0.5 * h)
    cells = (h / 6.0) * (fx[:-1] + 4.0 * fm + fx[1:])
    return np.concatenate([[0.0], np.cumsum(cells)])


def service_tail(spec, h: float = DEFAULT_H, x_max: float = DEFAULT_XMAX) -> TailFunction:
    n = int(round(x_max / h))
    return TailFunction(h, spec.sf(h * np.arange(n + 1)))


def excess_tail(spec, h: float = DEFAULT_H, x_max: float = DEFAULT_XMAX) -> TailFunction:
    """Tail of the excess-life law: 1 - (1/mean) int_0^x P(V > y) dy, by Simpson quadrature."""
    n = int(round(x_max / h))
    integral = _simpson_cumulative(spec.sf, h, n)
    return TailFunction(h, np.clip(1.0 - integral / spec.mean, 0.0, 1.0))


def lifting_map(w: float, dp, nu_e: Sequence[TailFunction]) -> MeasureVector:
    """Invariant measure vector carrying workload w: (w / dstar) M Lambda nu^e."""
    if w < 0:
        raise NegativeWorkload(f"workload must be nonnegative, got {w}")
    coef = w / dp.dstar * np.diag(dp.M) * dp.lam
    return MeasureVector([t.scaled(c) for t, c in zip(nu_e, coef)])


# distance -------------------------------------------------------------

def _levy_tails(t1: np.ndarray, t2: np.ndarray, h: float) -> float:
    n = max(t1.size, t2.size)
    t1 = np.concatenate([t1, np.zeros(n - t1.size)])
    t2 = np.concatenate([t2, np.zeros(n - t2.size)])

    def gap(k: int) -> float:
        # max over i of t2(i+k) - t1(i) and t1(i+k) - t2(i), tails = mass left of 0
        a1 = np.concatenate([np.full(k, t1[0]), t1])
        a2 = np.concatenate([np.full(k, t2[0]), t2])
        b1 = np.concatenate([t1, np.zeros(k)])
        b2 = np.concatenate([t2, np.zeros(k)])
        return max(0.0, float(np.max(b2 - a1)), float(np.max(b1 - a2)))

    if gap(0) == 0.0:
        return 0.0
    lo, hi = 0, n + 1  # gap(hi) == 0 <= hi * h
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mid * h >= gap(mid):
            hi = mid
        else:
            lo = mid
    return min(hi * h, gap(hi - 1))


def _as_tail(mu: Measure, h: float) -> TailFunction:
    if isinstance(mu, TailFunction):
        if abs(mu.h - h) > 1e-12 * h:
            raise GridMismatch(f"grid steps differ: {mu.h} vs {h}")
        return mu
    return mu.to_tail(h)


def measure_distance(mu, nu, h: float | None = None) -> float:
    """Levy distance between gridded tails plus the total-mass gap.

    This is a computable surrogate for the Prokhorov-type metric; for
    MeasureVectors the maximum over components is returned.
    """
    if isinstance(mu, MeasureVector) or isinstance(nu, MeasureVector):
        if len(mu) != len(nu):
            raise GridMismatch("measure vectors of different length")
        return max((measure_distance(a, b, h) for a, b in zip(mu, nu)), default=0.0)
    if h is None:
        h = next((m.h for m in (mu, nu) if isinstance(m, TailFunction)), DEFAULT_H)
    t1 = _as_tail(mu, h).values
    t2 = _as_tail(nu, h).values
    m1 = t1[0] if t1.size else 0.0
    m2 = t2[0] if t2.size else 0.0
    return _levy_tails(t1, t2, h) + abs(m1 - m2)


# serialization --------------------------------------------------------

def dumps_measure(mu: Measure) -> str:
    buf = io.StringIO()
    if isinstance(mu, PointMeasure):
        buf.write("# location mass\n")
        for x, m in zip(mu.locs, mu.masses):
            buf.write(f"{float(x)!r} {float(m)!r}\n")
    else:
        buf.write(f"# grid_index tail h={float(mu.h)!r}\n")
        for i, v in enumerate(mu.values):
            buf.write(f"{i} {float(v)!r}\n")
    return buf.getvalue()


def loads_measure(text: str) -> Measure:
    lines = text.strip().splitlines()
    header = lines[0]
    rows = np.loadtxt(lines[1:], ndmin=2) if len(lines) > 1 else np.empty((0, 2))
    if header.startswith("# location"):
        return PointMeasure(rows[:, 0], rows[:, 1])
    h = float(header.split("h=")[1])
    return TailFunction(h, rows[:, 1])
