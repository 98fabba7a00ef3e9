"""Event-driven simulation of the multiclass PS queue with Markov feedback.

Processor sharing is run in cumulative-service (virtual time)
coordinates: a job whose current visit started when the cumulative
service was S0 completes that visit when S reaches S0 + v. Every route
and every per-visit service is drawn when the job is created, so the
total remaining work and the remaining per-class visits are known
while the job is in the system.
"""
from __future__ import annotations

import heapq
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EventCapExceeded, MPSQError, RouteCapExceeded
from .measures import MeasureVector, PointMeasure
from .model import QueueModel

EVENT_CAP = 10**8
ROUTE_CAP = 10**6
BLOCK = 2048
WORK_TOL = 1e-9

PURPOSES = ("arrival", "service", "routing", "initial")


class _Draws:
    """Buffered sampler: hands out one variate at a time from blocks."""

    __slots__ = ("_fill", "_buf", "_pos")

    def __init__(self, fill: Callable[[int], np.ndarray]):
        self._fill = fill
        self._buf = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._fill(BLOCK).tolist()
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        return x


def make_streams(model: QueueModel, seed) -> dict:
    """Independent generators per (class, purpose) derived from one seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # explicit child keys: SeedSequence.spawn would mutate a shared parent
    gens = {}
    for i, purpose in enumerate(PURPOSES):
        for k in range(model.K):
            child = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i, k))
            gens[purpose, k] = np.random.Generator(np.random.PCG64(child))
    return gens


def sample_route(l: int, P, rng=None, uniform: Callable[[], float] | None = None,
                 cap: int = ROUTE_CAP) -> list[int]:
    """Markov chain under P from class l until it exits."""
    P = np.asarray(P, dtype=float)
    cum = np.cumsum(P, axis=1).tolist()
    K = P.shape[0]
    if uniform is None:
        uniform = rng.random
    return _route(l, cum, K, lambda c: uniform(), cap)


def _route(l: int, cum: list, K: int, uniform: Callable[[int], float], cap: int) -> list[int]:
    route = [l]
    c = l
    while True:
        nxt = bisect_right(cum[c], uniform(c))
        if nxt >= K:
            return route
        route.append(nxt)
        c = nxt
        if len(route) > cap:
            raise RouteCapExceeded(f"route longer than {cap} visits")


class Job:
    __slots__ = ("id", "entry", "arrival", "route", "services", "cum", "idx", "threshold")

    def __init__(self, jid, entry, arrival, route, services):
        self.id = jid
        self.entry = entry
        self.arrival = arrival
        self.route = route
        self.services = services
        self.cum = np.cumsum(services).tolist()
        self.idx = 0
        self.threshold = 0.0

    @property
    def cls(self) -> int:
        return self.route[self.idx]

    def future(self) -> float:
        """Service of the visits after the current one."""
        return self.cum[-1] - self.cum[self.idx]


@dataclass
class Snapshot:
    t: float
    Z: np.ndarray
    W: float
    A: np.ndarray
    D: np.ndarray
    E: np.ndarray
    S: float
    N: np.ndarray
    mu: MeasureVector | None = None
    gamma: PointMeasure | None = None
    Q: MeasureVector | None = None


@dataclass
class Trajectory:
    model: QueueModel
    seed: object
    horizon: float = 0.0
    snapshots: list = field(default_factory=list)
    events: int = 0
    arrivals: int = 0
    completions: int = 0
    violations: int = 0
    violation_log: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots])


class Engine:
    """Mutable state of one run. ``debug`` recounts every invariant after each event."""

    def __init__(self, model: QueueModel, seed=0, debug: bool = False,
                 event_cap: int = EVENT_CAP, route_cap: int = ROUTE_CAP):
        self.model = model
        self.K = K = model.K
        self.debug = debug
        self.event_cap = event_cap
        self.route_cap = route_cap
        self.gens = make_streams(model, seed)
        self._cum = np.cumsum(model.P, axis=1).tolist()
        self._route_u = [_Draws(self.gens["routing", k].random) for k in range(K)]
        self._service = [_Draws(lambda n, s=s, g=self.gens["service", k]: np.asarray(s.sample(g, n)))
                         for k, s in enumerate(model.services)]
        self._inter = []
        for k in range(K):
            law = model.interarrival_law(k)
            self._inter.append(None if law is None else
                               _Draws(lambda n, s=law, g=self.gens["arrival", k]: np.asarray(s.sample(g, n))))

        self.t = 0.0
        self.S = 0.0
        self.jobs: dict[int, Job] = {}
        self.heap: list = []
        self.Z = [0] * K
        self.A = [0] * K
        self.D = [0] * K
        self.E = [0] * K
        self.N = [0] * K
        self.Phi = [[0] * K for _ in range(K)]
        self.work_sum = 0.0  # sum over live jobs of threshold + future
        self._work_c = 0.0  # compensation term, work_sum grows with S
        self.next_id = 0
        self.events = 0
        self.arrivals = 0
        self.completions = 0
        self.violations = 0
        self.violation_log: list[str] = []
        self.next_arrival = [math.inf if d is None else d() for d in self._inter]
        self._place_initial_jobs()
        self.z0 = list(self.Z)
        if debug:
            self.check_invariants()

    # job creation -----------------------------------------------------
    def _new_job(self, entry: int, first_service: float | None, arrival: float) -> Job:
        route = _route(entry, self._cum, self.K, lambda c: self._route_u[c](), self.route_cap)
        services = [self._service[c]() for c in route]
        if first_service is not None:
            services[0] = first_service
        job = Job(self.next_id, entry, arrival, route, services)
        self.next_id += 1
        for c in route:
            self.N[c] += 1
        job.threshold = self.S + services[0]
        self.jobs[job.id] = job
        heapq.heappush(self.heap, (job.threshold, job.id))
        self._add_work(job.threshold + job.future())
        self.Z[entry] += 1
        return job

    def _place_initial_jobs(self):
        m = self.model
        for k in range(self.K):
            count = int(m.z0[k])
            if count == 0:
                continue
            v0 = np.asarray(m.initial_services[k].sample(self.gens["initial", k], count)).tolist()
            for v in v0:
                self._new_job(k, v, 0.0)

    # dynamics ---------------------------------------------------------
    @property
    def n_live(self) -> int:
        return len(self.jobs)

    def _add_work(self, x: float):
        # Neumaier summation
        s = self.work_sum
        t = s + x
        if abs(s) >= abs(x):
            self._work_c += (s - t) + x
        else:
            self._work_c += (x - t) + s
        self.work_sum = t

    def workload(self) -> float:
        return (self.work_sum - len(self.jobs) * self.S) + self._work_c

    def direct_workload(self) -> float:
        S = self.S
        return math.fsum(j.threshold - S + j.future() for j in self.jobs.values())

    def _advance(self, t_new: float):
        n = len(self.jobs)
        if n:
            self.S += (t_new - self.t) / n
        self.t = t_new

    def next_event_time(self) -> float:
        t_c = math.inf
        if self.heap:
            t_c = self.t + (self.heap[0][0] - self.S) * len(self.jobs)
        return min(t_c, min(self.next_arrival, default=math.inf))

    def step(self):
        """Process the next event (completions win ties against arrivals)."""
        t_c = math.inf
        if self.heap:
            t_c = self.t + max(self.heap[0][0] - self.S, 0.0) * len(self.jobs)
        k_a = min(range(self.K), key=self.next_arrival.__getitem__)
        t_a = self.next_arrival[k_a]
        if t_c == math.inf and t_a == math.inf:
            return False
        self.events += 1
        if self.events > self.event_cap:
            raise EventCapExceeded(f"more than {self.event_cap} events")
        if self.debug:
            W_before, t_before, busy = self.direct_workload(), self.t, bool(self.jobs)
        if t_c <= t_a:
            thr, jid = heapq.heappop(self.heap)
            self._advance(t_c)
            if self.debug:
                self.S = thr
                self.check_work_slope(W_before, t_before, busy)
            self.S = thr
            self._complete(self.jobs[jid])
        else:
            self._advance(t_a)
            if self.debug:
                self.check_work_slope(W_before, t_before, busy)
            self._arrive(k_a)
        if self.debug:
            self.check_invariants()
        return True

    def _complete(self, job: Job):
        self.completions += 1
        k = job.route[job.idx]
        self._add_work(-(job.threshold + job.future()))
        self.D[k] += 1
        self.Z[k] -= 1
        if job.idx + 1 < len(job.route):
            job.idx += 1
            l = job.route[job.idx]
            self.A[l] += 1
            self.Z[l] += 1
            self.Phi[l][k] += 1
            job.threshold = self.S + job.services[job.idx]
            self._add_work(job.threshold + job.future())
            heapq.heappush(self.heap, (job.threshold, job.id))
        else:
            del self.jobs[job.id]
            if not self.jobs:
                # resynchronise the running sum at every empty epoch
                self.work_sum = self._work_c = 0.0

    def _arrive(self, k: int):
        self.arrivals += 1
        self.E[k] += 1
        self.A[k] += 1
        self._new_job(k, None, self.t)
        self.next_arrival[k] = self.t + self._inter[k]()

    def run_until(self, t_end: float):
        while self.next_event_time() <= t_end:
            self.step()
        self._advance(t_end)

    # invariants -------------------------------------------------------
    def _fail(self, msg: str):
        self.violations += 1
        if len(self.violation_log) < 20:
            self.violation_log.append(f"t={self.t!r}: {msg}")

    def check_invariants(self):
        K = self.K
        for k in range(K):
            if self.Z[k] != self.z0[k] + self.A[k] - self.D[k]:
                self._fail(f"Z != Z(0) + A - D for class {k}")
            if self.A[k] != self.E[k] + sum(self.Phi[k]):
                self._fail(f"A != E + sum Phi for class {k}")
        # one pass recounting descriptor masses straight from the live jobs
        counts = [0] * K
        remaining = [0] * K
        mu_mass = [0] * K
        q_mass = [0] * K
        gamma_mass = 0
        S = self.S
        for j in self.jobs.values():
            route, cum, idx = j.route, j.cum, j.idx
            counts[route[idx]] += 1
            resid = j.threshold - S
            if resid > 0:
                mu_mass[route[idx]] += 1
            if resid + cum[-1] - cum[idx] > 0:
                gamma_mass += 1
            base = resid - cum[idx]
            for n in range(idx, len(route)):
                remaining[route[n]] += 1
                if base + cum[n] > 0:
                    q_mass[route[n]] += 1
        if counts != self.Z:
            self._fail(f"live-job recount {counts} != Z {self.Z}")
        # a completion due at this very instant leaves an atom at 0 until processed
        if not (self.heap and self.heap[0][0] <= S):
            if mu_mass != self.Z:
                self._fail("<1, mu_k> != Z_k")
            if gamma_mass != sum(self.Z):
                self._fail("<1, gamma> != e.Z")
            if q_mass != remaining:
                self._fail("<1, Q_k> != remaining visits")
        for k in range(K):
            if self.D[k] != self.N[k] - remaining[k]:
                self._fail(f"D != N - <1, Q> for class {k}")
        W_now = self.direct_workload()
        if abs(W_now - self.workload()) > WORK_TOL * max(1.0, W_now):
            self._fail("running workload drifted from the direct sum")

    def check_work_slope(self, W_before: float, t_before: float, busy: bool):
        """Between events total work falls at unit rate when the server is busy."""
        W_now = self.direct_workload()
        expected = W_before - (self.t - t_before) if busy else W_before
        if abs(W_now - expected) > WORK_TOL * max(1.0, W_before):
            self._fail(f"workload slope: {W_now!r} vs {expected!r}")

    # descriptors ------------------------------------------------------
    def descriptor_mu(self) -> MeasureVector:
        locs = [[] for _ in range(self.K)]
        S = self.S
        for j in self.jobs.values():
            locs[j.route[j.idx]].append(j.threshold - S)
        return MeasureVector([PointMeasure(x) for x in locs])

    def descriptor_gamma(self) -> PointMeasure:
        S = self.S
        return PointMeasure([j.threshold - S + j.future() for j in self.jobs.values()])

    def descriptor_Q(self) -> MeasureVector:
        locs = [[] for _ in range(self.K)]
        S = self.S
        for j in self.jobs.values():
            base = j.threshold - S - j.cum[j.idx]
            for n in range(j.idx, len(j.route)):
                locs[j.route[n]].append(base + j.cum[n])
        return MeasureVector([PointMeasure(x) for x in locs])

    def snapshot(self, descriptors: Iterable[str] = ()) -> Snapshot:
        descriptors = set(descriptors)
        return Snapshot(
            t=self.t, Z=np.array(self.Z), W=self.workload(), A=np.array(self.A),
            D=np.array(self.D), E=np.array(self.E), S=self.S, N=np.array(self.N),
            mu=self.descriptor_mu() if "mu" in descriptors else None,
            gamma=self.descriptor_gamma() if "gamma" in descriptors else None,
            Q=self.descriptor_Q() if "Q" in descriptors else None,
        )


def simulate(m: QueueModel, horizon: float, snapshots: Sequence[float] = (),
             descriptors: Iterable[str] = (), seed=0, debug: bool = False,
             event_cap: int = EVENT_CAP) -> Trajectory:
    """Run one path up to ``horizon`` and record state at the snapshot times."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    times = sorted(float(t) for t in snapshots)
    if times and (times[0] < 0 or times[-1] > horizon):
        raise ValueError("snapshot times must lie in [0, horizon]")
    eng = Engine(m, seed=seed, debug=debug, event_cap=event_cap)
    traj = Trajectory(model=m, seed=seed, horizon=float(horizon))
    descriptors = tuple(descriptors)
    for ts in times + [horizon]:
        eng.run_until(ts)
        if len(traj.snapshots) < len(times):
            traj.snapshots.append(eng.snapshot(descriptors))
    traj.events = eng.events
    traj.arrivals = eng.arrivals
    traj.completions = eng.completions
    traj.violations = eng.violations
    traj.violation_log = eng.violation_log
    return traj


# replications ---------------------------------------------------------

@dataclass
class Ensemble:
    times: np.ndarray
    W: np.ndarray  # (reps, snapshots)
    Z: np.ndarray  # (reps, snapshots, K)
    extra: list
    errors: dict
    seeds: list


def rep_seed(base_seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=base_seed, spawn_key=(rep,))


def _run_rep(args):
    m, horizon, snapshots, descriptors, seed, reduce, event_cap = args
    try:
        traj = simulate(m, horizon, snapshots, descriptors, seed=seed, event_cap=event_cap)
    except MPSQError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    summary = reduce(traj) if reduce is not None else None
    return (traj.series("W"), traj.series("Z"), summary), None


def replicate(m: QueueModel, horizon: float, snapshots: Sequence[float], n_reps: int,
              base_seed: int = 0, descriptors: Iterable[str] = (), reduce=None,
              workers: int = 1, event_cap: int = EVENT_CAP) -> Ensemble:
    """Independent replications; seeds depend only on (base_seed, rep)."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    seeds = [rep_seed(base_seed, i) for i in range(n_reps)]
    tasks = [(m, horizon, list(snapshots), tuple(descriptors), s, reduce, event_cap) for s in seeds]
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            results = pool.map(_run_rep, tasks)
    else:
        results = [_run_rep(t) for t in tasks]
    n_snap = len(snapshots)
    W = np.full((n_reps, n_snap), np.nan)
    Z = np.full((n_reps, n_snap, m.K), np.nan)
    extra, errors = [], {}
    for i, (res, err) in enumerate(results):
        if err is not None:
            errors[i] = err
            extra.append(None)
            continue
        W[i], Z[i] = res[0], res[1]
        extra.append(res[2])
    return Ensemble(np.array(sorted(snapshots), float), W, Z, extra, errors, seeds)
