"""Primitive data of a multiclass processor-sharing queue with feedback.

Holds service/interarrival laws, the routing matrix and the initial
condition, and computes every derived matrix used by the limit objects
(Q, lambda, rho, Gamma, the lifting denominator, ...).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from scipy import special

from .errors import (
    ConfigError,
    InvalidScale,
    ModelError,
    SingularError,
    SpectralRadiusError,
)

FAMILIES = ("exponential", "erlang", "hyperexponential", "uniform", "excess")

POWER_ITERATIONS = 200
RADIUS_TOL = 1e-9


@dataclass(frozen=True)
class ServiceSpec:
    """A service-time law on (0, inf) with closed-form moments.

    ``family`` is one of exponential(rate), erlang(k, rate),
    hyperexponential(probs, rates), uniform(a, b) with a > 0, or
    ``excess`` which wraps another spec and represents its stationary
    excess-life law (used for initial residual services).
    """

    family: str
    params: tuple = ()
    base: "ServiceSpec | None" = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown service family {self.family!r}")
        f, p = self.family, self.params
        if f == "exponential":
            if len(p) != 1 or not p[0] > 0:
                raise ModelError("exponential needs a positive rate")
        elif f == "erlang":
            if len(p) != 2 or int(p[0]) != p[0] or p[0] < 1 or not p[1] > 0:
                raise ModelError("erlang needs integer k >= 1 and positive rate")
        elif f == "hyperexponential":
            probs, rates = p
            if len(probs) != len(rates) or len(probs) == 0:
                raise ModelError("hyperexponential needs matching probs/rates")
            if any(q < 0 for q in probs) or abs(sum(probs) - 1.0) > 1e-12:
                raise ModelError("hyperexponential probs must be a distribution")
            if any(not r > 0 for r in rates):
                raise ModelError("hyperexponential rates must be positive")
        elif f == "uniform":
            a, b = p
            if not (0 < a < b):
                raise ModelError("uniform(a, b) requires 0 < a < b")
        elif f == "excess":
            if self.base is None or self.base.family == "excess":
                raise ModelError("excess needs a non-excess base law")

    # constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, rate: float) -> "ServiceSpec":
        return cls("exponential", (float(rate),))

    @classmethod
    def erlang(cls, k: int, rate: float) -> "ServiceSpec":
        return cls("erlang", (int(k), float(rate)))

    @classmethod
    def hyperexponential(cls, probs, rates) -> "ServiceSpec":
        return cls("hyperexponential", (tuple(map(float, probs)), tuple(map(float, rates))))

    @classmethod
    def uniform(cls, a: float, b: float) -> "ServiceSpec":
        return cls("uniform", (float(a), float(b)))

    def excess(self) -> "ServiceSpec":
        """The excess-life law nu^e, with nu^e([0,x]) = (1/mean) int_0^x P(V > y) dy."""
        if self.family == "exponential":
            return self
        return ServiceSpec("excess", (), self)

    # moments ----------------------------------------------------------
    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def variance(self) -> float:
        return self.moment(2) - self.mean**2

    def moment(self, p: float) -> float:
        """<chi^p, nu> in closed form (p >= 0 real)."""
        f, q = self.family, self.params
        if f == "exponential":
            return math.gamma(p + 1) / q[0] ** p
        if f == "erlang":
            k, rate = q
            return math.exp(math.lgamma(k + p) - math.lgamma(k)) / rate**p
        if f == "hyperexponential":
            return sum(w * math.gamma(p + 1) / r**p for w, r in zip(*q))
        if f == "uniform":
            a, b = q
            return (b ** (p + 1) - a ** (p + 1)) / ((p + 1) * (b - a))
        base = self.base
        return base.moment(p + 1) / ((p + 1) * base.mean)

    # distribution functions -------------------------------------------
    def cdf(self, x) -> np.ndarray:
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        f, q = self.family, self.params
        if f == "exponential":
            return -np.expm1(-q[0] * x)
        if f == "erlang":
            return special.gammainc(q[0], q[1] * x)
        if f == "hyperexponential":
            return sum(w * -np.expm1(-r * x) for w, r in zip(*q))
        if f == "uniform":
            a, b = q
            return np.clip((x - a) / (b - a), 0.0, 1.0)
        base = self.base
        return 1.0 - base.integrated_sf(x) / base.mean

    def sf(self, x) -> np.ndarray:
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        f, q = self.family, self.params
        if f == "exponential":
            return np.exp(-q[0] * x)
        if f == "erlang":
            return special.gammaincc(q[0], q[1] * x)
        if f == "hyperexponential":
            return sum(w * np.exp(-r * x) for w, r in zip(*q))
        if f == "uniform":
            return 1.0 - self.cdf(x)
        base = self.base
        return base.integrated_sf(x) / base.mean

    def integrated_sf(self, x) -> np.ndarray:
        """E[(V - x)^+] = int_x^inf P(V > y) dy, closed form."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        f, q = self.family, self.params
        if f == "exponential":
            return np.exp(-q[0] * x) / q[0]
        if f == "erlang":
            k, rate = q
            return (k / rate) * special.gammaincc(k + 1, rate * x) - x * special.gammaincc(k, rate * x)
        if f == "hyperexponential":
            return sum(w * np.exp(-r * x) / r for w, r in zip(*q))
        if f == "uniform":
            a, b = q
            mid = (b - x) ** 2 / (2 * (b - a))
            return np.where(x < a, 0.5 * (a + b) - x, np.where(x < b, mid, 0.0))
        raise NotImplementedError("integrated tail of an excess law")

    # sampling ---------------------------------------------------------
    def sample(self, rng: np.random.Generator, size=None):
        f, q = self.family, self.params
        if f == "exponential":
            return rng.exponential(1.0 / q[0], size)
        if f == "erlang":
            return rng.gamma(q[0], 1.0 / q[1], size)
        if f == "hyperexponential":
            probs, rates = np.asarray(q[0]), np.asarray(q[1])
            idx = rng.choice(len(probs), size=size, p=probs)
            return rng.exponential(1.0 / rates[idx])
        if f == "uniform":
            return rng.uniform(q[0], q[1], size)
        # residual life = U * (length-biased draw)
        return rng.uniform(0.0, 1.0, size) * self.base._length_biased(rng, size)

    def _length_biased(self, rng, size):
        f, q = self.family, self.params
        if f == "exponential":
            return rng.gamma(2.0, 1.0 / q[0], size)
        if f == "erlang":
            return rng.gamma(q[0] + 1, 1.0 / q[1], size)
        if f == "hyperexponential":
            probs, rates = np.asarray(q[0]), np.asarray(q[1])
            w = probs / rates
            idx = rng.choice(len(probs), size=size, p=w / w.sum())
            return rng.gamma(2.0, 1.0 / rates[idx])
        a, b = q
        return np.sqrt(a * a + rng.uniform(0.0, 1.0, size) * (b * b - a * a))

    def to_dict(self) -> dict:
        f, q = self.family, self.params
        if f == "exponential":
            return {"family": f, "rate": q[0]}
        if f == "erlang":
            return {"family": f, "k": q[0], "rate": q[1]}
        if f == "hyperexponential":
            return {"family": f, "probs": list(q[0]), "rates": list(q[1])}
        if f == "uniform":
            return {"family": f, "a": q[0], "b": q[1]}
        return {"family": "excess"}


@dataclass(frozen=True)
class RenewalSpec:
    """Shape of an exogenous renewal process; the rate comes from alpha.

    ``scv`` is the squared coefficient of variation, so a_k = scv / alpha_k^2.
    """

    family: str = "exponential"
    shape: float = 1.0

    def __post_init__(self):
        if self.family == "erlang" and (int(self.shape) != self.shape or self.shape < 1):
            raise ModelError("erlang interarrivals need an integer shape")
        if self.family == "hyperexponential" and not self.shape > 1:
            raise ModelError("hyperexponential interarrivals need scv > 1")
        if self.family not in ("exponential", "erlang", "hyperexponential"):
            raise ModelError(f"unsupported interarrival family {self.family!r}")

    @property
    def scv(self) -> float:
        if self.family == "exponential":
            return 1.0
        if self.family == "erlang":
            return 1.0 / self.shape
        return float(self.shape)

    def for_rate(self, rate: float) -> ServiceSpec:
        if self.family == "exponential":
            return ServiceSpec.exponential(rate)
        if self.family == "erlang":
            return ServiceSpec.erlang(int(self.shape), rate * self.shape)
        # two-phase hyperexponential with balanced means
        c2 = self.shape
        p1 = 0.5 * (1.0 + math.sqrt((c2 - 1.0) / (c2 + 1.0)))
        p2 = 1.0 - p1
        return ServiceSpec.hyperexponential((p1, p2), (2 * p1 * rate, 2 * p2 * rate))

    def to_dict(self) -> dict:
        if self.family == "exponential":
            return {"family": "exponential"}
        if self.family == "erlang":
            return {"family": "erlang", "k": int(self.shape)}
        return {"family": "hyperexponential", "scv": self.shape}


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ModelError("routing matrix must be square")
        if np.any(P < 0) or np.any(P > 1):
            raise ModelError("routing probabilities must lie in [0, 1]")
        if np.any(P.sum(axis=1) > 1 + 1e-12):
            raise ModelError("routing row sums must be <= 1")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def exit_probs(self) -> np.ndarray:
        return np.clip(1.0 - self.P.sum(axis=1), 0.0, 1.0)

    def spectral_radius(self, iterations: int = POWER_ITERATIONS) -> float:
        """Gelfand estimate ||P^n||^(1/n) by power iteration from the ones vector."""
        x = np.ones(self.K)
        log_growth = 0.0
        for _ in range(iterations):
            x = self.P @ x
            norm = x.max()
            if norm == 0.0:
                return 0.0
            log_growth += math.log(norm)
            x /= norm
        return math.exp(log_growth / iterations)


@dataclass(frozen=True, eq=False)
class QueueModel:
    alpha: np.ndarray
    services: tuple
    routing: RoutingMatrix
    interarrival: tuple = ()
    z0: np.ndarray = None
    initial_services: tuple = ()
    theta: float = 0.5
    name: str = ""

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        K = alpha.shape[0]
        routing = self.routing if isinstance(self.routing, RoutingMatrix) else RoutingMatrix(self.routing)
        object.__setattr__(self, "routing", routing)
        if routing.K != K or len(self.services) != K:
            raise ModelError("dimension mismatch between alpha, services and routing")
        if np.any(alpha < 0):
            raise ModelError("alpha must be nonnegative")
        interarrival = tuple(self.interarrival) or (RenewalSpec(),) * K
        z0 = np.zeros(K, dtype=np.int64) if self.z0 is None else np.array(self.z0, dtype=np.int64)
        initial = tuple(self.initial_services) or tuple(s.excess() for s in self.services)
        if len(interarrival) != K or z0.shape != (K,) or len(initial) != K:
            raise ModelError("dimension mismatch in interarrival/initial data")
        if np.any(z0 < 0):
            raise ModelError("initial counts must be nonnegative")
        for s in tuple(self.services) + initial:
            for p in (1, 2, 4 + self.theta):
                if not math.isfinite(s.moment(p)):
                    raise ModelError(f"moment {p} of {s.family} is not finite")
        alpha.setflags(write=False)
        z0.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "interarrival", interarrival)
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "initial_services", initial)

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def P(self) -> np.ndarray:
        return self.routing.P

    def interarrival_law(self, k: int) -> ServiceSpec | None:
        if self.alpha[k] == 0:
            return None
        return self.interarrival[k].for_rate(self.alpha[k])

    @property
    def a(self) -> np.ndarray:
        """Interarrival variances (0 where alpha_k = 0)."""
        out = np.zeros(self.K)
        for k in range(self.K):
            if self.alpha[k] > 0:
                out[k] = self.interarrival[k].scv / self.alpha[k] ** 2
        return out

    def with_(self, **changes) -> "QueueModel":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": self.K,
            "alpha": self.alpha.tolist(),
            "interarrival": [r.to_dict() for r in self.interarrival],
            "services": [s.to_dict() for s in self.services],
            "routing": self.P.tolist(),
            "initial": {
                "counts": self.z0.tolist(),
                "services": [s.to_dict() for s in self.initial_services],
            },
            "theta": self.theta,
        }


def compute_Q(P) -> np.ndarray:
    """Q = (I - P')^{-1}; raises if the network is not open."""
    routing = P if isinstance(P, RoutingMatrix) else RoutingMatrix(P)
    radius = routing.spectral_radius()
    if radius >= 1.0 - RADIUS_TOL:
        raise SpectralRadiusError(f"routing spectral radius estimate {radius:.12g} >= 1")
    K = routing.K
    try:
        Q = np.linalg.solve(np.eye(K) - routing.P.T, np.eye(K))
    except np.linalg.LinAlgError as exc:
        raise SingularError("I - P' is singular") from exc
    if not np.all(np.isfinite(Q)):
        raise SingularError("I - P' is numerically singular")
    return Q


def neumann_Q(P, tol: float = 1e-15, max_terms: int = 100_000) -> np.ndarray:
    """Truncated Neumann series sum_n (P')^n, used as an independent check."""
    Pt = np.asarray(P, dtype=float).T
    K = Pt.shape[0]
    total = np.eye(K)
    term = np.eye(K)
    for _ in range(max_terms):
        term = term @ Pt
        total = total + term
        if np.abs(term).max() < tol:
            return total
    raise SpectralRadiusError("Neumann series did not converge")


def routing_covariance(P) -> np.ndarray:
    """H[k] = covariance of the routing vector of a class-k completion."""
    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    H = np.empty((K, K, K))
    for k in range(K):
        p = P[k]
        H[k] = np.diag(p) - np.outer(p, p)
    return H


def visit_count_covariance(P) -> np.ndarray:
    """B[l] = covariance of the per-class visit counts of a job entering as class l.

    B[l]_{k m} = Q_{km} Q_{ml} + (Q P')_{mk} Q_{kl} - Q_{kl} Q_{ml}.
    """
    P = P.P if isinstance(P, RoutingMatrix) else np.asarray(P, dtype=float)
    Q = compute_Q(P)
    QPt = Q @ P.T
    K = P.shape[0]
    B = np.empty((K, K, K))
    for l in range(K):
        B[l] = Q * Q[:, l][None, :] + QPt.T * Q[:, l][:, None] - np.outer(Q[:, l], Q[:, l])
    return B


@dataclass(frozen=True, eq=False)
class DerivedParams:
    K: int
    P: np.ndarray
    alpha: np.ndarray
    a: np.ndarray
    Q: np.ndarray
    lam: np.ndarray
    rho: float
    M: np.ndarray
    M2: np.ndarray
    M0: np.ndarray
    Lam: np.ndarray
    Dalpha: np.ndarray
    Sigma: np.ndarray
    Pi: np.ndarray
    H: np.ndarray
    Gamma: float
    dstar: float
    R: float
    Delta_F: np.ndarray
    lift_mass: np.ndarray = field(repr=False)

    @property
    def beta(self) -> np.ndarray:
        return np.diag(self.M).copy()

    def workload0(self, zbar0) -> float:
        """W(0) = e (M0 + M P' Q) zbar0."""
        zbar0 = np.asarray(zbar0, dtype=float)
        return float(np.sum((self.M0 + self.M @ self.P.T @ self.Q) @ zbar0))

    def summary(self) -> dict[str, Any]:
        return {
            "Q": self.Q.tolist(),
            "lambda": self.lam.tolist(),
            "rho": self.rho,
            "Gamma": self.Gamma,
            "dstar": self.dstar,
            "R": self.R,
            "Delta_F": self.Delta_F.tolist(),
            "lift_mass": self.lift_mass.tolist(),
        }


def derived_params(m: QueueModel) -> DerivedParams:
    K = m.K
    P = m.P
    Q = compute_Q(m.routing)
    alpha = m.alpha
    lam = Q @ alpha
    beta = np.array([s.mean for s in m.services])
    second = np.array([s.moment(2) for s in m.services])
    M = np.diag(beta)
    M2 = np.diag(second)
    M0 = np.diag([s.mean for s in m.initial_services])
    Lam = np.diag(lam)
    Dalpha = np.diag(alpha)
    Sigma = np.diag(second - beta**2)
    a = m.a
    Pi = np.diag(alpha**3 * a)
    H = routing_covariance(P)
    HL = np.tensordot(lam, H, axes=1)
    e = np.ones(K)
    Gamma = float(e @ (Lam @ Sigma + M @ Q @ (Pi + HL) @ Q.T @ M) @ e)
    rho = float(e @ M @ lam)
    dstar = float(e @ (0.5 * M2 + M @ P.T @ Q @ M) @ lam)
    R = float((e @ M2 @ lam) / (2.0 * e @ (0.5 * M2 + M @ Q @ P.T @ M) @ lam))
    Delta_F = 2.0 * M @ lam / float(e @ M2 @ lam)
    if not rho > 0 or not dstar > 0:
        raise ModelError("degenerate load: rho and dstar must be positive")
    for arr in (Q, lam, M, M2, M0, Lam, Dalpha, Sigma, Pi, H, Delta_F):
        arr.setflags(write=False)
    return DerivedParams(
        K=K, P=P, alpha=alpha, a=a, Q=Q, lam=lam, rho=rho, M=M, M2=M2, M0=M0,
        Lam=Lam, Dalpha=Dalpha, Sigma=Sigma, Pi=Pi, H=H, Gamma=Gamma,
        dstar=dstar, R=R, Delta_F=Delta_F, lift_mass=(M @ lam) / dstar,
    )


def heavy_traffic_sequence(base: QueueModel, sigma: float, r_values: Sequence[float],
                           zbar0=None) -> list[QueueModel]:
    """Scale exogenous rates so that r (1 - rho^r) = sigma for every r.

    If ``zbar0`` is given, the r-th model starts with round(r * zbar0) jobs.
    """
    rho_base = derived_params(base).rho
    if not rho_base > 0:
        raise InvalidScale("base load must be positive")
    models = []
    for r in r_values:
        if not r > 0:
            raise InvalidScale("r must be positive")
        c = (1.0 - sigma / r) / rho_base
        if c <= 0:
            raise InvalidScale(f"sigma={sigma} >= r={r}")
        z0 = base.z0 if zbar0 is None else np.rint(r * np.asarray(zbar0, float)).astype(np.int64)
        models.append(base.with_(alpha=base.alpha * c, z0=z0, name=f"{base.name}@r={r:g}"))
    return models


# config ---------------------------------------------------------------

def _service_from_dict(d: dict, base: ServiceSpec | None = None) -> ServiceSpec:
    if not isinstance(d, dict) or "family" not in d:
        raise ConfigError(f"service entry needs a 'family': {d!r}")
    f = d["family"]
    try:
        if f == "exponential":
            rate = d["rate"] if "rate" in d else 1.0 / float(d["mean"])
            return ServiceSpec.exponential(rate)
        if f == "erlang":
            k = int(d["k"])
            rate = d["rate"] if "rate" in d else k / float(d["mean"])
            return ServiceSpec.erlang(k, rate)
        if f == "hyperexponential":
            return ServiceSpec.hyperexponential(d["probs"], d["rates"])
        if f == "uniform":
            return ServiceSpec.uniform(d["a"], d["b"])
        if f == "excess":
            if base is None:
                raise ConfigError("'excess' is only valid for initial services")
            return base.excess()
    except KeyError as exc:
        raise ConfigError(f"service {f!r} missing parameter {exc}") from None
    raise ModelError(f"unknown service family {f!r}")


def _renewal_from_dict(d: dict) -> RenewalSpec:
    f = d.get("family", "exponential")
    if f == "exponential":
        return RenewalSpec()
    if f == "erlang":
        return RenewalSpec("erlang", float(d["k"]))
    if f == "hyperexponential":
        return RenewalSpec("hyperexponential", float(d["scv"]))
    raise ModelError(f"unsupported interarrival family {f!r}")


def model_from_dict(doc: dict) -> QueueModel:
    required = ("K", "alpha", "services", "routing")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"model config missing keys: {missing}")
    K = int(doc["K"])
    services = tuple(_service_from_dict(d) for d in doc["services"])
    if len(services) != K:
        raise ModelError("number of services does not match K")
    interarrival = tuple(_renewal_from_dict(d) for d in doc.get("interarrival", [{}] * K))
    init = doc.get("initial", {}) or {}
    counts = init.get("counts", [0] * K)
    init_services = init.get("services")
    if init_services is None:
        initial = tuple(s.excess() for s in services)
    else:
        if len(init_services) != K:
            raise ModelError("number of initial services does not match K")
        initial = tuple(_service_from_dict(d, s) for d, s in zip(init_services, services))
    alpha = np.asarray(doc["alpha"], dtype=float)
    routing = RoutingMatrix(np.asarray(doc["routing"], dtype=float).reshape(K, K))
    if "load" in doc:
        # rescale alpha so that rho equals the requested load
        beta = np.array([s.mean for s in services])
        rho = float(beta @ compute_Q(routing) @ alpha)
        if not rho > 0:
            raise ModelError("cannot rescale a model with zero load")
        alpha = alpha * (float(doc["load"]) / rho)
    return QueueModel(
        alpha=alpha,
        services=services,
        routing=routing,
        interarrival=interarrival,
        z0=np.asarray(counts, dtype=np.int64),
        initial_services=initial,
        theta=float(doc.get("theta", 0.5)),
        name=str(doc.get("name", "")),
    )


def load_model(path) -> QueueModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed model file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"model file {path} must hold a mapping")
    return model_from_dict(doc)
