"""System description: service distributions, pools, scaling and the equilibrium point."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

from .errors import (
    BetaSumViolation,
    InvalidDistribution,
    NonPositiveParameter,
    NotSubcritical,
    NTooSmall,
    RateProfileShape,
    SlotsExceedBuffer,
    ValidationError,
)

INF = math.inf
BETA_SUM_TOL = 1e-12
EQUILIBRIUM_TOL = 1e-12


# ---------------------------------------------------------------------------
# Service distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    rate: float

    kind = "exp"

    def mean(self) -> float:
        return 1.0 / self.rate

    def hazard_floor(self) -> float:
        return self.rate

    def problems(self):
        if not self.rate > 0:
            yield NonPositiveParameter(f"exponential rate must be > 0, got {self.rate}")

    def to_dict(self):
        return {"kind": "exp", "rate": self.rate}


@dataclass(frozen=True)
class Pareto:
    """Survival function (1 + sigma*z)**(-alpha)."""

    sigma: float
    alpha: float

    kind = "pareto"

    def mean(self) -> float:
        return 1.0 / (self.sigma * (self.alpha - 1.0))

    def hazard_floor(self) -> float:
        return 0.0

    def problems(self):
        if not self.sigma > 0:
            yield NonPositiveParameter(f"pareto sigma must be > 0, got {self.sigma}")
        if not self.alpha > 1:
            yield InvalidDistribution(f"pareto alpha must be > 1 for a finite mean, got {self.alpha}")

    def to_dict(self):
        return {"kind": "pareto", "sigma": self.sigma, "alpha": self.alpha}


@dataclass(frozen=True)
class Hyperexponential:
    """Mixture of exponentials given as ``((prob, rate), ...)``."""

    branches: Tuple[Tuple[float, float], ...]

    kind = "hyperexp"

    def __post_init__(self):
        object.__setattr__(
            self, "branches", tuple((float(p), float(r)) for p, r in self.branches)
        )

    def mean(self) -> float:
        return sum(p / r for p, r in self.branches)

    def hazard_floor(self) -> float:
        return min(r for p, r in self.branches if p > 0)

    def problems(self):
        if not self.branches:
            yield InvalidDistribution("hyperexponential needs at least one branch")
            return
        for p, r in self.branches:
            if not r > 0:
                yield NonPositiveParameter(f"hyperexponential rate must be > 0, got {r}")
            if p < 0:
                yield InvalidDistribution(f"hyperexponential probability must be >= 0, got {p}")
        total = sum(p for p, _ in self.branches)
        if abs(total - 1.0) > 1e-12:
            yield InvalidDistribution(f"hyperexponential probabilities sum to {total}, not 1")

    def to_dict(self):
        return {"kind": "hyperexp", "branches": [list(b) for b in self.branches]}


ServiceDistribution = Union[Exponential, Pareto, Hyperexponential]


def distribution_mean(dist: ServiceDistribution) -> float:
    return dist.mean()


def pareto_with_mean(mean: float, alpha: float) -> Pareto:
    """Pareto law with shape ``alpha`` scaled to the requested mean."""
    return Pareto(sigma=1.0 / (mean * (alpha - 1.0)), alpha=alpha)


def dist_from_dict(d: dict) -> ServiceDistribution:
    kind = d.get("kind")
    if kind == "exp":
        return Exponential(rate=float(d["rate"]))
    if kind == "pareto":
        return Pareto(sigma=float(d["sigma"]), alpha=float(d["alpha"]))
    if kind == "hyperexp":
        return Hyperexponential(branches=tuple(tuple(b) for b in d["branches"]))
    raise InvalidDistribution(f"unknown distribution kind {kind!r}")


# ---------------------------------------------------------------------------
# Pools and system configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolSpec:
    """One server pool.

    ``rate_profile`` lists the total service rate ``f(Q)`` for ``Q = 0..slots``;
    ``f(Q) = mu`` for every larger queue. When ``dist`` is omitted each slot
    serves exponential requirements with mean ``slots / mu``.
    """

    beta: float
    mu: float
    buffer: float = INF
    slots: int = 1
    dist: Optional[ServiceDistribution] = None
    rate_profile: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.dist is None:
            rate = self.mu / self.slots if self.slots else self.mu
            object.__setattr__(self, "dist", Exponential(rate=rate))
        if self.rate_profile is not None:
            object.__setattr__(self, "rate_profile", tuple(float(v) for v in self.rate_profile))

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.buffer)

    def rate_at(self, q: int) -> float:
        """Total service rate with ``q`` customers present (Markov mode)."""
        if self.rate_profile is None:
            return min(q, self.slots) * self.mu / self.slots
        if q >= len(self.rate_profile):
            return self.mu
        return self.rate_profile[q]

    def to_dict(self):
        d = {
            "beta": self.beta,
            "mu": self.mu,
            "buffer": "inf" if self.unbounded else int(self.buffer),
            "slots": self.slots,
            "dist": self.dist.to_dict(),
        }
        if self.rate_profile is not None:
            d["rate_profile"] = list(self.rate_profile)
        return d


def subserver_profile(mu: float, slots: int) -> Tuple[float, ...]:
    """``f(Q) = Q * mu / slots`` capped at ``mu``: independent parallel sub-servers."""
    return tuple(min(q, slots) * mu / slots for q in range(slots + 1))


@dataclass(frozen=True)
class SystemConfig:
    lam: float
    pools: Tuple[PoolSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(self.pools))

    @property
    def betas(self):
        return [p.beta for p in self.pools]

    @property
    def mus(self):
        return [p.mu for p in self.pools]

    @property
    def capacity(self) -> float:
        return sum(p.beta * p.mu for p in self.pools)

    def to_dict(self):
        return {"lambda": self.lam, "pools": [p.to_dict() for p in self.pools]}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        pools = []
        for pd in d["pools"]:
            buf = pd.get("buffer", "inf")
            buf = INF if buf in ("inf", None) or buf == INF else int(buf)
            dist = dist_from_dict(pd["dist"]) if "dist" in pd else None
            profile = pd.get("rate_profile")
            pools.append(
                PoolSpec(
                    beta=float(pd["beta"]),
                    mu=float(pd["mu"]),
                    buffer=buf,
                    slots=int(pd.get("slots", 1)),
                    dist=dist,
                    rate_profile=tuple(profile) if profile is not None else None,
                )
            )
        return cls(lam=float(d["lambda"]), pools=tuple(pools))


def load_config(path) -> SystemConfig:
    with open(Path(path)) as fh:
        return SystemConfig.from_dict(json.load(fh))


def dump_config(config: SystemConfig, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


def two_pool_example(lam: float = 1.0, buffer: float = INF) -> SystemConfig:
    """Two equal pools with service rates 2 and 1/3 (unstable under JSQ(2))."""
    return SystemConfig(
        lam=lam,
        pools=(
            PoolSpec(beta=0.5, mu=2.0, buffer=buffer),
            PoolSpec(beta=0.5, mu=1.0 / 3.0, buffer=buffer),
        ),
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _pool_problems(j: int, pool: PoolSpec):
    where = f"pool {j}"
    if not pool.beta > 0:
        yield NonPositiveParameter(f"{where}: beta must be > 0, got {pool.beta}")
    elif pool.beta > 1:
        yield BetaSumViolation(f"{where}: beta must be <= 1, got {pool.beta}")
    if not pool.mu > 0:
        yield NonPositiveParameter(f"{where}: mu must be > 0, got {pool.mu}")
    if not (pool.unbounded or (pool.buffer >= 1 and float(pool.buffer).is_integer())):
        yield NonPositiveParameter(f"{where}: buffer must be a positive integer or inf, got {pool.buffer}")
    if not (isinstance(pool.slots, int) and pool.slots >= 1):
        yield NonPositiveParameter(f"{where}: slots must be an integer >= 1, got {pool.slots}")
        return
    if pool.slots > pool.buffer:
        yield SlotsExceedBuffer(f"{where}: slots {pool.slots} exceed buffer {pool.buffer}")
    for e in pool.dist.problems():
        yield type(e)(f"{where}: {e}")
    if pool.rate_profile is not None:
        f = pool.rate_profile
        if not isinstance(pool.dist, Exponential):
            yield RateProfileShape(f"{where}: rate_profile requires exponential service")
        if len(f) != pool.slots + 1:
            yield RateProfileShape(f"{where}: rate_profile needs {pool.slots + 1} entries, got {len(f)}")
        elif f[0] != 0:
            yield RateProfileShape(f"{where}: f(0) must be 0")
        elif any(b < a for a, b in zip(f, f[1:])):
            yield RateProfileShape(f"{where}: rate_profile must be nondecreasing")
        elif abs(f[-1] - pool.mu) > 1e-12 * max(1.0, pool.mu):
            yield RateProfileShape(f"{where}: f(slots) must equal mu")
        elif pool.slots > 1 and f[1] <= 0:
            yield RateProfileShape(f"{where}: f(1) must be positive")
    elif pool.mu > 0 and not list(pool.dist.problems()):
        want = pool.slots / pool.mu
        got = pool.dist.mean()
        if abs(got - want) > 1e-9 * want:
            yield InvalidDistribution(f"{where}: per-slot mean {got} should be slots/mu = {want}")


def validate(config: SystemConfig) -> SystemConfig:
    """Return ``config`` unchanged or raise ``ValidationError`` listing every violation."""
    errors = []
    if not config.lam > 0:
        errors.append(NonPositiveParameter(f"lambda must be > 0, got {config.lam}"))
    if not config.pools:
        errors.append(BetaSumViolation("at least one pool is required"))
    for j, pool in enumerate(config.pools):
        errors.extend(_pool_problems(j, pool))
    total = sum(p.beta for p in config.pools)
    if config.pools and abs(total - 1.0) > BETA_SUM_TOL:
        errors.append(BetaSumViolation(f"pool fractions sum to {total!r}, not 1"))
    if errors:
        raise ValidationError(errors)
    return config


def check_subcritical(config: SystemConfig) -> bool:
    return config.lam < config.capacity


# ---------------------------------------------------------------------------
# Finite-n scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaledSystem:
    n: int
    pool_sizes: Tuple[int, ...]
    arrival_rate: float

    @property
    def pool_of(self):
        """Pool index of every server; pools occupy contiguous index ranges."""
        out = []
        for j, size in enumerate(self.pool_sizes):
            out.extend([j] * size)
        return out

    @property
    def offsets(self):
        starts = [0]
        for size in self.pool_sizes:
            starts.append(starts[-1] + size)
        return starts


def scale(config: SystemConfig, n: int) -> ScaledSystem:
    """Split ``n`` servers across pools by largest remainder."""
    n = int(n)
    betas = config.betas
    if n < len(betas):
        raise NTooSmall(f"n={n} is smaller than the number of pools ({len(betas)})")
    raw = [b * n for b in betas]
    sizes = [math.floor(r) for r in raw]
    leftover = n - sum(sizes)
    order = sorted(range(len(betas)), key=lambda j: (-(raw[j] - sizes[j]), j))
    for j in order[:leftover]:
        sizes[j] += 1
    if any(s < 1 for s in sizes):
        raise NTooSmall(f"n={n} leaves an empty pool: sizes {sizes}")
    return ScaledSystem(n=n, pool_sizes=tuple(sizes), arrival_rate=config.lam * n)


# ---------------------------------------------------------------------------
# Equilibrium point
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumPoint:
    nu: Tuple[float, ...]
    idle_fraction: float
    pressure: float

    def residuals(self, config: SystemConfig):
        """(throughput residual, max deviation of per-pool pressure from the common value)."""
        lam_res = abs(config.lam - sum(v * p.mu for v, p in zip(self.nu, config.pools)))
        ratios = [v * p.mu / (p.beta - v) for v, p in zip(self.nu, config.pools)]
        return lam_res, max(abs(r - self.pressure) for r in ratios)


def _occupied(c: float, betas: Sequence[float], mus: Sequence[float]):
    return [c * b / (m + c) for b, m in zip(betas, mus)]


def solve_equilibrium(config: SystemConfig, tol: float = EQUILIBRIUM_TOL) -> EquilibriumPoint:
    """Occupied fractions at the fluid fixed point.

    With a common pressure ``c`` each pool holds ``c*beta/(mu + c)`` busy
    servers; the served rate is increasing in ``c``, so ``c`` is found by
    bisection on the throughput balance.
    """
    if not check_subcritical(config):
        raise NotSubcritical(
            f"lambda={config.lam} is not below capacity {config.capacity}"
        )
    betas, mus, lam = config.betas, config.mus, config.lam

    def served(c):
        return sum(v * m for v, m in zip(_occupied(c, betas, mus), mus))

    lo, hi = 0.0, 1.0
    while served(hi) <= lam:
        lo, hi = hi, 2.0 * hi
    c = 0.5 * (lo + hi)
    for _ in range(2000):
        c = 0.5 * (lo + hi)
        g = served(c)
        if abs(g - lam) <= tol or not lo < c < hi:
            break
        if g < lam:
            lo = c
        else:
            hi = c
    nu = tuple(_occupied(c, betas, mus))
    return EquilibriumPoint(nu=nu, idle_fraction=sum(b - v for b, v in zip(betas, nu)), pressure=c)
