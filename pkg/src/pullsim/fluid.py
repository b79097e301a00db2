"""Mean-field state space, fluid ODE, RK4 integrator and the metric on states."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidState, NoIdleMass, ShapeMismatch
from .model import SystemConfig, solve_equilibrium

K_MAX_DEFAULT = 64
IDLE_FLOOR = 1e-9
CLAMP_TOL = 1e-12
TRUNCATION_FLAG = 1e-9


@dataclass(frozen=True)
class MeanFieldState:
    """``x[k, j]``: fraction of all servers that sit in pool ``j`` with queue >= ``k``."""

    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))

    @property
    def k_max(self) -> int:
        return self.x.shape[0] - 1

    @property
    def y(self) -> np.ndarray:
        """Fractions with queue exactly ``k``."""
        return self.x - np.vstack([self.x[1:], np.zeros((1, self.x.shape[1]))])

    def check(self, betas=None, tol: float = CLAMP_TOL) -> None:
        x = self.x
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidState(f"state must be (K_max+1, J) with K_max >= 1, got {x.shape}")
        if betas is not None and np.any(np.abs(x[0] - np.asarray(betas)) > tol):
            raise InvalidState("row k=0 must equal the pool fractions")
        if np.any(x < -tol):
            raise InvalidState("negative fraction")
        if np.any(np.diff(x, axis=0) > tol):
            raise InvalidState("fractions must be nonincreasing in k")

    @classmethod
    def idle(cls, config: SystemConfig, k_max: int = K_MAX_DEFAULT) -> "MeanFieldState":
        x = np.zeros((k_max + 1, len(config.pools)))
        x[0] = config.betas
        return cls(x)

    @classmethod
    def from_queues(cls, queues, pool_of, n_pools: int, k_max: int = K_MAX_DEFAULT):
        """Fluid-scaled state of a finite system; queues beyond ``k_max`` are truncated."""
        q = np.minimum(np.asarray(queues, dtype=int), k_max)
        counts = np.zeros((k_max + 2, n_pools))
        np.add.at(counts, (q, np.asarray(pool_of)), 1.0)
        ge = counts[::-1].cumsum(axis=0)[::-1][: k_max + 1]
        return cls(ge / len(q))


def equilibrium_state(config: SystemConfig, k_max: int = K_MAX_DEFAULT) -> MeanFieldState:
    eq = solve_equilibrium(config)
    x = np.zeros((k_max + 1, len(config.pools)))
    x[0] = config.betas
    x[1] = eq.nu
    return MeanFieldState(x)


def _rhs(x: np.ndarray, lam: float, mu: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    y[:-1] = x[:-1] - x[1:]
    y[-1] = x[-1]
    idle = y[0].sum()
    if idle <= 0:
        raise NoIdleMass(f"no idle servers (idle mass {idle:.3e})")
    dx = -mu * y
    dx[0] = 0.0
    dx[1] += lam * y[0] / idle
    return dx


def fluid_rhs(state: MeanFieldState, config: SystemConfig) -> np.ndarray:
    """Time derivative of every ``x[k, j]``; defined only while idle servers exist."""
    return _rhs(state.x, config.lam, np.asarray(config.mus, dtype=float))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # shape (T, K_max+1, J)
    stopped: bool = False
    tau: Optional[float] = None
    truncation_warning: bool = False

    def state(self, i: int) -> MeanFieldState:
        return MeanFieldState(self.states[i])

    def at(self, t: float) -> MeanFieldState:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.state(i)

    def to_csv(self, path_or_file) -> None:
        """Rows ``t, pool, k, x``; zero entries above ``k = 2`` are skipped."""
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            write_state_rows(fh, self.times, self.states)
        finally:
            if own:
                fh.close()


def write_state_rows(fh, times, states) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "pool", "k", "x"])
    for t, x in zip(times, states):
        for j in range(x.shape[1]):
            for k in range(x.shape[0]):
                v = x[k, j]
                if v > 0 or k <= 2:
                    w.writerow([repr(float(t)), j, k, repr(float(v))])


def integrate_fluid(
    x0: MeanFieldState,
    config: SystemConfig,
    t_max: float,
    dt: float = 1e-3,
    sample_dt: Optional[float] = None,
    idle_floor: float = IDLE_FLOOR,
) -> Trajectory:
    """Fixed-step classical Runge-Kutta integration of the fluid ODE.

    States are recorded every ``sample_dt`` (default: every step). Integration
    stops early, with ``stopped=True`` and ``tau`` set, once the idle mass
    falls to ``idle_floor``: the dynamics are not defined past that point.
    """
    betas = np.asarray(config.betas, dtype=float)
    x0.check(betas)
    lam = config.lam
    mu = np.asarray(config.mus, dtype=float)
    x = x0.x.copy()
    _rhs(x, lam, mu)  # raises NoIdleMass at t=0

    n_steps = int(round(t_max / dt))
    stride = 1 if sample_dt is None else max(1, int(round(sample_dt / dt)))
    times = [0.0]
    states = [x.copy()]
    stopped, tau = False, None
    half = 0.5 * dt
    for step in range(1, n_steps + 1):
        try:
            k1 = _rhs(x, lam, mu)
            k2 = _rhs(x + half * k1, lam, mu)
            k3 = _rhs(x + half * k2, lam, mu)
            k4 = _rhs(x + dt * k3, lam, mu)
        except NoIdleMass:
            stopped, tau = True, (step - 1) * dt
            break
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x[(x < 0) & (x >= -CLAMP_TOL)] = 0.0
        x[0] = betas
        t = step * dt
        idle = (betas - x[1]).sum()
        if step % stride == 0 or step == n_steps or idle <= idle_floor:
            MeanFieldState(x).check(betas)
            times.append(t)
            states.append(x.copy())
        if idle <= idle_floor:
            stopped, tau = True, t
            break
    states = np.array(states)
    return Trajectory(
        times=np.array(times),
        states=states,
        stopped=stopped,
        tau=tau,
        truncation_warning=bool(np.any(states[:, -1, :] > TRUNCATION_FLAG)),
    )


def rho(a: MeanFieldState, b: MeanFieldState) -> float:
    """Distance ``sum_j sum_k 2^-k |d| / (1 + |d|)`` between two states."""
    xa = a.x if isinstance(a, MeanFieldState) else np.asarray(a, dtype=float)
    xb = b.x if isinstance(b, MeanFieldState) else np.asarray(b, dtype=float)
    if xa.shape != xb.shape:
        raise ShapeMismatch(f"{xa.shape} vs {xb.shape}")
    d = np.abs(xa - xb)
    w = 2.0 ** -np.arange(xa.shape[0], dtype=float)
    return float((w[:, None] * (d / (1.0 + d))).sum())
