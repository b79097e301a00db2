"""Event-driven simulation of the finite-n heterogeneous system."""
from __future__ import annotations

import copy
import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvariantViolation, PhantomDeparture
from .model import Exponential, Hyperexponential, Pareto, ScaledSystem, SystemConfig
from .metrics import MetricsReport, RunRecord, estimate_steady_state
from .policies import make_policy
from .rng import make_streams

QUEUE_GUARD = 2 ** 31


# ---------------------------------------------------------------------------
# Service sampling
# ---------------------------------------------------------------------------

def inverse_survival(dist, u: float) -> float:
    """Duration ``z`` with survival probability ``u`` (exponential and Pareto)."""
    if isinstance(dist, Exponential):
        return -math.log(u) / dist.rate
    if isinstance(dist, Pareto):
        return (u ** (-1.0 / dist.alpha) - 1.0) / dist.sigma
    raise TypeError(f"no closed-form inverse survival for {type(dist).__name__}")


def sample_service(dist, rng) -> float:
    """One service duration drawn by inversion from ``rng``."""
    if isinstance(dist, Hyperexponential):
        u = rng.random()
        acc = 0.0
        rate = dist.branches[-1][1]
        for p, r in dist.branches:
            acc += p
            if u < acc:
                rate = r
                break
        return -math.log(rng.open_uniform()) / rate
    return inverse_survival(dist, rng.open_uniform())


def _sampler(dist, rng):
    """Fast zero-argument closure equivalent to ``sample_service(dist, rng)``."""
    if isinstance(dist, Exponential):
        u, log, rate = rng.open_uniform, math.log, dist.rate
        return lambda: -log(u()) / rate
    if isinstance(dist, Pareto):
        u, a, s = rng.open_uniform, -1.0 / dist.alpha, dist.sigma
        return lambda: (u() ** a - 1.0) / s
    return lambda: sample_service(dist, rng)


# ---------------------------------------------------------------------------
# Observers and trace
# ---------------------------------------------------------------------------

class Observer:
    """Base for grid observers: ``observe`` is called at every time in ``grid``."""

    def __init__(self, grid):
        self.grid = [float(t) for t in grid]

    def observe(self, t: float, sim: "Simulation") -> None:
        raise NotImplementedError


class FluidObserver(Observer):
    """Records the fluid-scaled state ``x^n[k, j]`` for ``k <= k_max``."""

    def __init__(self, grid, k_max: int = 4):
        super().__init__(grid)
        self.k_max = k_max
        self.times: List[float] = []
        self.states: List[np.ndarray] = []

    def observe(self, t, sim):
        x = np.zeros((self.k_max + 1, len(sim.cnt_ge)))
        for j, cg in enumerate(sim.cnt_ge):
            m = min(len(cg), self.k_max + 1)
            x[:m, j] = cg[:m]
        self.times.append(t)
        self.states.append(x / sim.n)

    def to_csv(self, fh) -> None:
        from .fluid import write_state_rows

        write_state_rows(fh, self.times, self.states)


class QueueSnapshotObserver(Observer):
    """Copies every server's queue length at grid times."""

    def __init__(self, grid):
        super().__init__(grid)
        self.times: List[float] = []
        self.snapshots: List[np.ndarray] = []

    def observe(self, t, sim):
        self.times.append(t)
        self.snapshots.append(np.array(sim.q, dtype=np.int64))

    def pooled(self) -> np.ndarray:
        return np.concatenate(self.snapshots) if self.snapshots else np.zeros(0, dtype=np.int64)


class WorkObserver(Observer):
    """Unfinished work of every server at grid times (sampled-duration pools only)."""

    def __init__(self, grid):
        super().__init__(grid)
        self.times: List[float] = []
        self.work: List[np.ndarray] = []

    def observe(self, t, sim):
        self.times.append(t)
        self.work.append(np.array([sim.unfinished_work(i, t) for i in range(sim.n)]))


@dataclass
class EventTrace:
    rows: List[tuple] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, EventTrace) and self.rows == other.rows

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "kind", "server", "pool", "q_after"])
        for t, kind, s, j, qa in self.rows:
            w.writerow([repr(t), kind, s, j, qa])


# ---------------------------------------------------------------------------
# Simulation state
# ---------------------------------------------------------------------------

@dataclass
class ReplicationResult:
    counters: dict
    queues: List[int]
    record: RunRecord
    report: MetricsReport
    trace: Optional[EventTrace]
    observers: list
    overflow: bool = False
    initial_in_system: int = 0

    @property
    def in_system(self) -> int:
        return sum(self.queues)


class Simulation:
    """State of one replication: queues, event calendar, clock, streams, counters.

    Pools with a ``rate_profile`` run in Markov mode: one pending departure per
    busy server at rate ``f(q)``, resampled whenever ``q`` changes. All other
    pools attach a sampled service requirement to each admitted customer and
    fill ``slots`` service positions in FCFS order (or preemptive LIFO when
    ``discipline='lifo'`` and ``slots == 1``).
    """

    def __init__(
        self,
        scaled: ScaledSystem,
        config: SystemConfig,
        policy,
        seed: int,
        *,
        initial_queues: Optional[Sequence[int]] = None,
        trace: bool = False,
        discipline: str = "fcfs",
        check_invariants: bool = False,
    ):
        if discipline not in ("fcfs", "lifo"):
            raise ValueError(f"discipline must be 'fcfs' or 'lifo', got {discipline!r}")
        if discipline == "lifo" and any(p.slots != 1 or p.rate_profile for p in config.pools):
            raise ValueError("lifo discipline needs slots == 1 and sampled service in every pool")
        self.config = config
        self.scaled = scaled
        self.n = n = scaled.n
        self.lifo = discipline == "lifo"
        self.check_invariants = check_invariants
        self.streams = make_streams(seed)
        pools = config.pools
        self.pool_of = scaled.pool_of
        self.buffer = [pools[j].buffer for j in self.pool_of]
        self.slots = [pools[j].slots for j in self.pool_of]
        self.markov = [p.rate_profile is not None for p in pools]
        self.rate_table = [
            list(p.rate_profile) if p.rate_profile is not None else None for p in pools
        ]
        self.mu = [p.mu for p in pools]
        svc = self.streams["service"]
        self.samplers = [_sampler(p.dist, svc) for p in pools]

        self.q = [0] * n
        self.version = [0] * n
        self.waiting = [deque() for _ in range(n)]
        self.inserv: List[list] = [[] for _ in range(n)]
        self.stack: List[list] = [[] for _ in range(n)]
        self.calendar: list = []
        self._seq = 0
        self.clock = 0.0

        J = len(pools)
        self.cnt_ge = [[size] for size in scaled.pool_sizes]
        self.area = [[0.0] for _ in range(J)]
        self.last = [[0.0] for _ in range(J)]
        self.routed = [0] * J
        self.blocked = [0] * J
        self.waited = [0] * J
        self.departed = [0] * J
        self.pull_msgs = [0] * J
        self.arrivals = 0
        self.query_msgs = 0
        self.overflow = False
        self.trace = EventTrace() if trace else None

        if initial_queues is not None:
            self._load_initial(initial_queues)
        self.initial_in_system = sum(self.q)

        self.policy = copy.deepcopy(make_policy(policy))
        self.policy.bind(self.q, self.slots, self.streams)
        self.query_per_arrival = self.policy.query_messages_per_arrival

    # -- bookkeeping ------------------------------------------------------
    def _level_up(self, j: int, lvl: int, t: float) -> None:
        cg, ar, la = self.cnt_ge[j], self.area[j], self.last[j]
        if lvl == len(cg):
            cg.append(0)
            ar.append(0.0)
            la.append(t)
        ar[lvl] += cg[lvl] * (t - la[lvl])
        la[lvl] = t
        cg[lvl] += 1

    def _level_down(self, j: int, lvl: int, t: float) -> None:
        cg, ar, la = self.cnt_ge[j], self.area[j], self.last[j]
        ar[lvl] += cg[lvl] * (t - la[lvl])
        la[lvl] = t
        cg[lvl] -= 1

    def _schedule(self, t: float, server: int) -> None:
        self._seq += 1
        heapq.heappush(self.calendar, (t, self._seq, server, self.version[server]))

    def _load_initial(self, queues) -> None:
        queues = [int(v) for v in queues]
        if len(queues) != self.n:
            raise ValueError(f"initial_queues has {len(queues)} entries for n={self.n}")
        for s, v in enumerate(queues):
            j = self.pool_of[s]
            if v < 0 or v > self.buffer[s]:
                raise ValueError(f"initial queue {v} at server {s} outside [0, {self.buffer[s]}]")
            for lvl in range(1, v + 1):
                self._level_up(j, lvl, 0.0)
            self.q[s] = v
            if v == 0:
                continue
            if self.markov[j]:
                self._schedule(self.streams["service"].exponential() / self.rate_table[j][min(v, len(self.rate_table[j]) - 1)], s)
            elif self.lifo:
                w = self.samplers[j]()
                self.inserv[s].append(w)
                self._schedule(w, s)
                self.stack[s].extend(self.samplers[j]() for _ in range(v - 1))
            else:
                for i in range(v):
                    w = self.samplers[j]()
                    if i < self.slots[s]:
                        self.inserv[s].append(w)
                        self._schedule(w, s)
                    else:
                        self.waiting[s].append(w)

    def _markov_rate(self, j: int, q: int) -> float:
        tab = self.rate_table[j]
        return tab[q] if q < len(tab) else self.mu[j]

    def unfinished_work(self, s: int, t: float) -> float:
        """Remaining service requirement at server ``s`` (sampled-duration pools)."""
        if self.markov[self.pool_of[s]]:
            raise ValueError("unfinished work is not tracked for Markov-mode pools")
        w = sum(c - t for c in self.inserv[s])
        return w + sum(self.waiting[s]) + sum(self.stack[s])

    # -- event handlers ---------------------------------------------------
    def handle_arrival(self) -> int:
        """Route one arrival at the current clock; returns the chosen server."""
        t = self.clock
        self.arrivals += 1
        self.query_msgs += self.query_per_arrival
        s = self.policy.route()
        j = self.pool_of[s]
        qs = self.q[s]
        self.routed[j] += 1
        if qs >= self.buffer[s]:
            self.blocked[j] += 1
            if self.trace is not None:
                self.trace.rows.append((t, "blocked", s, j, qs))
            return s
        if qs >= self.slots[s]:
            self.waited[j] += 1
        lvl = qs + 1
        self._level_up(j, lvl, t)
        self.q[s] = lvl
        if lvl >= QUEUE_GUARD:
            self.overflow = True
        if self.markov[j]:
            self.version[s] += 1
            self._schedule(t + self.streams["service"].exponential() / self._markov_rate(j, lvl), s)
        else:
            w = self.samplers[j]()
            if self.lifo:
                if qs > 0:
                    cur = self.inserv[s]
                    self.stack[s].append(cur[0] - t)
                    self.version[s] += 1
                    cur.clear()
                self.inserv[s].append(t + w)
                self._schedule(t + w, s)
            elif qs < self.slots[s]:
                self.inserv[s].append(t + w)
                self._schedule(t + w, s)
            else:
                self.waiting[s].append(w)
        if self.trace is not None:
            self.trace.rows.append((t, "arrival", s, j, lvl))
        return s

    def handle_departure(self, s: int) -> None:
        """Complete one service at server ``s`` at the current clock."""
        t = self.clock
        j = self.pool_of[s]
        qs = self.q[s]
        if qs <= 0:
            raise PhantomDeparture(f"departure at empty server {s} at t={t}")
        self._level_down(j, qs, t)
        qa = qs - 1
        self.q[s] = qa
        self.departed[j] += 1
        if self.markov[j]:
            self.version[s] += 1
            if qa > 0:
                self._schedule(t + self.streams["service"].exponential() / self._markov_rate(j, qa), s)
        elif self.lifo:
            self.inserv[s].clear()
            if self.stack[s]:
                w = self.stack[s].pop()
                self.inserv[s].append(t + w)
                self._schedule(t + w, s)
        else:
            self.inserv[s].remove(t)
            if self.waiting[s]:
                w = self.waiting[s].popleft()
                self.inserv[s].append(t + w)
                self._schedule(t + w, s)
        self.pull_msgs[j] += self.policy.on_departure(s, qa)
        if self.trace is not None:
            self.trace.rows.append((t, "departure", s, j, qa))

    # -- record snapshots ---------------------------------------------------
    def _snapshot(self, t: float):
        tail = []
        for cg, ar, la in zip(self.cnt_ge, self.area, self.last):
            tail.append([a + c * (t - l) for c, a, l in zip(cg, ar, la)])
        return (
            t,
            list(self.routed),
            list(self.blocked),
            list(self.waited),
            list(self.departed),
            list(self.pull_msgs),
            self.query_msgs,
            tail,
        )

    def _check(self, s: int) -> None:
        qs = self.q[s]
        if qs < 0 or qs > self.buffer[s]:
            raise InvariantViolation(f"queue {qs} at server {s} outside [0, {self.buffer[s]}]")
        led = self.policy.ledger
        if led is not None:
            led.check(self.q)
        for j, cg in enumerate(self.cnt_ge):
            if cg[0] != self.scaled.pool_sizes[j] or any(b > a for a, b in zip(cg, cg[1:])):
                raise InvariantViolation(f"level counts of pool {j} inconsistent: {cg[:8]}")

    # -- main loop ----------------------------------------------------------
    def run(self, horizon: float, observers: Sequence[Observer] = (), n_bins: int = 400) -> RunRecord:
        horizon = float(horizon)
        marks = []
        if horizon > 0:
            marks.extend((horizon * b / n_bins, 0, b, None) for b in range(1, n_bins + 1))
        for oi, obs in enumerate(observers):
            marks.extend((t, 1, oi, obs) for t in obs.grid if 0.0 <= t <= horizon)
        marks.sort(key=lambda m: (m[0], m[1], m[2]))
        snaps = [self._snapshot(0.0)]

        arr_stream = self.streams["arrivals"]
        rate = self.scaled.arrival_rate
        next_arrival = arr_stream.exponential() / rate if horizon > 0 else math.inf
        cal = self.calendar
        version = self.version
        pop = heapq.heappop
        mi = 0
        n_marks = len(marks)
        next_mark = marks[0][0] if marks else math.inf
        inf = math.inf
        check = self.check_invariants

        while True:
            t_dep = cal[0][0] if cal else inf
            t_next = next_arrival if next_arrival <= t_dep else t_dep
            if t_next >= horizon:
                t_next = horizon
            while next_mark <= t_next and mi < n_marks:
                tm, kind, idx, obs = marks[mi]
                self.clock = tm
                if kind == 0:
                    snaps.append(self._snapshot(tm))
                else:
                    obs.observe(tm, self)
                mi += 1
                next_mark = marks[mi][0] if mi < n_marks else inf
            if t_next >= horizon or self.overflow:
                break
            self.clock = t_next
            if next_arrival <= t_dep:
                s = self.handle_arrival()
                next_arrival = t_next + arr_stream.exponential() / rate
            else:
                _, _, s, ver = pop(cal)
                if ver != version[s]:
                    continue
                self.handle_departure(s)
            if check:
                self._check(s)
        self.clock = min(horizon, self.clock) if self.overflow else horizon
        return RunRecord.from_snapshots(snaps, self.scaled, horizon, self.policy.name)

    def counters(self) -> dict:
        return {
            "arrivals": self.arrivals,
            "departures": sum(self.departed),
            "blocked": sum(self.blocked),
            "waited": sum(self.waited),
            "pull_messages_sent": sum(self.pull_msgs),
            "query_messages_sent": self.query_msgs,
        }


def run_replication(
    scaled: ScaledSystem,
    config: SystemConfig,
    policy,
    horizon: float,
    seed: int,
    observers: Sequence[Observer] = (),
    *,
    initial_queues: Optional[Sequence[int]] = None,
    trace: bool = False,
    discipline: str = "fcfs",
    check_invariants: bool = False,
    warmup: float = 0.2,
    n_batches: int = 20,
    n_bins: int = 400,
) -> ReplicationResult:
    """Simulate one replication up to ``horizon`` and summarise it.

    The outcome is a deterministic function of the inputs and ``seed``.
    """
    sim = Simulation(
        scaled,
        config,
        policy,
        seed,
        initial_queues=initial_queues,
        trace=trace,
        discipline=discipline,
        check_invariants=check_invariants,
    )
    record = sim.run(horizon, observers, n_bins=n_bins)
    record.seed = int(seed)
    if horizon > 0 and not sim.overflow:
        report = estimate_steady_state(record, warmup, n_batches)
    else:
        report = MetricsReport.empty(len(config.pools))
    return ReplicationResult(
        counters=sim.counters(),
        queues=list(sim.q),
        record=record,
        report=report,
        trace=sim.trace,
        observers=list(observers),
        overflow=sim.overflow,
        initial_in_system=sim.initial_in_system,
    )
