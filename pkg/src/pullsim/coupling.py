"""Two PULL systems driven on one probability space; checks pathwise ordering.

Only the basic model is supported: exponential service, one slot per server,
no queue-dependent rates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .errors import DominanceViolation, InitialStateNotDominated
from .model import Exponential, ScaledSystem, SystemConfig
from .rng import make_streams


class IdleSet:
    """Set of server indices with O(1) insert, delete and uniform choice."""

    __slots__ = ("items", "pos")

    def __init__(self, n: int, members):
        self.items: List[int] = []
        self.pos = [-1] * n
        for i in members:
            self.add(i)

    def __len__(self):
        return len(self.items)

    def __contains__(self, i):
        return self.pos[i] >= 0

    def add(self, i: int) -> None:
        if self.pos[i] < 0:
            self.pos[i] = len(self.items)
            self.items.append(i)

    def discard(self, i: int) -> None:
        p = self.pos[i]
        if p < 0:
            return
        last = self.items.pop()
        if last != i:
            self.items[p] = last
            self.pos[last] = p
        self.pos[i] = -1

    def choice(self, rng) -> int:
        m = len(self.items)
        k = int(rng.random() * m)
        return self.items[k if k < m else m - 1]


@dataclass
class CoupledSide:
    q: List[int]
    idle: IdleSet
    arrivals: int = 0
    waited: int = 0
    blocked: int = 0
    departures: int = 0


@dataclass
class DominanceReport:
    seed: int
    events: int
    violations: int = 0
    first_violation: Optional[dict] = None
    identical: bool = True
    small: dict = field(default_factory=dict)
    large: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _require_basic(config: SystemConfig) -> None:
    for j, p in enumerate(config.pools):
        if p.slots != 1 or p.rate_profile is not None or not isinstance(p.dist, Exponential):
            raise ValueError(f"pool {j}: coupling needs exponential service with one slot")


def run_coupled(
    scaled: ScaledSystem,
    config: SystemConfig,
    q0_small: Sequence[int],
    q0_large: Sequence[int],
    horizon: float,
    seed: int,
    raise_on_violation: bool = True,
) -> DominanceReport:
    """Drive a smaller and a larger PULL system with shared randomness.

    Arrivals are common. Departures use per-server potential-completion clocks
    (rate ``mu_j``) that act on every system whose server is nonempty. The
    routing coupling follows the monotonicity construction: a common uniform
    server when neither system has an idle server, independent choices when
    only the smaller one does, and otherwise the smaller system's idle pick,
    reused by the larger system when idle there and redrawn otherwise.
    """
    _require_basic(config)
    n = scaled.n
    q_s = [int(v) for v in q0_small]
    q_l = [int(v) for v in q0_large]
    if len(q_s) != n or len(q_l) != n:
        raise ValueError("initial states must have one entry per server")
    bad = [i for i in range(n) if q_s[i] > q_l[i]]
    if bad:
        raise InitialStateNotDominated(f"small exceeds large at servers {bad[:10]}")
    pool_of = scaled.pool_of
    buf = [config.pools[j].buffer for j in pool_of]
    for i in range(n):
        if q_l[i] > buf[i] or q_s[i] < 0:
            raise ValueError(f"initial queue outside [0, buffer] at server {i}")

    streams = make_streams(seed, names=("arrivals", "service", "routing", "routing_large"))
    arr, svc, route_s, route_l = (streams[k] for k in ("arrivals", "service", "routing", "routing_large"))
    small = CoupledSide(q_s, IdleSet(n, (i for i in range(n) if q_s[i] == 0)))
    large = CoupledSide(q_l, IdleSet(n, (i for i in range(n) if q_l[i] == 0)))

    # uniformised potential departures: pick a pool by total rate, then a server
    offsets = scaled.offsets
    pool_rates = [size * config.pools[j].mu for j, size in enumerate(scaled.pool_sizes)]
    total_rate = sum(pool_rates)
    cum = []
    acc = 0.0
    for r in pool_rates:
        acc += r
        cum.append(acc / total_rate)
    lam_n = scaled.arrival_rate

    report = DominanceReport(seed=seed, events=0, identical=q_s == q_l)

    def admit(side: CoupledSide, i: int) -> None:
        side.arrivals += 1
        qi = side.q[i]
        if qi >= buf[i]:
            side.blocked += 1
            return
        if qi >= 1:
            side.waited += 1
        side.q[i] = qi + 1
        if qi == 0:
            side.idle.discard(i)

    def depart(side: CoupledSide, i: int) -> None:
        if side.q[i] > 0:
            side.q[i] -= 1
            side.departures += 1
            if side.q[i] == 0:
                side.idle.add(i)

    t = 0.0
    total = lam_n + total_rate
    p_arrival = lam_n / total
    while True:
        t += arr.exponential() / total
        if t >= horizon:
            break
        if arr.random() < p_arrival:
            kind = "arrival"
            if len(small.idle) == 0:
                i_s = i_l = int(route_s.random() * n) % n
            elif len(large.idle) == 0:
                i_s = small.idle.choice(route_s)
                i_l = int(route_l.random() * n) % n
            else:
                i_s = small.idle.choice(route_s)
                i_l = i_s if i_s in large.idle else large.idle.choice(route_l)
            admit(small, i_s)
            admit(large, i_l)
            touched = (i_s, i_l)
        else:
            kind = "departure"
            u = svc.random()
            j = 0
            while j < len(cum) - 1 and u >= cum[j]:
                j += 1
            i = offsets[j] + int(svc.random() * scaled.pool_sizes[j]) % scaled.pool_sizes[j]
            depart(small, i)
            depart(large, i)
            touched = (i,)
        report.events += 1
        for i in touched:
            if small.q[i] > large.q[i]:
                report.violations += 1
                ctx = {
                    "time": t,
                    "event": kind,
                    "server": i,
                    "q_small": small.q[i],
                    "q_large": large.q[i],
                    "event_index": report.events,
                }
                if report.first_violation is None:
                    report.first_violation = ctx
                if raise_on_violation:
                    raise DominanceViolation(f"ordering broken at server {i}, t={t:.6g}", ctx)
        if report.identical and any(small.q[i] != large.q[i] for i in touched):
            report.identical = False
    for name, side in (("small", small), ("large", large)):
        setattr(
            report,
            name,
            {
                "arrivals": side.arrivals,
                "waited": side.waited,
                "blocked": side.blocked,
                "departures": side.departures,
                "final_queues": list(side.q),
            },
        )
    return report
