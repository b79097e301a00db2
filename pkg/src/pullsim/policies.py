"""Routing policies and the router-side pull-message ledger."""
from __future__ import annotations

from typing import List, Optional, Sequence

from .errors import LedgerInconsistent


class PullLedger:
    """Outstanding pull-messages held by the router.

    A server with capacity ``cap`` and queue ``q`` has ``max(cap - q, 0)``
    messages outstanding. Basic PULL uses ``cap = 1`` everywhere (one message
    per idle server). Messages live in a flat multiset so a uniformly chosen
    message is one random index away.
    """

    __slots__ = ("caps", "credits", "tokens")

    def __init__(self, caps: Sequence[int], queues: Sequence[int]):
        self.caps = list(caps)
        self.credits = [0] * len(self.caps)
        self.tokens: List[int] = []
        for i, (c, q) in enumerate(zip(self.caps, queues)):
            k = max(c - q, 0)
            self.credits[i] = k
            self.tokens.extend([i] * k)

    @property
    def total(self) -> int:
        return len(self.tokens)

    def take(self, rng) -> Optional[int]:
        """Remove a uniformly chosen message and return its server, or None."""
        tokens = self.tokens
        m = len(tokens)
        if not m:
            return None
        idx = int(rng.random() * m)
        s = tokens[idx]
        tokens[idx] = tokens[-1]
        tokens.pop()
        if self.credits[s] <= 0:
            raise LedgerInconsistent(f"message from server {s} with no credit on record")
        self.credits[s] -= 1
        return s

    def on_departure(self, server: int, q_after: int) -> int:
        """A service completion left ``q_after`` customers; returns messages sent."""
        if q_after < self.caps[server]:
            self.credits[server] += 1
            self.tokens.append(server)
            return 1
        return 0

    def expected(self, queues: Sequence[int]) -> List[int]:
        return [max(c - q, 0) for c, q in zip(self.caps, queues)]

    def check(self, queues: Sequence[int]) -> None:
        """Rebuild the ledger from queue lengths and compare."""
        want = self.expected(queues)
        if want != self.credits:
            bad = [i for i, (a, b) in enumerate(zip(want, self.credits)) if a != b]
            raise LedgerInconsistent(f"credits disagree with queues at servers {bad[:10]}")
        counts = [0] * len(self.caps)
        for s in self.tokens:
            counts[s] += 1
        if counts != self.credits:
            raise LedgerInconsistent("message multiset disagrees with per-server credits")


def random_route(n: int, rng) -> int:
    k = int(rng.random() * n)
    return k if k < n else n - 1


def pull_route(ledger: PullLedger, n: int, rng) -> int:
    """Basic PULL: a uniformly chosen idle server, else a uniform server.

    Routing never sends messages; they are emitted at departures.
    """
    s = ledger.take(rng)
    return random_route(n, rng) if s is None else s


def pull_gen_route(ledger: PullLedger, n: int, rng) -> int:
    """Generalized PULL: server ``i`` is chosen with probability ``credits_i / total``."""
    s = ledger.take(rng)
    return random_route(n, rng) if s is None else s


def jsqd_route(queues: Sequence[int], d: int, rng, tie_rng=None) -> int:
    """Shortest of ``d`` servers sampled with replacement; ties broken uniformly."""
    n = len(queues)
    best = random_route(n, rng)
    best_q = queues[best]
    ties = None
    for _ in range(d - 1):
        s = random_route(n, rng)
        qs = queues[s]
        if qs < best_q:
            best, best_q, ties = s, qs, None
        elif qs == best_q:
            if ties is None:
                ties = [best]
            ties.append(s)
    if ties is not None:
        best = ties[random_route(len(ties), tie_rng or rng)]
    return best


class RoutingPolicy:
    """Stateful router. The engine calls ``bind`` once, then ``route`` and
    ``on_departure`` as events occur."""

    name = "base"
    query_messages_per_arrival = 0

    def bind(self, queues: List[int], slots: Sequence[int], streams: dict) -> None:
        self.queues = queues
        self.n = len(queues)
        self.rng = streams["routing"]
        self.tie_rng = streams["policy"]

    def route(self) -> int:
        raise NotImplementedError

    def on_departure(self, server: int, q_after: int) -> int:
        return 0

    @property
    def ledger(self) -> Optional[PullLedger]:
        return None

    def __repr__(self):
        return f"{type(self).__name__}()"


class RandomPolicy(RoutingPolicy):
    name = "random"

    def route(self) -> int:
        return random_route(self.n, self.rng)


class JSQPolicy(RoutingPolicy):
    def __init__(self, d: int = 2):
        if int(d) < 1:
            raise ValueError(f"JSQ(d) needs d >= 1, got {d}")
        self.d = int(d)
        self.query_messages_per_arrival = 2 * self.d

    @property
    def name(self):
        return f"jsq:{self.d}"

    def route(self) -> int:
        return jsqd_route(self.queues, self.d, self.rng, self.tie_rng)

    def __repr__(self):
        return f"JSQPolicy(d={self.d})"


class PullPolicy(RoutingPolicy):
    """Basic PULL; sees only its own message ledger and the server count."""

    name = "pull"
    generalized = False

    def bind(self, queues, slots, streams):
        super().bind(queues, slots, streams)
        caps = list(slots) if self.generalized else [1] * len(queues)
        self._ledger = PullLedger(caps, queues)
        self.queues = None  # not observable by the router

    @property
    def ledger(self):
        return self._ledger

    def route(self) -> int:
        if self.generalized:
            return pull_gen_route(self._ledger, self.n, self.rng)
        return pull_route(self._ledger, self.n, self.rng)

    def on_departure(self, server: int, q_after: int) -> int:
        return self._ledger.on_departure(server, q_after)


class GeneralizedPullPolicy(PullPolicy):
    name = "pull-gen"
    generalized = True


def make_policy(spec) -> RoutingPolicy:
    """Parse ``pull | pull-gen | jsq:<d> | random`` (a policy instance passes through)."""
    if isinstance(spec, RoutingPolicy):
        return spec
    s = str(spec).strip().lower()
    if s == "pull":
        return PullPolicy()
    if s in ("pull-gen", "pull_gen"):
        return GeneralizedPullPolicy()
    if s == "random":
        return RandomPolicy()
    if s.startswith("jsq"):
        _, _, d = s.partition(":")
        try:
            return JSQPolicy(int(d) if d else 2)
        except ValueError as exc:
            raise ValueError(f"bad policy {spec!r}: {exc}") from None
    raise ValueError(f"unknown policy {spec!r}; expected pull | pull-gen | jsq:<d> | random")
