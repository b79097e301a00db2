"""Steady-state estimation from binned run records, and statistical verdicts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InsufficientBatches

MIN_BATCHES = 5


# ---------------------------------------------------------------------------
# Run record: cumulative counters at equally spaced bin edges
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Cumulative per-pool counters sampled at bin edges ``0 = t_0 < ... < t_B``.

    ``tail[b, j, k]`` is the time integral over ``[0, t_b]`` of the number of
    pool-``j`` servers holding at least ``k`` customers. Estimates are pure
    functions of this record.
    """

    edges: np.ndarray
    routed: np.ndarray
    blocked: np.ndarray
    waited: np.ndarray
    departed: np.ndarray
    pull_msgs: np.ndarray
    query_msgs: np.ndarray
    tail: np.ndarray
    pool_sizes: tuple
    horizon: float
    policy: str = ""
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return int(sum(self.pool_sizes))

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @classmethod
    def from_snapshots(cls, snaps, scaled, horizon, policy=""):
        J = len(scaled.pool_sizes)
        K = max(len(lv) for s in snaps for lv in s[7])
        tail = np.zeros((len(snaps), J, K))
        for b, s in enumerate(snaps):
            for j, lv in enumerate(s[7]):
                tail[b, j, : len(lv)] = lv
        col = lambda i: np.array([s[i] for s in snaps], dtype=np.int64)  # noqa: E731
        return cls(
            edges=np.array([s[0] for s in snaps], dtype=float),
            routed=col(1),
            blocked=col(2),
            waited=col(3),
            departed=col(4),
            pull_msgs=col(5),
            query_msgs=col(6),
            tail=tail,
            pool_sizes=tuple(scaled.pool_sizes),
            horizon=float(horizon),
            policy=policy,
        )

    def save(self, path) -> None:
        np.savez(
            path,
            edges=self.edges,
            routed=self.routed,
            blocked=self.blocked,
            waited=self.waited,
            departed=self.departed,
            pull_msgs=self.pull_msgs,
            query_msgs=self.query_msgs,
            tail=self.tail,
            pool_sizes=np.array(self.pool_sizes),
            horizon=self.horizon,
            policy=self.policy,
            seed=-1 if self.seed is None else self.seed,
        )

    @classmethod
    def load(cls, path) -> "RunRecord":
        z = np.load(path, allow_pickle=False)
        seed = int(z["seed"])
        return cls(
            edges=z["edges"],
            routed=z["routed"],
            blocked=z["blocked"],
            waited=z["waited"],
            departed=z["departed"],
            pull_msgs=z["pull_msgs"],
            query_msgs=z["query_msgs"],
            tail=z["tail"],
            pool_sizes=tuple(int(v) for v in z["pool_sizes"]),
            horizon=float(z["horizon"]),
            policy=str(z["policy"]),
            seed=None if seed < 0 else seed,
        )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Steady-state estimates with 95% batch-means half-widths (``*_ci``).

    Probabilities are per routed arrival, so ``waiting_prob + immediate_prob +
    blocking_prob == 1``.
    """

    waiting_prob: float
    waiting_ci: float
    blocking_prob: float
    blocking_ci: float
    immediate_prob: float
    msg_per_customer: float
    msg_ci: float
    pull_msg_per_customer: float
    query_msg_per_customer: float
    tail: List[List[float]]
    tail_ci: List[List[float]]
    tail_overall: List[float]
    tail_overall_ci: List[float]
    pool_waiting: List[float]
    pool_blocking: List[float]
    pool_waiting_ci: List[float]
    pool_blocking_ci: List[float]
    mean_in_system: float
    growth_slope: float
    growth_ci: float
    samples: int
    arrivals: int
    window: tuple = (0.0, 0.0)

    @classmethod
    def empty(cls, n_pools: int) -> "MetricsReport":
        return cls(
            waiting_prob=0.0, waiting_ci=0.0, blocking_prob=0.0, blocking_ci=0.0,
            immediate_prob=0.0, msg_per_customer=0.0, msg_ci=0.0,
            pull_msg_per_customer=0.0, query_msg_per_customer=0.0,
            tail=[[1.0] for _ in range(n_pools)], tail_ci=[[0.0] for _ in range(n_pools)],
            tail_overall=[1.0], tail_overall_ci=[0.0],
            pool_waiting=[0.0] * n_pools, pool_blocking=[0.0] * n_pools,
            pool_waiting_ci=[0.0] * n_pools, pool_blocking_ci=[0.0] * n_pools,
            mean_in_system=0.0, growth_slope=0.0, growth_ci=0.0, samples=0, arrivals=0,
        )

    @property
    def unstable(self) -> bool:
        return self.growth_slope - self.growth_ci > 0

    def p(self, k: int, pool: Optional[int] = None) -> float:
        """Fraction of servers (of ``pool``, or overall) with at least ``k`` customers."""
        arr = self.tail_overall if pool is None else self.tail[pool]
        return arr[k] if k < len(arr) else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def rows(self):
        """Flat ``(metric, pool, k, value, ci)`` rows."""
        yield ("waiting_prob", "all", "", self.waiting_prob, self.waiting_ci)
        yield ("blocking_prob", "all", "", self.blocking_prob, self.blocking_ci)
        yield ("immediate_prob", "all", "", self.immediate_prob, "")
        yield ("msg_per_customer", "all", "", self.msg_per_customer, self.msg_ci)
        yield ("pull_msg_per_customer", "all", "", self.pull_msg_per_customer, "")
        yield ("query_msg_per_customer", "all", "", self.query_msg_per_customer, "")
        yield ("mean_in_system", "all", "", self.mean_in_system, "")
        yield ("growth_slope", "all", "", self.growth_slope, self.growth_ci)
        for j in range(len(self.pool_waiting)):
            yield ("waiting_prob", j, "", self.pool_waiting[j], self.pool_waiting_ci[j])
            yield ("blocking_prob", j, "", self.pool_blocking[j], self.pool_blocking_ci[j])
        for k, (v, c) in enumerate(zip(self.tail_overall, self.tail_overall_ci)):
            yield ("p", "all", k, v, c)
        for j, (pv, pc) in enumerate(zip(self.tail, self.tail_ci)):
            for k, (v, c) in enumerate(zip(pv, pc)):
                yield ("p", j, k, v, c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "pool", "k", "value", "ci"])
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def _halfwidth(values: np.ndarray, level: float = 0.95) -> float:
    m = len(values)
    if m < 2:
        return math.inf
    return float(stats.t.ppf(0.5 + level / 2, m - 1) * values.std(ddof=1) / math.sqrt(m))


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _batch_edges(record: RunRecord, warmup_fraction: float, n_batches: int):
    if n_batches < MIN_BATCHES:
        raise InsufficientBatches(f"need at least {MIN_BATCHES} batches, got {n_batches}")
    B = record.n_bins
    start = int(round(warmup_fraction * B))
    if B - start < n_batches:
        raise InsufficientBatches(
            f"only {B - start} bins after warm-up for {n_batches} batches"
        )
    return [int(c[0]) for c in np.array_split(np.arange(start, B), n_batches)] + [B]


def estimate_steady_state(records, warmup_fraction: float = 0.2, n_batches: int = 20) -> MetricsReport:
    """Batch-means estimates from one record or a list of replication records.

    The first ``warmup_fraction`` of each horizon is discarded; the rest is cut
    into ``n_batches`` contiguous batches. Batches from several replications
    are pooled (sorted by seed first, so the merge does not depend on order).
    """
    if isinstance(records, RunRecord):
        records = [records]
    records = sorted(records, key=lambda r: (-1 if r.seed is None else r.seed))
    sizes = np.asarray(records[0].pool_sizes, dtype=float)
    n = sizes.sum()
    K = max(r.tail.shape[2] for r in records)

    cols = {key: [] for key in ("dt", "routed", "blocked", "waited", "pull", "query", "area")}
    growth = []
    for r in records:
        idx = _batch_edges(r, warmup_fraction, n_batches)
        tail = np.zeros((r.tail.shape[0], r.tail.shape[1], K))
        tail[:, :, : r.tail.shape[2]] = r.tail
        d = lambda a: np.diff(a[idx], axis=0)  # noqa: E731
        cols["dt"].append(np.diff(r.edges[idx]))
        cols["routed"].append(d(r.routed))
        cols["blocked"].append(d(r.blocked))
        cols["waited"].append(d(r.waited))
        cols["pull"].append(d(r.pull_msgs).sum(axis=1))
        cols["query"].append(d(r.query_msgs))
        cols["area"].append(d(tail))
        bins = np.arange(idx[0], idx[-1] + 1)
        in_sys = np.diff(tail[bins, :, 1:].sum(axis=(1, 2))) / np.diff(r.edges[bins])
        mids = 0.5 * (r.edges[bins][1:] + r.edges[bins][:-1])
        growth.append(growth_diagnostic(mids, in_sys, n_batches=n_batches))
    c = {k: np.concatenate(v) for k, v in cols.items()}

    arrivals_b = c["routed"].sum(axis=1)
    blocked_b = c["blocked"].sum(axis=1)
    waited_b = c["waited"].sum(axis=1)
    admitted_b = arrivals_b - blocked_b
    msgs_b = c["pull"] + c["query"]
    A, Bk, W, Ad = arrivals_b.sum(), blocked_b.sum(), waited_b.sum(), admitted_b.sum()
    T = c["dt"].sum()

    area = c["area"]  # (batches, J, K)
    pool_tail_b = area / (sizes[None, :, None] * c["dt"][:, None, None])
    all_tail_b = area.sum(axis=1) / (n * c["dt"][:, None])
    pool_tail = area.sum(axis=0) / (sizes[:, None] * T)
    all_tail = area.sum(axis=(0, 1)) / (n * T)
    hw = lambda v: _halfwidth(v) if len(v) > 1 else 0.0  # noqa: E731

    if len(growth) == 1:
        slope, gci = growth[0].slope, growth[0].ci
    else:
        slopes = np.array([g.slope for g in growth])
        se = math.sqrt(sum((g.ci / max(g.t_crit, 1e-300)) ** 2 for g in growth)) / len(growth)
        slope, gci = float(slopes.mean()), 1.959963984540054 * se

    routed_pool = c["routed"].sum(axis=0)
    return MetricsReport(
        waiting_prob=float(W / A) if A else 0.0,
        waiting_ci=hw(_ratio(waited_b, arrivals_b)),
        blocking_prob=float(Bk / A) if A else 0.0,
        blocking_ci=hw(_ratio(blocked_b, arrivals_b)),
        immediate_prob=float((Ad - W) / A) if A else 0.0,
        msg_per_customer=float(msgs_b.sum() / A) if A else 0.0,
        msg_ci=hw(_ratio(msgs_b, arrivals_b)),
        pull_msg_per_customer=float(c["pull"].sum() / A) if A else 0.0,
        query_msg_per_customer=float(c["query"].sum() / A) if A else 0.0,
        tail=pool_tail.tolist(),
        tail_ci=[[hw(pool_tail_b[:, j, k]) for k in range(K)] for j in range(len(sizes))],
        tail_overall=all_tail.tolist(),
        tail_overall_ci=[hw(all_tail_b[:, k]) for k in range(K)],
        pool_waiting=_ratio(c["waited"].sum(axis=0), routed_pool).tolist(),
        pool_blocking=_ratio(c["blocked"].sum(axis=0), routed_pool).tolist(),
        pool_waiting_ci=[
            hw(_ratio(c["waited"][:, j], c["routed"][:, j]))
            for j in range(len(sizes))
        ],
        pool_blocking_ci=[hw(_ratio(c["blocked"][:, j], c["routed"][:, j])) for j in range(len(sizes))],
        mean_in_system=float(area[:, :, 1:].sum() / T),
        growth_slope=slope,
        growth_ci=gci,
        samples=len(arrivals_b),
        arrivals=int(A),
        window=(float(records[0].edges[_batch_edges(records[0], warmup_fraction, n_batches)[0]]),
                float(records[0].edges[-1])),
    )


# ---------------------------------------------------------------------------
# Reference values and diagnostics
# ---------------------------------------------------------------------------

def jsqd_tail_reference(rho: float, d: int, k: int) -> float:
    """Limiting fraction of servers with queue >= k under JSQ(d) at load ``rho``."""
    if d == 1:
        return rho ** k
    return rho ** ((d ** k - 1) / (d - 1))


@dataclass(frozen=True)
class GrowthResult:
    slope: float
    ci: float
    t_crit: float = math.inf

    @property
    def unstable(self) -> bool:
        return self.slope - self.ci > 0

    @property
    def contains_zero(self) -> bool:
        return abs(self.slope) <= self.ci


def growth_diagnostic(times, values, n_batches: Optional[int] = 20, level: float = 0.95) -> GrowthResult:
    """Least-squares slope of customers-in-system against time, with a t-interval.

    Consecutive points are first averaged into ``n_batches`` groups so that the
    residuals are roughly independent.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 2:
        raise ValueError("growth diagnostic needs at least two time points")
    if n_batches and len(t) > n_batches:
        groups = np.array_split(np.arange(len(t)), n_batches)
        t = np.array([t[g].mean() for g in groups])
        y = np.array([y[g].mean() for g in groups])
    m = len(t)
    tc = t - t.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ (y - y.mean()) / sxx)
    if m <= 2:
        return GrowthResult(slope, math.inf)
    resid = y - y.mean() - slope * tc
    se = math.sqrt(float(resid @ resid) / (m - 2) / sxx)
    tq = float(stats.t.ppf(0.5 + level / 2, m - 2))
    return GrowthResult(slope, tq * se, tq)


@dataclass(frozen=True)
class DominanceResult:
    a_le_b: bool
    b_le_a: bool
    max_gap: float
    band: float

    @property
    def verdict(self) -> str:
        if self.a_le_b and self.b_le_a:
            return "equivalent"
        if self.a_le_b:
            return "a<=b"
        if self.b_le_a:
            return "b<=a"
        return "incomparable"


def empirical_dominance(samples_a, samples_b, level: float = 0.95) -> DominanceResult:
    """Compare empirical survival functions of two integer samples.

    ``a <= b`` holds when ``P_a(X >= k) <= P_b(X >= k) + band`` for every ``k``,
    where ``band`` adds the two-sided DKW half-widths of both samples.
    """
    a = np.asarray(samples_a).ravel()
    b = np.asarray(samples_b).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    alpha = 1.0 - level
    band = math.sqrt(math.log(2 / alpha) / (2 * a.size)) + math.sqrt(math.log(2 / alpha) / (2 * b.size))
    ks = np.union1d(a, b)
    sa = np.sort(a)
    sb = np.sort(b)
    surv_a = 1.0 - np.searchsorted(sa, ks, side="left") / a.size
    surv_b = 1.0 - np.searchsorted(sb, ks, side="left") / b.size
    diff = surv_a - surv_b
    return DominanceResult(
        a_le_b=bool(np.all(diff <= band)),
        b_le_a=bool(np.all(-diff <= band)),
        max_gap=float(np.abs(diff).max()),
        band=band,
    )
