"""Randomized invariant checks; each property runs 1000 derandomized cases.

Runnable on its own: ``pytest tests/test_properties.py``.
"""
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from pullsim.engine import FluidObserver, run_replication
from pullsim.fluid import MeanFieldState, rho
from pullsim.metrics import estimate_steady_state
from pullsim.model import INF, PoolSpec, SystemConfig, scale, subserver_profile, validate

CASES = settings(
    max_examples=1000,
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)


@st.composite
def systems(draw):
    J = draw(st.integers(1, 3))
    pools = []
    for j in range(J):
        mu = draw(st.sampled_from([0.5, 1.0, 2.0, 3.0]))
        slots = draw(st.integers(1, 3))
        buffer = draw(st.sampled_from([INF, slots, slots + 2]))
        markov = draw(st.booleans())
        pools.append(
            PoolSpec(
                1.0 / J,
                mu,
                buffer=buffer,
                slots=slots,
                rate_profile=subserver_profile(mu, slots) if markov else None,
            )
        )
    pools[-1] = PoolSpec(
        1.0 - sum(p.beta for p in pools[:-1]), pools[-1].mu, pools[-1].buffer,
        pools[-1].slots, rate_profile=pools[-1].rate_profile,
    )
    cap = sum(p.beta * p.mu for p in pools)
    lam = draw(st.floats(0.1, 1.5)) * cap  # supercritical allowed: finite horizon
    cfg = validate(SystemConfig(lam, tuple(pools)))
    n = draw(st.integers(J, 8))
    q0 = draw(
        st.lists(st.integers(0, 4), min_size=n, max_size=n)
    )
    sc = scale(cfg, n)
    q0 = [min(q, int(cfg.pools[j].buffer)) if not cfg.pools[j].unbounded else q
          for q, j in zip(q0, sc.pool_of)]
    policy = draw(st.sampled_from(["pull", "pull-gen", "jsq:1", "jsq:2", "random"]))
    seed = draw(st.integers(0, 2 ** 32))
    horizon = draw(st.floats(0.5, 4.0))
    return cfg, sc, q0, policy, seed, horizon


@CASES
@given(systems())
def test_ledger_reconstruction(case):
    cfg, sc, q0, policy, seed, horizon = case
    # check_invariants rebuilds the ledger from queues after every event
    res = run_replication(sc, cfg, policy, horizon, seed, initial_queues=q0,
                          check_invariants=True, warmup=0.0, n_batches=5, n_bins=10)
    assert all(0 <= q <= cfg.pools[j].buffer for q, j in zip(res.queues, sc.pool_of))


@CASES
@given(systems())
def test_tail_monotone(case):
    cfg, sc, q0, policy, seed, horizon = case
    grid = np.linspace(0, horizon, 5)
    obs = FluidObserver(grid, k_max=6)
    res = run_replication(sc, cfg, policy, horizon, seed, [obs], initial_queues=q0,
                          warmup=0.0, n_batches=5, n_bins=10)
    rep = res.report
    for tail in [rep.tail_overall] + rep.tail:
        assert all(a >= b for a, b in zip(tail, tail[1:]))
    for x in obs.states:
        assert np.all(np.diff(x, axis=0) <= 0)


@CASES
@given(systems())
def test_conservation(case):
    cfg, sc, q0, policy, seed, horizon = case
    res = run_replication(sc, cfg, policy, horizon, seed, initial_queues=q0,
                          warmup=0.0, n_batches=5, n_bins=10)
    c = res.counters
    assert c["arrivals"] == c["departures"] + c["blocked"] + res.in_system - res.initial_in_system
    rep = res.report
    if rep.arrivals:
        assert rep.waiting_prob + rep.immediate_prob + rep.blocking_prob == pytest.approx(1.0)
    if policy.startswith("jsq"):
        assert c["query_messages_sent"] == 2 * int(policy[4:]) * c["arrivals"]
    else:
        assert c["query_messages_sent"] == 0
    if policy == "random":
        assert c["pull_messages_sent"] == 0


@CASES
@given(systems())
def test_determinism_replay(case):
    cfg, sc, q0, policy, seed, horizon = case
    kw = dict(initial_queues=q0, trace=True, warmup=0.0, n_batches=5, n_bins=10)
    a = run_replication(sc, cfg, policy, horizon, seed, **kw)
    b = run_replication(sc, cfg, policy, horizon, seed, **kw)
    assert a.trace == b.trace
    assert a.counters == b.counters and a.queues == b.queues
    assert estimate_steady_state(a.record, 0.0, 5).to_dict() == a.report.to_dict()


_cols = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=6, max_size=6)


def _state(cols):
    return MeanFieldState(np.array([sorted(c, reverse=True) for c in cols]).T)


@CASES
@given(st.integers(1, 3).flatmap(lambda J: st.tuples(*[st.lists(_cols, min_size=J, max_size=J)] * 3)))
def test_rho_metric_axioms(triple):
    a, b, c = (_state(t) for t in triple)
    ab, ba = rho(a, b), rho(b, a)
    assert rho(a, a) == 0.0
    assert ab >= 0.0 and ab == pytest.approx(ba, abs=0.0)
    assert (ab == 0.0) == np.array_equal(a.x, b.x)
    assert rho(a, c) <= ab + rho(b, c) + 1e-12
