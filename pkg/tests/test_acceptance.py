"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line (also repeated in the pytest
terminal summary). Seeds are fixed, so every run is reproducible.
"""
import functools
import math
import subprocess
import sys
from pathlib import Path

import mpmath
import numpy as np
import pytest

from pullsim.coupling import run_coupled
from pullsim.engine import FluidObserver, QueueSnapshotObserver, run_replication
from pullsim.fluid import MeanFieldState, equilibrium_state, integrate_fluid, rho
from pullsim.metrics import empirical_dominance, jsqd_tail_reference
from pullsim.model import (
    Hyperexponential,
    PoolSpec,
    SystemConfig,
    pareto_with_mean,
    scale,
    solve_equilibrium,
    two_pool_example,
    validate,
)
from pullsim.rng import seed_plan

pytestmark = pytest.mark.slow

TWO_POOL = two_pool_example()
HOMOGENEOUS = SystemConfig(0.9, (PoolSpec(1.0, 1.0),))


@functools.lru_cache(maxsize=None)
def _pull_run(n, horizon, seed, buffer=math.inf):
    cfg = two_pool_example(buffer=buffer)
    return run_replication(scale(cfg, n), cfg, "pull", horizon, seed)


@functools.lru_cache(maxsize=None)
def _jsq2_homogeneous():
    sc = scale(HOMOGENEOUS, 5000)
    return run_replication(sc, HOMOGENEOUS, "jsq:2", 200.0, 11, warmup=0.25)


def _oracle_nu(config, dps=50):
    """Bisection on the total idle fraction, carried out in extended precision.

    With idle total ``I`` each pool balances at ``nu_j = beta_j s / (mu_j + s)``
    where ``s = lam / I``; the fixed point solves ``sum_j (beta_j - nu_j) = I``.
    """
    with mpmath.workdps(dps):
        lam = mpmath.mpf(config.lam)
        betas = [mpmath.mpf(b) for b in config.betas]
        mus = [mpmath.mpf(m) for m in config.mus]

        def nus(I):
            s = lam / I
            return [b * s / (m + s) for b, m in zip(betas, mus)]

        def g(I):
            return sum(b - v for b, v in zip(betas, nus(I))) - I

        lo, hi = mpmath.mpf("1e-40"), mpmath.mpf(1)
        for _ in range(200):
            mid = (lo + hi) / 2
            if g(mid) > 0:
                lo = mid
            else:
                hi = mid
        return [float(v) for v in nus((lo + hi) / 2)]


def test_c01_equilibrium(verdict):
    rng = np.random.default_rng(20240601)
    worst_res, worst_box = 0.0, True
    for _ in range(1000):
        J = int(rng.integers(1, 6))
        w = rng.uniform(0.05, 1.0, J)
        betas = w / w.sum()
        mus = rng.uniform(0.05, 20.0, J)
        cap = float(betas @ mus)
        cfg = SystemConfig(float(rng.uniform(0.01, 0.995)) * cap,
                           tuple(PoolSpec(float(b), float(m)) for b, m in zip(betas, mus)))
        eq = solve_equilibrium(cfg)
        lam_res, ratio_res = eq.residuals(cfg)
        worst_res = max(worst_res, lam_res, ratio_res / max(1.0, eq.pressure))
        worst_box &= all(0 < v < b for v, b in zip(eq.nu, betas))
    nu = solve_equilibrium(TWO_POOL).nu
    oracle = _oracle_nu(TWO_POOL)
    gap = max(abs(a - b) for a, b in zip(nu, oracle))
    ok = worst_res <= 1e-10 and worst_box and gap <= 1e-10
    verdict("C1 equilibrium fixed point", ok,
            f"max residual {worst_res:.2e}, oracle gap {gap:.2e}, nu={nu[0]:.6f},{nu[1]:.6f}")
    assert ok


def test_c02_fluid_integrator(verdict):
    cfg = SystemConfig(0.5, (PoolSpec(1.0, 1.0),))
    traj = integrate_fluid(MeanFieldState.idle(cfg, 8), cfg, 10.0, 1e-3)
    err = float(np.max(np.abs(traj.states[:, 1, 0] - 0.5 * (1 - np.exp(-traj.times)))))

    traj = integrate_fluid(MeanFieldState.idle(TWO_POOL), TWO_POOL, 200.0, 1e-3, sample_dt=0.5)
    xs = traj.states
    x_star = equilibrium_state(TWO_POOL)
    nondecreasing = bool(np.all(np.diff(xs, axis=0) >= -1e-12))
    bounded = bool(np.all(xs <= x_star.x + 1e-12))
    dist = rho(traj.state(len(traj.times) - 1), x_star)
    ok = err <= 1e-6 and nondecreasing and bounded and dist <= 1e-3 and traj.times[-1] == 200.0
    verdict("C2 fluid integrator", ok,
            f"closed-form err {err:.2e}, monotone={nondecreasing}, <=x*={bounded}, rho(200)={dist:.2e}")
    assert ok


def test_c03_simulation_tracks_fluid(verdict):
    grid = np.arange(0.0, 20.0 + 1e-9, 0.5)
    sc = scale(TWO_POOL, 10000)
    runs = []
    for i in range(5):
        obs = FluidObserver(grid, k_max=2)
        run_replication(sc, TWO_POOL, "pull", 20.0, seed_plan(3, i), [obs])
        runs.append(np.array([s[1] for s in obs.states]))
    sim = np.mean(runs, axis=0)
    traj = integrate_fluid(MeanFieldState.idle(TWO_POOL), TWO_POOL, 20.0, 1e-3, sample_dt=0.5)
    assert np.allclose(traj.times, grid)
    gap = float(np.max(np.abs(sim - traj.states[:, 1, :])))
    ok = gap <= 0.02
    verdict("C3 simulation vs fluid (n=1e4, 5 seeds)", ok, f"max |x1^n - x1| = {gap:.4f}")
    assert ok


def test_c04_vanishing_waiting_and_blocking(verdict):
    plan = [(100, 2000.0, 7), (1000, 4000.0, 1), (10000, 60.0, 7)]
    w = [_pull_run(n, H, s).report for n, H, s in plan]
    b = [_pull_run(n, H, s, buffer=1).report for n, H, s in plan]
    wp = [r.waiting_prob for r in w]
    bp = [r.blocking_prob for r in b]
    ok_w = wp[0] > wp[1] > wp[2] and wp[2] <= 0.01 and wp[2] + w[2].waiting_ci <= 0.015
    ok_b = bp[0] > bp[1] > bp[2] and bp[2] <= 0.01 and bp[2] + b[2].blocking_ci <= 0.015
    verdict("C4 waiting vanishes (B=inf)", ok_w,
            "waiting " + ", ".join(f"n={n}:{p:.3g}" for (n, _, _), p in zip(plan, wp)))
    verdict("C4 blocking vanishes (B=1)", ok_b,
            "blocking " + ", ".join(f"n={n}:{p:.3g}" for (n, _, _), p in zip(plan, bp)))
    assert ok_w and ok_b


def test_c05_jsqd_tails(verdict):
    rep = _jsq2_homogeneous().report
    want = [jsqd_tail_reference(0.9, 2, k) for k in (1, 2, 3)]
    tol = [0.02, 0.02, 0.03]
    got = [rep.p(k) for k in (1, 2, 3)]
    ok2 = all(abs(g - t) <= e for g, t, e in zip(got, want, tol))

    # d=1: every server is an M/M/1 queue; start from its stationary law
    rng = np.random.default_rng(5)
    q0 = rng.geometric(0.1, 5000) - 1
    sc = scale(HOMOGENEOUS, 5000)
    rep1 = run_replication(sc, HOMOGENEOUS, "jsq:1", 100.0, 12, initial_queues=q0, warmup=0.1).report
    got1 = [rep1.p(k) for k in (1, 2, 3)]
    ok1 = all(abs(g - 0.9 ** k) <= 0.02 for g, k in zip(got1, (1, 2, 3)))
    verdict("C5 JSQ(2) tail law", ok2, "p1..p3 = " + ", ".join(f"{g:.4f}" for g in got))
    verdict("C5 JSQ(1) geometric tails", ok1, "p1..p3 = " + ", ".join(f"{g:.4f}" for g in got1))
    assert ok1 and ok2


def test_c06_jsq_instability(verdict):
    sc = scale(TWO_POOL, 2000)
    jsq = run_replication(sc, TWO_POOL, "jsq:2", 2000.0, 31).report
    pull = run_replication(sc, TWO_POOL, "pull", 2000.0, 31).report
    ok_j = jsq.growth_slope - jsq.growth_ci > 0
    ok_p = abs(pull.growth_slope) <= pull.growth_ci
    verdict("C6 JSQ(2) unstable on heterogeneous pools", ok_j,
            f"slope {jsq.growth_slope:.3f} +- {jsq.growth_ci:.3f}")
    verdict("C6 PULL stable on the same pools", ok_p,
            f"slope {pull.growth_slope:.4f} +- {pull.growth_ci:.4f}")
    assert ok_j and ok_p


def test_c07_message_accounting(verdict):
    pull = _pull_run(10000, 60.0, 7).report
    jsq = _jsq2_homogeneous()
    sc = scale(TWO_POOL, 1000)
    rnd = run_replication(sc, TWO_POOL, "random", 20.0, 8)
    ok_pull = abs(pull.msg_per_customer - 1.0) <= 0.01
    ok_jsq = jsq.report.msg_per_customer == 4.0 and (
        jsq.counters["query_messages_sent"] == 4 * jsq.counters["arrivals"]
    )
    ok_rnd = rnd.report.msg_per_customer == 0.0 and rnd.counters["pull_messages_sent"] == 0
    ok = ok_pull and ok_jsq and ok_rnd
    verdict("C7 message accounting", ok,
            f"PULL {pull.msg_per_customer:.5f}/customer, JSQ(2) {jsq.report.msg_per_customer}, "
            f"RANDOM {rnd.report.msg_per_customer}")
    assert ok


def test_c08_coupling(verdict):
    n = 10
    sc = scale(TWO_POOL, n)
    rng = np.random.default_rng(8)
    events = violations = 0
    for i in range(100):
        small = rng.integers(0, 3, n) if i % 2 else np.zeros(n, dtype=int)
        large = small + rng.integers(0, 4, n)
        rep = run_coupled(sc, TWO_POOL, small.tolist(), large.tolist(), 1000.0,
                          seed_plan(8, i), raise_on_violation=False)
        events += rep.events
        violations += rep.violations
    ok = violations == 0
    verdict("C8 monotone coupling", ok, f"100 seeds, {events} events, {violations} violations")
    assert ok


def test_c09_generalizations(verdict):
    gen = SystemConfig(1.0, (PoolSpec(0.5, 2.0, slots=4), PoolSpec(0.5, 1 / 3, slots=2)))
    validate(gen)
    r_gen = run_replication(scale(gen, 10000), gen, "pull-gen", 40.0, 13).report
    par = SystemConfig(
        1.0,
        (
            PoolSpec(0.5, 2.0, dist=pareto_with_mean(0.5, 2.0)),
            PoolSpec(0.5, 1 / 3, dist=pareto_with_mean(3.0, 2.0)),
        ),
    )
    validate(par)
    r_par = run_replication(scale(par, 10000), par, "pull", 60.0, 14).report
    ok_g = r_gen.waiting_prob <= 0.02
    ok_p = r_par.waiting_prob <= 0.02
    verdict("C9 generalized PULL, C=(4,2)", ok_g, f"waiting {r_gen.waiting_prob:.3g}")
    verdict("C9 Pareto(alpha=2) service, FCFS", ok_p, f"waiting {r_par.waiting_prob:.3g}")
    assert ok_g and ok_p


def test_c10_dhr_dominance(verdict):
    h1 = Hyperexponential(((0.5, 2.0), (0.5, 6.0)))
    h2 = Hyperexponential(((0.5, 0.5), (0.5, 1.5)))
    dhr = SystemConfig(1.0, (PoolSpec(0.5, 1 / h1.mean(), dist=h1), PoolSpec(0.5, 1 / h2.mean(), dist=h2)))
    expo = SystemConfig(1.0, (PoolSpec(0.5, h1.hazard_floor()), PoolSpec(0.5, h2.hazard_floor())))
    validate(dhr)
    validate(expo)
    subcritical = dhr.lam < sum(p.beta * p.dist.hazard_floor() for p in dhr.pools)
    samples = []
    for cfg in (dhr, expo):
        obs = QueueSnapshotObserver(np.arange(20.0, 100.0 + 1e-9, 1.0))
        run_replication(scale(cfg, 2000), cfg, "pull", 100.0, 21, [obs])
        samples.append(obs.pooled())
    res = empirical_dominance(*samples)
    ok = subcritical and res.a_le_b
    verdict("C10 DHR system dominated by exponential(gamma) system", ok,
            f"verdict {res.verdict}, max gap {res.max_gap:.3f}, band {res.band:.4f}")
    assert ok


def test_c11_property_suites(verdict):
    here = Path(__file__).parent
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(here / "test_properties.py")],
        capture_output=True, text=True, cwd=here.parent,
    )
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and "5 passed" in tail
    verdict("C11 property suites (1000 cases each)", ok, tail)
    assert ok
