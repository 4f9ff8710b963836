"""End-to-end acceptance checks, one per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Tolerances and problem sizes are pinned here.
"""

import functools
import time

import numpy as np
import pytest

import ocbf.mergesim as mergesim
from ocbf.config import from_dict
from ocbf.controller import fuel_lp_step
from ocbf.ocplan import beta_from_alpha, solve_unconstrained
from ocbf.oracles import bisect_horizon, enumerate_lp, enumerate_qp
from ocbf.qpsolve import LpProblem, QpProblem, solve_lp, solve_qp
from ocbf.verify import random_qp

UMAX = 3.924
NOISE = {"w1": 2.0, "w2": 0.2}
EPISODE_CAVS = 10
VIOLATION_TOL = 1e-6


def _cfg(seed=0, alpha=0.25, cavs=EPISODE_CAVS, **sections):
    data = {"objective": {"alpha": alpha}, "traffic": {"max_cavs": cavs}, "seed": seed}
    data.update(sections)
    return from_dict(data)


@functools.lru_cache(maxsize=None)
def _episode(seed, variant="clean", cavs=EPISODE_CAVS):
    sections = {
        "clean": {},
        "robust": {"noise": NOISE, "controller": {"robust": True}},
        "recovery": {"noise": NOISE},
    }[variant]
    return mergesim.run_scenario(_cfg(seed, cavs=cavs, **sections))


def _episode_violations(metrics, log, v_min=0.0, v_max=30.0):
    """Barrier events, merge-point headway failures, negative logged barriers and speed-bound breaches."""
    bad = len(metrics.events) + len(metrics.merge_violations)
    for r in log:
        if r[7] < -VIOLATION_TOL or r[8] < -VIOLATION_TOL:
            bad += 1
        if not v_min - VIOLATION_TOL <= r[4] <= v_max + VIOLATION_TOL:
            bad += 1
    return bad


def test_planner_reproduction(acceptance):
    beta = beta_from_alpha(0.26, UMAX, -UMAX)
    t = time.perf_counter()
    p = solve_unconstrained(0.0, 20.0, 400.0, beta)
    elapsed = time.perf_counter() - t
    ok_t = abs(p.horizon - 15.01) <= 0.03 * 15.01
    ok_e = abs(p.energy - 4.44) <= 0.05 * 4.44
    ok = acceptance("planner reproduction", ok_t and ok_e and elapsed < 0.010,
                    f"T={p.horizon:.4f}s (15.01 +-3%), energy={p.energy:.4f} (4.44 +-5%), "
                    f"runtime={elapsed * 1e3:.2f}ms (<10ms)")
    assert ok


def test_planner_internal_consistency(acceptance):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    worst_res = worst_T = 0.0
    for _ in range(1000):
        v0 = rng.uniform(5.0, 30.0)
        L = rng.uniform(100.0, 800.0)
        beta = rng.uniform(0.01, 10.0)
        p = solve_unconstrained(0.0, v0, L, beta)
        worst_res = max(worst_res, float(np.abs(p.residuals()).max()))
        worst_T = max(worst_T, abs(p.horizon - bisect_horizon(v0, L, beta)))
    elapsed = time.perf_counter() - t
    ok = acceptance("planner internal consistency", worst_res <= 1e-9 and worst_T <= 1e-8 and elapsed < 2.0,
                    f"1000 inputs, worst residual={worst_res:.2e} (<=1e-9), worst |T-T_bisect|={worst_T:.2e} "
                    f"(<=1e-8), runtime={elapsed:.2f}s (<2s, oracle included)")
    assert ok


def test_ocbf_optimality_gap(acceptance):
    cfg = from_dict({"objective": {"alpha": 0.26}, "traffic": {"arrivals": [[0.0, "main", 20.0]]}})
    m, _ = mergesim.run_scenario(cfg)
    (c,) = m.per_cav
    gap = (c.objective - c.plan_objective) / c.plan_objective
    ok = acceptance("OCBF-vs-plan optimality gap", abs(gap) <= 0.01 and not m.events,
                    f"OCBF objective={c.objective:.4f}, plan objective={c.plan_objective:.4f}, gap={gap:+.3%} "
                    f"(<=1%), travel time={c.travel_time:.3f}s")
    assert ok


def test_multi_cav_matched_comparison(acceptance):
    t = time.perf_counter()
    ocbf, _ = mergesim.run_scenario(_cfg(0, cavs=30))
    ref, _ = mergesim.run_scenario(_cfg(0, cavs=30, controller={"mode": "track_only"}))
    elapsed = time.perf_counter() - t
    assert mergesim.scenario_arrivals(_cfg(0, cavs=30)) == ocbf.arrivals == ref.arrivals
    a, b = ocbf.summary()["all"], ref.summary()["all"]
    d_obj = a["objective"] / b["objective"] - 1
    d_t = a["travel_time"] / b["travel_time"] - 1
    # the unconstrained plans ignore interactions; reported for context only
    p_obj = a["objective"] / a["plan_objective"] - 1
    p_t = a["travel_time"] / a["plan_time"] - 1
    ok = acceptance(
        "multi-CAV matched-seed comparison",
        abs(d_obj) <= 0.05 and abs(d_t) <= 0.03 and elapsed < 60 and not ocbf.events,
        f"30 CAVs alpha=0.25: OCBF vs track-only objective {a['objective']:.3f} vs {b['objective']:.3f} "
        f"({d_obj:+.2%}, <=5%), time {a['travel_time']:.3f} vs {b['travel_time']:.3f} ({d_t:+.2%}, <=3%), "
        f"runtime={elapsed:.1f}s (<60s); vs unconstrained plans: objective {p_obj:+.2%}, time {p_t:+.2%}",
    )
    assert ok


def test_alpha_monotonicity(acceptance):
    alphas = (0.01, 0.25, 0.40, 0.60)
    times, energies, hashes = [], [], set()
    for a in alphas:
        cfg = _cfg(0, alpha=a, cavs=30)
        m, _ = mergesim.run_scenario(cfg)
        s = m.summary()["all"]
        times.append(s["travel_time"])
        energies.append(s["energy"])
        hashes.add(tuple(m.arrivals))
    mono = all(times[k + 1] < times[k] for k in range(3)) and all(energies[k + 1] > energies[k] for k in range(3))
    ok = acceptance("alpha monotonicity", mono and len(hashes) == 1,
                    "time " + " > ".join(f"{x:.2f}" for x in times) + " s; energy "
                    + " < ".join(f"{x:.2f}" for x in energies) + " (alpha 0.01, 0.25, 0.40, 0.60; 30 CAVs)")
    assert ok


def test_safety_invariance_no_noise(acceptance):
    total, cavs, infeasible = 0, 0, 0
    for seed in range(100):
        m, log = _episode(seed)
        total += _episode_violations(m, log)
        cavs += len(m.per_cav)
        infeasible += m.infeasible_steps
        assert m.crossing_order == sorted(m.crossing_order)
    ok = acceptance("safety invariance without noise", total == 0,
                    f"100 episodes x {EPISODE_CAVS} CAVs ({cavs} vehicles): {total} violations "
                    f"(tol {VIOLATION_TOL:g}), {infeasible} infeasible steps logged")
    assert ok


def test_robust_and_recovery_with_noise(acceptance):
    robust_bad = 0
    events = over = unrecovered = 0
    worst_ratio = 0.0
    infl = []
    for seed in range(50):
        m, log = _episode(seed, "robust")
        robust_bad += _episode_violations(m, log)
        m, _ = _episode(seed, "recovery")
        for e in m.events:
            events += 1
            unrecovered += not e.recovered
            if not e.within_bound(m.dt) and not e.infeasible:
                over += 1
                worst_ratio = max(worst_ratio, e.duration / e.bound(m.dt))
        clean, _ = _episode(seed)
        infl.append(m.summary()["all"]["objective"] / clean.summary()["all"]["objective"] - 1)
    inflation = float(np.mean(infl))
    ok = acceptance(
        "robust and recovery modes with noise",
        robust_bad == 0 and over == 0 and unrecovered == 0 and inflation <= 0.10,
        f"robust W=(2,0.2): {robust_bad} violations in 50 episodes; recovery: {events} events, "
        f"{unrecovered} unrecovered, {over} over the b/c+2dt bound (worst {worst_ratio:.2f}x bound); "
        f"objective inflation noisy vs clean {inflation:+.2%} (<=10%)",
    )
    assert ok


def test_qp_oracle_equivalence(acceptance):
    rng = np.random.default_rng(99)
    worst_qp = worst_lp = 0.0
    for _ in range(1000):
        H, F, rows, lo, hi = random_qp(rng)
        _, f = enumerate_qp(H, F, rows, lo, hi)
        diff = abs(solve_qp(QpProblem(H, F, rows, lo, hi)).objective - f)
        worst_qp = max(worst_qp, diff / max(1.0, abs(f)))
        _, f = enumerate_lp(F, rows, lo, hi)
        diff = abs(solve_lp(LpProblem(F, rows, lo, hi)).objective - f)
        worst_lp = max(worst_lp, diff / max(1.0, abs(f)))
    ok = acceptance("QP/LP oracle equivalence", worst_qp <= 1e-7 and worst_lp <= 1e-7,
                    f"1000 QPs worst rel diff={worst_qp:.2e}, 1000 LPs worst rel diff={worst_lp:.2e} (<=1e-7)")
    assert ok


def test_step_latency(acceptance, monkeypatch):
    inputs = []
    orig = mergesim.ocbf_step

    def capture(inp, *a, **k):
        inputs.append(inp)
        return orig(inp, *a, **k)

    monkeypatch.setattr(mergesim, "ocbf_step", capture)
    mergesim.run_scenario(_cfg(7, noise=NOISE))
    monkeypatch.undo()
    times = []
    for inp in inputs:
        t = time.perf_counter()
        orig(inp)
        times.append(time.perf_counter() - t)
    med = float(np.median(times))
    ok = acceptance("per-step latency", med < 1e-3,
                    f"median {med * 1e3:.3f} ms over {len(times)} recorded steps (<1 ms), "
                    f"p95 {np.percentile(times, 95) * 1e3:.3f} ms")
    assert ok


def test_fuel_and_comfort_properties(acceptance, monkeypatch):
    nonlin = {"dynamics": {"model": "nonlinear"}}
    # braking steps burn no throttle fuel
    cfg = _cfg(3, controller={"mode": "cbf_fuel"}, **nonlin)
    m, log = mergesim.run_scenario(cfg)
    fuel = cfg.control_params().fuel
    braking = [r for r in log if r[5] < 0]
    accel_fuel = max((fuel.rate(r[4], r[5]) - fuel.cruise(r[4]) for r in braking), default=0.0)
    ok_brake = len(braking) > 0 and accel_fuel == 0.0

    # total jerk never increases with the jerk weight, on matched seeds
    grid = (0.0, 0.1, 0.25, 0.5, 1.0)
    increases = []
    for seed in range(5):
        jerks = []
        for b2 in grid:
            mm, _ = mergesim.run_scenario(_cfg(seed, controller={"mode": "comfort_lp", "beta2": b2}, **nonlin))
            jerks.append(sum(c.jerk for c in mm.per_cav))
        increases += [(seed, grid[k], grid[k + 1], jerks[k + 1] - jerks[k])
                      for k in range(len(grid) - 1) if jerks[k + 1] > jerks[k] + 1e-9]

    # with no jerk weight the comfort LP is the fuel LP relaxation, step by step
    worst = 0.0
    steps = 0
    orig = mergesim.comfort_lp_step

    def compare(inp, *a, **k):
        nonlocal worst, steps
        res = orig(inp, *a, **k)
        ref = fuel_lp_step(inp)
        worst = max(worst, abs(res.u - ref.u))
        steps += 1
        return res

    monkeypatch.setattr(mergesim, "comfort_lp_step", compare)
    mergesim.run_scenario(_cfg(3, controller={"mode": "comfort_lp", "beta2": 0.0}, **nonlin))
    monkeypatch.undo()
    ok_lp = worst <= 1e-6

    inc = "; ".join(f"seed {s}: beta2 {a}->{b} +{d:.2f}" for s, a, b, d in increases) or "none"
    ok = acceptance(
        "fuel and comfort controllers",
        ok_brake and not increases and ok_lp,
        f"braking steps={len(braking)}, max accel fuel while braking={accel_fuel:g}; "
        f"jerk increases over beta2 {grid} x 5 seeds: {inc}; "
        f"comfort(beta2=0) vs fuel LP worst |du|={worst:.2e} over {steps} steps (<=1e-6)",
    )
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
