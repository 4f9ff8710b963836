"""Built-in self-checks against the brute-force oracles.

Each check draws random cases, measures the worst discrepancy and compares it
with a tolerance that ``tol_scale`` multiplies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ControllerConfig, from_dict
from .hocbf import merge_barrier, merge_phi, safety_barrier, speed_max_barrier, speed_min_barrier
from .ocplan import solve_unconstrained
from .oracles import bisect_horizon, enumerate_lp, enumerate_qp, fd_lie
from .qpsolve import ConstraintRow, LpProblem, QpProblem, solve_lp, solve_qp


@dataclass
class Check:
    name: str
    ok: bool
    worst: float
    tol: float
    detail: str = ""


def _sigma_check(raw: dict) -> Check:
    ctrl = raw.get("controller") or {}
    sigma = ctrl.get("sigma", ControllerConfig().sigma) if isinstance(ctrl, dict) else None
    try:
        s1, s2 = (float(s) for s in sigma)
        ok = 0 < s1 < s2
        worst = s1 - s2
    except (TypeError, ValueError):
        ok, worst = False, float("nan")
    return Check("sigma_order", ok, worst, 0.0, f"sigma={sigma} must be positive and increasing")


def _config_without_sigma(raw: dict):
    """Validate everything except the gain ordering, which has its own check."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    if isinstance(data.get("controller"), dict):
        data["controller"].pop("sigma", None)
    return from_dict(data)


def _planner_checks(cfg, rng, n, scale):
    tr = cfg.traffic
    worst_res = worst_T = 0.0
    for _ in range(n):
        v0 = rng.uniform(tr.v0_min, tr.v0_max)
        L = cfg.geometry.L * rng.uniform(0.5, 1.5)
        beta = cfg.beta * rng.uniform(0.2, 2.0) + rng.uniform(0.01, 0.5)
        p = solve_unconstrained(0.0, v0, L, beta)
        worst_res = max(worst_res, float(np.abs(p.local_residuals()).max()))
        worst_T = max(worst_T, abs(p.horizon - bisect_horizon(v0, L, beta)))
    return [
        Check("planner_residuals", worst_res <= 1e-9 * scale, worst_res, 1e-9 * scale,
              f"{n} random plans, five boundary/optimality residuals"),
        Check("planner_vs_bisection", worst_T <= 1e-8 * scale, worst_T, 1e-8 * scale,
              "Newton horizon against the scalar bisection oracle"),
    ]


def random_qp(rng, n=None, m=None):
    """Random convex QP with a known interior point, boxed so it stays bounded."""
    n = n or int(rng.integers(1, 4))
    m = m if m is not None else int(rng.integers(0, 4))
    M = rng.normal(size=(n, n))
    H = M @ M.T + (0.0 if rng.random() < 0.3 else 0.1) * np.eye(n)
    F = rng.normal(size=n) * 3
    z_in = rng.uniform(-1, 1, size=n)
    rows = []
    for _ in range(m):
        a = rng.normal(size=n)
        rows.append(ConstraintRow(a, float(a @ z_in + rng.uniform(0.0, 1.0))))
    lo, hi = -np.full(n, 3.0), np.full(n, 3.0)
    return H, F, rows, lo, hi


def _qp_checks(rng, n, scale):
    worst_qp = worst_lp = 0.0
    for _ in range(n):
        H, F, rows, lo, hi = random_qp(rng)
        sol = solve_qp(QpProblem(H, F, rows, lo, hi))
        _, f = enumerate_qp(H, F, rows, lo, hi)
        worst_qp = max(worst_qp, abs(sol.objective - f) / max(1.0, abs(f)))
        sol = solve_lp(LpProblem(F, rows, lo, hi))
        _, f = enumerate_lp(F, rows, lo, hi)
        worst_lp = max(worst_lp, abs(sol.objective - f) / max(1.0, abs(f)))
    return [
        Check("qp_vs_enumeration", worst_qp <= 1e-7 * scale, worst_qp, 1e-7 * scale,
              f"{n} random QPs against active-set enumeration"),
        Check("lp_vs_vertices", worst_lp <= 1e-7 * scale, worst_lp, 1e-7 * scale,
              f"{n} random LPs against vertex enumeration"),
    ]


def _lie_check(cfg, rng, n, scale):
    g, b = cfg.geometry, cfg.bounds
    dyn = cfg.vehicle_dynamics()
    phi, d0, L = g.phi, g.delta0, g.L
    worst = 0.0
    for _ in range(n):
        x, v = rng.uniform(0, L), rng.uniform(1.0, b.v_max)
        xn, vn = x + rng.uniform(-20, 80), rng.uniform(1.0, b.v_max)
        u = rng.uniform(b.u_min, b.u_max)
        v0 = rng.uniform(cfg.traffic.v0_min, cfg.traffic.v0_max)
        state = [x, v, xn, vn]

        def field(s):
            return np.array([s[1], dyn.accel(s[1], u), s[3], 0.0])

        pairs = [
            (safety_barrier(x, v, xn, vn, phi, d0, 1.0, dyn), lambda s: s[2] - s[0] - phi * s[1] - d0),
            (speed_max_barrier(v, b.v_max, 1.0, dyn), lambda s: b.v_max - s[1]),
            (speed_min_barrier(v, b.v_min, 1.0, dyn), lambda s: s[1] - b.v_min),
            (merge_barrier(x, v, xn, vn, v0, L, phi, d0, 1.0, dyn),
             lambda s: s[2] - s[0] - merge_phi(s[0], v0, L, phi, d0) * s[1] - d0),
        ]
        for spec, fun in pairs:
            fd = fd_lie(fun, state, field)
            worst = max(worst, abs(spec.lf + spec.lg[0] * u - fd) / max(1.0, abs(fd)))
    return Check("lie_derivatives_fd", worst <= 1e-6 * scale, worst, 1e-6 * scale,
                 f"{n} random states, four barriers, central differences")


def run_checks(raw: dict, tol_scale: float = 1.0, n: int = 200, seed: int = 0) -> list:
    """Run every check; raises ConfigError for problems other than gain ordering."""
    if not isinstance(raw, dict):
        raise ConfigError("top level of a scenario must be a mapping")
    checks = [_sigma_check(raw)]
    cfg = _config_without_sigma(raw)
    rng = np.random.default_rng(seed)
    checks += _planner_checks(cfg, rng, n, tol_scale)
    checks += _qp_checks(rng, n, tol_scale)
    checks.append(_lie_check(cfg, rng, n, tol_scale))
    return checks
