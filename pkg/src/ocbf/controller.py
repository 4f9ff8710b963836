"""Per-step controllers for one vehicle.

Each controller builds a small QP or LP over a decision vector that always
starts with ``[u, delta]`` (control and CLF relaxation).  Extra variables
follow: the fuel epigraph ``p >= max(u, 0)``, the jerk epigraph
``e >= |u - u_prev|``, and one recovery rate per violated constraint when
the max-rate recovery mode is on.

Barrier rows come from :mod:`ocbf.hocbf`.  A barrier that is currently
negative is replaced by its recovery row until it is non-negative again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import DOUBLE_INTEGRATOR, Dynamics, FuelModel, VehicleState
from .hocbf import (
    FixedRate,
    MaxRate,
    hocbf_row,
    merge_phi,
    merge_barrier,
    recovery_row,
    robust_hocbf_row,
    safety_barrier,
    speed_clf,
    speed_max_barrier,
    speed_min_barrier,
)
from .ocplan import Plan, TrackingGains, eval_plan, make_u_ref, make_v_ref
from .qpsolve import OPTIMAL, ConstraintRow, LpProblem, QpProblem, solve_lp, solve_qp

MODES = ("ocbf", "cbf_fuel", "comfort_lp", "track_only")
RECOVERY_MODES = ("max_rate", "fixed")
ROW_TOL = 1e-9


@dataclass(frozen=True)
class ControlParams:
    """Everything a per-step controller needs besides the measured states.

    Args:
        p_safety, p_merge, p_speed: class-K gains of the barrier rows.
        beta_relax: weight on delta^2 in the QP objectives.
        recovery: ``max_rate`` (rate maximized with weight ``K`` up to
            ``c_max``) or ``fixed`` (rate ``c_fixed``).
        W: additive noise bound (position, speed); when set, rows are
            tightened by the worst-case noise effect.
        beta1, beta2: relaxation and jerk weights of the comfort LP.
        discrete_merge: use the exact forward-Euler increment of the merge
            barrier instead of its time derivative.
    """

    u_min: float = -3.924
    u_max: float = 3.924
    v_min: float = 0.0
    v_max: float = 30.0
    phi: float = 1.8
    delta0: float = 0.0
    L: float = 400.0
    eps_clf: float = 10.0
    p_safety: float = 1.0
    p_merge: float = 1.0
    p_speed: float = 1.0
    beta_relax: float = 1.0
    dt: float = 0.1
    recovery: str = "max_rate"
    K: float = 100.0
    c_max: float = 5.0
    c_fixed: float = 1.0
    W: Optional[tuple] = None
    gains: TrackingGains = TrackingGains()
    fuel: FuelModel = FuelModel()
    beta1: float = 1.0
    beta2: float = 1.0
    mode: str = "ocbf"
    dynamics: Dynamics = DOUBLE_INTEGRATOR
    discrete_merge: bool = True

    def __post_init__(self):
        if not self.u_min < 0 < self.u_max:
            raise ValueError("need u_min < 0 < u_max")
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.recovery not in RECOVERY_MODES:
            raise ValueError(f"recovery must be one of {RECOVERY_MODES}")
        if self.W is not None and (len(self.W) != 2 or min(self.W) < 0):
            raise ValueError("W must be two non-negative bounds")

    @property
    def recovery_mode(self):
        if self.recovery == "fixed":
            return FixedRate(self.c_fixed)
        return MaxRate(self.K, self.c_max)


@dataclass(frozen=True)
class StepInput:
    """Measured inputs of one control step.

    ``queue_prev_state`` is the FIFO predecessor only when it drives in the
    other lane (otherwise the safety row already covers it).  ``v0`` is the
    entry speed used by the merge headway ramp; it defaults to the plan's.
    """

    t: float
    state: VehicleState
    params: ControlParams
    plan: Optional[Plan] = None
    ip_state: Optional[VehicleState] = None
    queue_prev_state: Optional[VehicleState] = None
    v0: Optional[float] = None
    u_prev: float = 0.0


@dataclass
class StepResult:
    u: float
    delta: float = 0.0
    c: tuple = ()
    diagnostics: dict = field(default_factory=dict)


def barrier_specs(inp: StepInput):
    """Barrier values and Lie derivatives at the measured state."""
    prm, s, dyn = inp.params, inp.state, inp.params.dynamics
    specs = [
        speed_max_barrier(s.v, prm.v_max, prm.p_speed, dyn),
        speed_min_barrier(s.v, prm.v_min, prm.p_speed, dyn),
    ]
    if inp.ip_state is not None:
        specs.append(safety_barrier(s.x, s.v, inp.ip_state.x, inp.ip_state.v, prm.phi,
                                    prm.delta0, prm.p_safety, dyn))
    if inp.queue_prev_state is not None:
        v0 = inp.v0 if inp.v0 is not None else inp.plan.v0
        u_span = max(-prm.u_min, prm.u_max) + (prm.W[1] if prm.W else 0.0)
        q = inp.queue_prev_state
        specs.append(merge_barrier(s.x, s.v, q.x, q.v, v0, prm.L, prm.phi, prm.delta0, prm.p_merge,
                                   dyn, prm.dt if prm.discrete_merge else 0.0, u_span))
    return specs


def _barrier_row(spec, prm: ControlParams):
    if prm.W is None:
        return hocbf_row(spec)
    return robust_hocbf_row(spec, prm.W, prm.W)


def constraint_rows(inp: StepInput):
    """Split barriers into ordinary rows and recovery rows.

    Returns:
        (rows over u, recovery rows, barrier values by tag, tags in recovery,
        tags with no control authority left).
    """
    prm = inp.params
    rows, recov, values, recovering, stuck = [], [], {}, [], []
    for spec in barrier_specs(inp):
        values[spec.tag] = spec.value
        if spec.value >= 0:
            rows.append(_barrier_row(spec, prm))
            continue
        recovering.append(spec.tag)
        if not np.any(spec.lg != 0):
            stuck.append(spec.tag)
            continue
        recov.append(recovery_row(spec, prm.recovery_mode))
    return rows, recov, values, recovering, stuck


def control_interval(rows, prm: ControlParams):
    """Interval of u admitted by single-control rows intersected with the box."""
    lo, hi = prm.u_min, prm.u_max
    for r in rows:
        a = r.coeffs[0]
        if a > 0:
            hi = min(hi, r.rhs / a)
        elif a < 0:
            lo = max(lo, r.rhs / a)
        elif r.rhs < -ROW_TOL:
            return 1.0, -1.0
    return lo, hi


def rows_admit(inp: StepInput, u: float) -> bool:
    """True when no barrier is violated and ``u`` satisfies every barrier row."""
    rows, recov, _, recovering, _ = constraint_rows(inp)
    if recovering:
        return False
    return all(r.coeffs[0] * u <= r.rhs + ROW_TOL for r in rows)


def references(inp: StepInput):
    """(u_ref, v_ref, planned state) from the plan at time ``t``."""
    g = inp.params.gains
    ref = eval_plan(inp.plan, inp.t)
    s = inp.state
    return make_u_ref(g.u_form, ref, s.x, s.v, g), make_v_ref(g.v_form, ref, s.x, g), ref


def _build(n_base, H_base, F_base, lo_base, hi_base, base_rows, u_rows, recov, clf, prm):
    """Stack base variables, recovery rates and all rows into one problem."""
    n_c = sum(1 for r in recov if r.has_rate)
    n = n_base + n_c
    H = np.zeros((n, n))
    H[:n_base, :n_base] = H_base
    F = np.zeros(n)
    F[:n_base] = F_base
    lo = np.concatenate([lo_base, np.zeros(n_c)])
    hi = np.concatenate([hi_base, np.zeros(n_c)])
    rows = [r.expand(n, range(r.coeffs.size)) for r in base_rows]
    rows += [r.expand(n, [0]) for r in u_rows]
    k = n_base
    for rr in recov:
        if rr.has_rate:
            rows.append(rr.row.expand(n, [0, k]))
            F[k] = rr.rate_cost
            hi[k] = rr.c_max
            k += 1
        else:
            rows.append(rr.row.expand(n, [0]))
    if clf is not None:
        rows.append(clf.expand(n, [0, 1]))
    return H, F, rows, lo, hi


def _start_point(rows, lo, hi, u_target):
    """Cheap feasible point, or None.

    Every row couples ``u`` with at most one other variable.  ``u`` is taken
    from the interval left by the rows when the other variables sit at their
    lower bounds; each other variable is then raised just enough to satisfy
    the rows it relaxes.
    """
    # plain floats: rows are a few coefficients long and numpy call overhead dominates
    if not rows:
        return None
    z = [v if math.isfinite(v) else 0.0 for v in lo.tolist()]
    hi_l = hi.tolist()
    A = [r.coeffs.tolist() for r in rows]
    b = [r.rhs for r in rows]
    u_lo, u_hi = float(lo[0]), hi_l[0]
    for a, rhs in zip(A, b):
        if min(a[1:], default=0.0) < 0:
            continue
        rhs -= sum(x * y for x, y in zip(a[1:], z[1:]))
        if a[0] > 0:
            u_hi = min(u_hi, rhs / a[0])
        elif a[0] < 0:
            u_lo = max(u_lo, rhs / a[0])
        elif rhs < 0:
            return None
    if u_lo > u_hi:
        return None
    z[0] = min(max(u_target, u_lo), u_hi)
    for a, rhs in zip(A, b):
        neg = [j for j in range(1, len(a)) if a[j] < 0]
        if len(neg) == 1:
            j = neg[0]
            need = (rhs - sum(x * y for x, y in zip(a, z)) + a[j] * z[j]) / a[j]
            z[j] = max(z[j], need)
    if any(x > h for x, h in zip(z, hi_l)):
        return None
    if any(sum(x * y for x, y in zip(a, z)) - rhs > ROW_TOL for a, rhs in zip(A, b)):
        return None
    return np.array(z)


def _solve_ladder(make, lp, n_base, prm, diag, u_target=0.0):
    """Solve; on infeasibility drop the CLF row, then fall back to full braking."""
    for level, with_clf in (("optimal", True), ("clf_dropped", False)):
        H, F, rows, lo, hi = make(with_clf)
        z0 = _start_point(rows, lo, hi, u_target)
        if lp:
            sol = solve_lp(LpProblem(F, rows, lo, hi), z0)
        else:
            sol = solve_qp(QpProblem(H, F, rows, lo, hi), z0)
        if sol.status == OPTIMAL:
            diag["status"] = level
            diag["iterations"] = sol.iterations
            diag["active"] = tuple(a for a in sol.active_set)
            z = sol.z
            u = float(min(max(z[0], prm.u_min), prm.u_max))
            rates = tuple(float(c) for c in z[n_base:])
            diag["rates"] = dict(zip(diag.get("rate_tags", ()), rates))
            return StepResult(u, float(z[1]), rates, diag)
        diag.setdefault("solver_residual", sol.residual)
    diag["status"] = "infeasible"
    diag["rates"] = {}
    return StepResult(prm.u_min, 0.0, (), diag)


def ocbf_step(inp: StepInput, clf_on: bool = True) -> StepResult:
    """Track the plan with a relaxed speed CLF under barrier rows.

    Minimizes ``1/2 (u - u_ref)^2 + beta_relax delta^2 - K sum(c)``.
    """
    prm = inp.params
    u_ref, v_ref, ref = references(inp)
    u_rows, recov, values, recovering, stuck = constraint_rows(inp)
    # recovery outranks speed tracking: the CLF row is suspended while any row recovers
    clf = speed_clf(inp.state.v, v_ref, prm.eps_clf, prm.dynamics) if clf_on and not recov else None
    H_base = np.diag([1.0, 2.0 * prm.beta_relax])
    F_base = np.array([-u_ref, 0.0])
    lo_b = np.array([prm.u_min, -np.inf])
    hi_b = np.array([prm.u_max, np.inf])

    def make(with_clf):
        return _build(2, H_base, F_base, lo_b, hi_b, [], u_rows, recov, clf if with_clf else None, prm)

    diag = {"u_ref": u_ref, "v_ref": v_ref, "b": values, "recovering": tuple(recovering),
            "stuck": tuple(stuck),
            "rate_tags": tuple(r.row.tag for r in recov if r.has_rate)}
    return _solve_ladder(make, False, 2, prm, diag, u_ref)


def _fuel_rows(n_extra_jerk: bool):
    # u - p <= 0   (p is the positive part of u)
    rows = [ConstraintRow([1.0, 0.0, -1.0] + ([0.0] if n_extra_jerk else []), 0.0, "fuel_epigraph")]
    return rows


def cbf_fuel_step(inp: StepInput, u_reg: float = 1e-6) -> StepResult:
    """Fuel-minimizing barrier controller that drives speed to ``v_max``.

    Variables ``[u, delta, p]`` with ``p >= max(u, 0)``; minimizes
    ``r(v) p + beta_relax delta^2`` (the cruise fuel term is constant within
    the step).  ``u_reg`` adds a tiny ``u^2`` weight so ties among equally
    fuel-free braking controls resolve to the smallest magnitude.
    """
    prm = inp.params
    s = inp.state
    u_rows, recov, values, recovering, stuck = constraint_rows(inp)
    clf = None if recov else speed_clf(s.v, prm.v_max, prm.eps_clf, prm.dynamics)
    r_v = prm.fuel.accel_coeff(s.v)
    H_base = np.diag([u_reg, 2.0 * prm.beta_relax, 0.0])
    F_base = np.array([0.0, 0.0, r_v])
    lo_b = np.array([prm.u_min, -np.inf, 0.0])
    hi_b = np.array([prm.u_max, np.inf, max(prm.u_max, 0.0)])
    base = _fuel_rows(False)

    def make(with_clf):
        return _build(3, H_base, F_base, lo_b, hi_b, base, u_rows, recov, clf if with_clf else None, prm)

    diag = {"b": values, "recovering": tuple(recovering), "stuck": tuple(stuck), "v_ref": prm.v_max,
            "rate_tags": tuple(r.row.tag for r in recov if r.has_rate)}
    return _solve_ladder(make, False, 3, prm, diag)


def comfort_lp_step(inp: StepInput, u_prev: Optional[float] = None, beta2: Optional[float] = None) -> StepResult:
    """Fuel, relaxation and jerk trade-off as a linear program.

    Variables ``[u, delta, p, e]``; minimizes
    ``r(v) p + beta1 delta + beta2 e / dt`` with ``p >= max(u, 0)``,
    ``e >= |u - u_prev|`` and ``delta >= 0``.
    """
    prm = inp.params
    s = inp.state
    u_prev = inp.u_prev if u_prev is None else u_prev
    beta2 = prm.beta2 if beta2 is None else beta2
    u_rows, recov, values, recovering, stuck = constraint_rows(inp)
    clf = None if recov else speed_clf(s.v, prm.v_max, prm.eps_clf, prm.dynamics)
    r_v = prm.fuel.accel_coeff(s.v)
    span = prm.u_max - prm.u_min
    F_base = np.array([0.0, prm.beta1, r_v, beta2 / prm.dt])
    lo_b = np.array([prm.u_min, 0.0, 0.0, 0.0])
    hi_b = np.array([prm.u_max, np.inf, max(prm.u_max, 0.0), span + abs(u_prev)])
    base = _fuel_rows(True) + [
        ConstraintRow([1.0, 0.0, 0.0, -1.0], u_prev, "jerk_up"),
        ConstraintRow([-1.0, 0.0, 0.0, -1.0], -u_prev, "jerk_down"),
    ]

    def make(with_clf):
        return _build(4, np.zeros((4, 4)), F_base, lo_b, hi_b, base, u_rows, recov,
                      clf if with_clf else None, prm)

    diag = {"b": values, "recovering": tuple(recovering), "stuck": tuple(stuck), "v_ref": prm.v_max,
            "rate_tags": tuple(r.row.tag for r in recov if r.has_rate)}
    return _solve_ladder(make, True, 4, prm, diag)


def fuel_lp_step(inp: StepInput) -> StepResult:
    """Linear relaxation of :func:`cbf_fuel_step` (delta weighted linearly by ``beta1``)."""
    prm = inp.params
    s = inp.state
    u_rows, recov, values, recovering, stuck = constraint_rows(inp)
    clf = None if recov else speed_clf(s.v, prm.v_max, prm.eps_clf, prm.dynamics)
    F_base = np.array([0.0, prm.beta1, prm.fuel.accel_coeff(s.v)])
    lo_b = np.array([prm.u_min, 0.0, 0.0])
    hi_b = np.array([prm.u_max, np.inf, max(prm.u_max, 0.0)])
    base = _fuel_rows(False)

    def make(with_clf):
        return _build(3, np.zeros((3, 3)), F_base, lo_b, hi_b, base, u_rows, recov,
                      clf if with_clf else None, prm)

    diag = {"b": values, "recovering": tuple(recovering), "stuck": tuple(stuck), "v_ref": prm.v_max,
            "rate_tags": tuple(r.row.tag for r in recov if r.has_rate)}
    return _solve_ladder(make, True, 3, prm, diag)


def track_only_step(inp: StepInput) -> StepResult:
    """Apply the tracking reference directly, clipped to the control box."""
    prm = inp.params
    u_ref, v_ref, _ = references(inp)
    u = min(max(u_ref, prm.u_min), prm.u_max)
    values = {spec.tag: spec.value for spec in barrier_specs(inp)}
    return StepResult(u, 0.0, (), {"u_ref": u_ref, "v_ref": v_ref, "b": values, "status": "track_only"})


def step(inp: StepInput) -> StepResult:
    """Dispatch on ``params.mode``."""
    mode = inp.params.mode
    if mode == "ocbf":
        return ocbf_step(inp)
    if mode == "cbf_fuel":
        return cbf_fuel_step(inp)
    if mode == "comfort_lp":
        return comfort_lp_step(inp)
    return track_only_step(inp)
