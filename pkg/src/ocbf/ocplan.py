"""Closed-form energy/time-optimal merging plans, feasibility gates and tracking references.

A plan is the unconstrained minimizer of ``beta * (tM - t0) + int 1/2 u^2 dt``
for a double integrator that starts at ``x=0, v=v0`` and must reach ``x=L``
with free terminal time.  Its control is linear in time, ``u = a t + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .oracles import bisect_horizon, reduced_plan_a, transversality_residual

NEWTON_TOL = 1e-12
RESIDUAL_TOL = 1e-9


class PlanningError(RuntimeError):
    """Raised when no plan satisfying the boundary conditions could be found."""


def beta_from_alpha(alpha: float, u_max: float, u_min: float) -> float:
    """Time weight equivalent to a normalized energy/time trade-off ``alpha``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return alpha * max(u_max**2, u_min**2) / (2.0 * (1.0 - alpha))


@dataclass(frozen=True)
class Plan:
    """Cubic position plan ``x*(t) = a t^3/6 + b t^2/2 + c t + d`` in absolute time.

    When ``umax_arc_end`` is set, the control is held at ``u_max`` on
    ``[t0, umax_arc_end]`` and the cubic applies afterwards.  Evaluation uses
    the same polynomial re-centred at ``t_ref`` for numerical accuracy.
    """

    a: float
    b: float
    c: float
    d: float
    t0: float
    tM: float
    beta: float
    v0: float
    L: float
    umax_arc_end: Optional[float] = None
    u_max: float = math.inf
    t_ref: float = 0.0
    local: tuple = (0.0, 0.0, 0.0, 0.0)

    @property
    def horizon(self) -> float:
        return self.tM - self.t0

    @property
    def terminal_speed(self) -> float:
        return eval_plan(self, self.tM)[1]

    @property
    def energy(self) -> float:
        """Integral of ``u*^2 / 2`` over the plan."""
        A = self.local[0]
        Ts = self.tM - self.t_ref
        e = A * A * Ts**3 / 6.0
        if self.umax_arc_end is not None:
            e += 0.5 * self.u_max**2 * (self.umax_arc_end - self.t0)
        return e

    @property
    def objective(self) -> float:
        return self.beta * self.horizon + self.energy

    def residuals(self) -> np.ndarray:
        """Boundary-condition residuals of the cubic piece, in absolute time."""
        a, b, c, d = self.a, self.b, self.c, self.d
        ts = self.t0 if self.umax_arc_end is None else self.umax_arc_end
        xs, vs = (0.0, self.v0) if self.umax_arc_end is None else _arc_state(self, ts)
        tM = self.tM
        out = [
            0.5 * a * ts**2 + b * ts + c - vs,
            a * ts**3 / 6 + 0.5 * b * ts**2 + c * ts + d - xs,
            a * tM**3 / 6 + 0.5 * b * tM**2 + c * tM + d - self.L,
            a * tM + b,
            self.beta + 0.5 * a * a * tM * tM + a * b * tM + a * c,
        ]
        if self.umax_arc_end is not None:
            out.append(a * ts + b - self.u_max)
        return np.array(out)

    def local_residuals(self) -> np.ndarray:
        """Same residuals computed in the re-centred frame (well conditioned)."""
        A, B, C, D = self.local
        ts = (self.t0 if self.umax_arc_end is None else self.umax_arc_end) - self.t_ref
        xs, vs = (0.0, self.v0) if self.umax_arc_end is None else _arc_state(self, self.umax_arc_end)
        T = self.tM - self.t_ref
        return np.array([
            0.5 * A * ts**2 + B * ts + C - vs,
            A * ts**3 / 6 + 0.5 * B * ts**2 + C * ts + D - xs,
            A * T**3 / 6 + 0.5 * B * T**2 + C * T + D - self.L,
            A * T + B,
            self.beta + 0.5 * A * A * T * T + A * B * T + A * C,
        ])


def _arc_state(p: Plan, t):
    s = t - p.t0
    return p.v0 * s + 0.5 * p.u_max * s * s, p.v0 + p.u_max * s


def _to_absolute(local, t_ref):
    """Re-expand a cubic written in ``s = t - t_ref`` into powers of ``t``."""
    A, B, C, D = local
    a = A
    b = B - A * t_ref
    c = C - B * t_ref + 0.5 * A * t_ref**2
    d = D - C * t_ref + 0.5 * B * t_ref**2 - A * t_ref**3 / 6
    return a, b, c, d


def _newton_system(v0, L, beta, T0, max_iter=60):
    """Newton on the five boundary equations in local time (start at s=0).

    Unknowns (a, b, c, d, T).  Returns the solution vector or None.
    """
    T = T0
    z = np.array([reduced_plan_a(T, v0, L), 0.0, v0, 0.0, T])
    z[1] = -z[0] * T
    for _ in range(max_iter):
        a, b, c, d, T = z
        r = np.array([
            c - v0,
            d,
            a * T**3 / 6 + 0.5 * b * T**2 + c * T + d - L,
            a * T + b,
            beta + 0.5 * a * a * T * T + a * b * T + a * c,
        ])
        if np.abs(r).max() < NEWTON_TOL * max(1.0, L):
            return z
        J = np.array([
            [0, 0, 1, 0, 0],
            [0, 0, 0, 1, 0],
            [T**3 / 6, 0.5 * T**2, T, 1, 0.5 * a * T**2 + b * T + c],
            [T, 1, 0, 0, a],
            [a * T * T + b * T + c, a * T, a, 0, a * a * T + a * b],
        ])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        z = z + step
        if not np.all(np.isfinite(z)) or z[4] <= 0:
            return None
    return None


def _solve_horizon(v0, L, beta):
    """Horizon and cubic coefficient of the unconstrained plan, in local time."""
    T_cruise = L / v0
    if beta == 0.0:
        return T_cruise, 0.0
    # the physical root lies in (0, L/v0]; Newton from the customary guess can
    # land on a spurious root beyond L/v0, so its answer is checked
    for guess in (1.1 * T_cruise, 0.8 * T_cruise):
        z = _newton_system(v0, L, beta, guess)
        if z is not None and 0 < z[4] <= T_cruise * (1 + 1e-12):
            T = z[4]
            break
    else:
        T = bisect_horizon(v0, L, beta)
    # polish on the scalar residual so the five equations close to round-off
    for _ in range(3):
        h = 1e-7 * T
        g = transversality_residual(T, v0, L, beta)
        dg = (transversality_residual(T + h, v0, L, beta) - transversality_residual(T - h, v0, L, beta)) / (2 * h)
        if dg == 0:
            break
        T_new = T - g / dg
        if not 0 < T_new <= T_cruise:
            break
        T = T_new
    return T, reduced_plan_a(T, v0, L)


def _make_plan(t0, v0, L, beta, t_ref, A, T_local, v_start, x_start, tau=None, u_max=math.inf):
    local = tuple(float(q) for q in (A, -A * T_local, v_start, x_start))
    a, b, c, d = _to_absolute(local, t_ref)
    tau = None if tau is None else float(tau)
    return Plan(a, b, c, d, t0, float(t_ref + T_local), beta, v0, L, tau, u_max, float(t_ref), local)


def solve_unconstrained(t0: float, v0: float, L: float, beta: float) -> Plan:
    """Plan from the origin at time ``t0`` with speed ``v0`` to ``x = L``."""
    if not (v0 > 0 and L > 0 and beta >= 0):
        raise ValueError(f"need v0 > 0, L > 0, beta >= 0 (got {v0}, {L}, {beta})")
    T, A = _solve_horizon(v0, L, beta)
    p = _make_plan(t0, v0, L, beta, t0, A, T, v0, 0.0)
    res = np.abs(p.local_residuals()).max()
    if res > RESIDUAL_TOL * max(1.0, L):
        raise PlanningError(f"plan residual {res:.3e} above tolerance")
    return p


def plan_with_umax_arc(t0: float, v0: float, L: float, beta: float, u_max: float) -> Plan:
    """Unconstrained plan, or a full-throttle prefix followed by an unconstrained arc.

    The switch time is the one at which the suffix plan, started from the
    state reached under ``u_max``, begins exactly at ``u_max``.
    """
    base = solve_unconstrained(t0, v0, L, beta)
    if not math.isfinite(u_max) or eval_plan(base, t0)[2] <= u_max:
        return base

    def suffix(tau):
        x_tau = v0 * tau + 0.5 * u_max * tau * tau
        v_tau = v0 + u_max * tau
        T, A = _solve_horizon(v_tau, L - x_tau, beta)
        return T, A, x_tau, v_tau

    def continuity(tau):
        T, A, _, _ = suffix(tau)
        return -A * T - u_max

    # the prefix cannot run past the point where cruising would already reach L
    tau_hi = (-v0 + math.sqrt(v0 * v0 + 2 * u_max * L)) / u_max
    lo, hi = 0.0, tau_hi * (1 - 1e-9)
    if continuity(hi) > 0:
        raise PlanningError("no admissible switch time for the full-throttle prefix")
    tau = brentq(continuity, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=200)
    T, A, x_tau, v_tau = suffix(tau)
    p = _make_plan(t0, v0, L, beta, t0 + tau, A, T, v_tau, x_tau, t0 + tau, u_max)
    return p


def eval_plan(p: Plan, t: float):
    """Planned (x*, v*, u*) at time ``t``.

    Before ``t0`` the start state is returned.  After ``tM`` the plan is
    extended at its terminal speed with zero control.
    """
    if t <= p.t0:
        t = p.t0
    if t > p.tM:
        xM, vM, _ = eval_plan(p, p.tM)
        return xM + vM * (t - p.tM), vM, 0.0
    if p.umax_arc_end is not None and t < p.umax_arc_end:
        x, v = _arc_state(p, t)
        return x, v, p.u_max
    A, B, C, D = p.local
    s = t - p.t_ref
    return (A * s**3 / 6 + 0.5 * B * s * s + C * s + D, 0.5 * A * s * s + B * s + C, A * s + B)


# ---- feasibility gates -------------------------------------------------------


@dataclass(frozen=True)
class GateParams:
    L: float = 400.0
    phi: float = 1.8
    delta0: float = 0.0
    v_max: float = 30.0
    v_min: float = 0.0
    beta: float = 0.0
    eps_grid: int = 1000
    root_grid: float = 1e-2
    margin: float = 0.0


@dataclass(frozen=True)
class CavInfo:
    """What a gate check needs to know about one vehicle."""

    t0: float
    v0: float
    plan: Plan


@dataclass
class GateReport:
    safety_ok: bool = True
    merge_ok: bool = True
    speed_ok: bool = True
    safety_eps: Optional[float] = None
    safety_threshold: Optional[float] = None
    safety_roots: tuple = ()
    safety_min_gap: Optional[float] = None
    merge_eps: Optional[float] = None
    merge_threshold: Optional[float] = None
    merge_gap_at_mp: Optional[float] = None
    L_max: float = math.inf
    notes: list = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return self.safety_ok and self.merge_ok and self.speed_ok


def headway_threshold(eps, v_i0, v_j0, v_jM, phi, delta0, L):
    return phi / eps + delta0 / (eps * v_i0) + 3 * L * (1 - eps) / (v_j0 + 2 * v_jM)


def _eps_certificate(i: CavInfo, j: CavInfo, gp: GateParams):
    """Search eps in (0, 1] for the arrival-headway sufficient condition.

    Returns (eps, threshold) for the first passing grid point, or
    (None, smallest threshold seen) when none passes.
    """
    gap = i.t0 - j.t0
    vjM = j.plan.terminal_speed
    best = math.inf
    for k in range(gp.eps_grid, 0, -1):
        eps = k / gp.eps_grid
        if eps * i.v0 > j.v0:
            continue
        thr = headway_threshold(eps, i.v0, j.v0, vjM, gp.phi, gp.delta0, gp.L)
        best = min(best, thr)
        if gap >= thr:
            return eps, thr
    return None, (best if math.isfinite(best) else None)


def _find_roots(fun, lo, hi, step):
    n = max(1, int(math.ceil((hi - lo) / step)))
    ts = np.linspace(lo, hi, n + 1)
    vals = [fun(t) for t in ts]
    roots = []
    for k in range(n):
        if vals[k] == 0.0:
            roots.append(float(ts[k]))
        elif vals[k] * vals[k + 1] < 0:
            roots.append(float(brentq(fun, ts[k], ts[k + 1], xtol=1e-12)))
    if vals[-1] == 0.0:
        roots.append(float(ts[-1]))
    return roots


def max_length_for_speed(v0, v_max, beta):
    """Largest zone length for which the unconstrained plan stays below ``v_max``."""
    if beta <= 0:
        return math.inf
    num = 8 * v_max**4 - 6 * v_max**2 * v0**2 - 2 * v_max * v0**3
    return math.sqrt(num / (9 * beta)) if num > 0 else 0.0


def check_unconstrained_ok(i: CavInfo, ip: Optional[CavInfo], prev: Optional[CavInfo],
                           gp: GateParams) -> GateReport:
    """Decide whether the unconstrained plan of ``i`` can be applied as is.

    ``ip`` is the same-lane predecessor and ``prev`` the queue predecessor
    (only checked when it sits in the other lane, i.e. differs from ``ip``).
    Each headway test is the eps-certificate on arrival times, confirmed by
    evaluating the planned headway at every stationary point and at both
    ends of ``i``'s horizon.
    """
    rep = GateReport()
    t0, tM = i.plan.t0, i.plan.tM
    if ip is not None:
        rep.safety_eps, rep.safety_threshold = _eps_certificate(i, ip, gp)

        def gap(t):
            xi, vi, _ = eval_plan(i.plan, t)
            return eval_plan(ip.plan, t)[0] - xi - gp.phi * vi - gp.delta0

        def gap_rate(t):
            _, vi, ui = eval_plan(i.plan, t)
            return eval_plan(ip.plan, t)[1] - vi - gp.phi * ui

        roots = _find_roots(gap_rate, t0, tM, gp.root_grid)
        rep.safety_roots = tuple(roots)
        rep.safety_min_gap = min(gap(t) for t in [t0, tM, *roots])
        rep.safety_ok = rep.safety_eps is not None and rep.safety_min_gap >= gp.margin
    if prev is not None and prev is not ip:
        rep.merge_eps, rep.merge_threshold = _eps_certificate(i, prev, gp)
        xi, vi, _ = eval_plan(i.plan, tM)
        rep.merge_gap_at_mp = eval_plan(prev.plan, tM)[0] - xi - gp.phi * vi - gp.delta0
        rep.merge_ok = rep.merge_eps is not None and rep.merge_gap_at_mp >= gp.margin
    rep.L_max = max_length_for_speed(i.v0, gp.v_max, gp.beta)
    rep.speed_ok = gp.L <= rep.L_max and i.v0 >= gp.v_min
    return rep


# ---- tracking references -----------------------------------------------------

U_FORMS = ("exponential", "ratio", "feedback")
V_FORMS = ("exponential", "ratio")


@dataclass(frozen=True)
class TrackingGains:
    """Gains of the reference generators.

    Args:
        sigma: position and speed scales of the exponential control form.
        k: position and speed gains of the feedback control form.
        sigma_v: position scale of the exponential speed reference.
        u_form: one of ``U_FORMS``.
        v_form: one of ``V_FORMS``.
        guard: states at or below this value disable the ratio forms.
    """

    sigma: tuple = (4.0, 12.0)
    k: tuple = (0.25, 0.1)
    sigma_v: float = 40.0
    u_form: str = "ratio"
    v_form: str = "ratio"
    guard: float = 1e-9

    def __post_init__(self):
        if len(self.sigma) != 2 or min(self.sigma) <= 0:
            raise ValueError("sigma needs two positive entries")
        if not self.sigma[0] < self.sigma[1]:
            raise ValueError("sigma must be strictly increasing (position scale below speed scale)")
        if len(self.k) != 2 or min(self.k) <= 0:
            raise ValueError("k needs two positive entries")
        if self.sigma_v <= 0:
            raise ValueError("sigma_v must be positive")
        if self.u_form not in U_FORMS:
            raise ValueError(f"u_form must be one of {U_FORMS}")
        if self.v_form not in V_FORMS:
            raise ValueError(f"v_form must be one of {V_FORMS}")


def make_u_ref(form, ref, x, v, gains: TrackingGains) -> float:
    """Control reference from the planned (x*, v*, u*) and the measured (x, v)."""
    xs, vs, us = ref
    if form == "ratio" and (x <= gains.guard or v <= gains.guard):
        form = "feedback"
    if form == "exponential":
        return math.exp((xs - x) / gains.sigma[0] + (vs - v) / gains.sigma[1]) * us
    if form == "ratio":
        return 0.5 * (xs / x + vs / v) * us
    if form == "feedback":
        return us + gains.k[0] * (xs - x) + gains.k[1] * (vs - v)
    raise ValueError(f"unknown control reference form {form!r}")


def make_v_ref(form, ref, x, gains: TrackingGains) -> float:
    """Speed reference from the planned (x*, v*) and the measured position."""
    xs, vs = ref[0], ref[1]
    if form == "ratio":
        if x <= gains.guard:
            return vs + gains.k[0] * (xs - x)
        return xs / x * vs
    if form == "exponential":
        return math.exp((xs - x) / gains.sigma_v) * vs
    raise ValueError(f"unknown speed reference form {form!r}")
