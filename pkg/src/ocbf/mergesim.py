"""Two-lane merging simulator.

Vehicles enter a main lane or a merging lane at their lane origin, are
planned once at entry, then controlled every ``dt`` until they reach the
merging point at distance ``L``.  A first-in-first-out queue fixes the
crossing order.  Past the merging point a vehicle cruises at constant speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ScenarioConfig
from .controller import (
    ControlParams,
    StepInput,
    StepResult,
    barrier_specs,
    cbf_fuel_step,
    comfort_lp_step,
    constraint_rows,
    control_interval,
    ocbf_step,
    rows_admit,
    track_only_step,
)
from .dynamics import Dynamics, FuelModel, VehicleState
from .ocplan import (
    CavInfo,
    GateParams,
    GateReport,
    Plan,
    check_unconstrained_ok,
    plan_with_umax_arc,
    solve_unconstrained,
)

LANES = ("main", "merge")
VIOLATION_TOL = 1e-6
LOG_FIELDS = ("t", "id", "lane", "x", "v", "u", "delta", "b_safety", "b_merge", "mode_flags")


# ---- arrivals and dynamics ---------------------------------------------------


@dataclass(frozen=True)
class Arrival:
    t: float
    lane: str
    v0: float


def spawn_arrivals(rate_main: float, rate_merge: float, horizon: float, seed: int,
                   v0_range=(15.0, 20.0)) -> list:
    """Poisson arrivals on both lanes over ``[0, horizon)``, sorted by time.

    Each lane has its own exponential inter-arrival stream; entry speeds are
    uniform on ``v0_range``.  Everything derives from ``seed``.
    """
    rng = np.random.default_rng([seed, 0])
    out = []
    for lane, rate in zip(LANES, (rate_main, rate_merge)):
        if rate <= 0:
            continue
        t = rng.exponential(1.0 / rate)
        while t < horizon:
            out.append(Arrival(float(t), lane, float(rng.uniform(*v0_range))))
            t += rng.exponential(1.0 / rate)
    out.sort(key=lambda a: (a.t, LANES.index(a.lane)))
    return out


def step_dynamics(s: VehicleState, u: float, dt: float, w=(0.0, 0.0)) -> VehicleState:
    """Forward-Euler double-integrator step with additive noise on both states."""
    x = s.x + (s.v + w[0]) * dt
    v = max(s.v + (u + w[1]) * dt, 0.0)
    return VehicleState(x, v, u, s.lane)


def step_dynamics_nonlinear(s: VehicleState, u: float, dt: float, mass: float, k0: float,
                            k1: float, k2: float, w=(0.0, 0.0)) -> VehicleState:
    """Forward-Euler step of the resistance-force model."""
    dyn = Dynamics(mass, k0, k1, k2)
    x = s.x + (s.v + w[0]) * dt
    v = max(s.v + (dyn.accel(s.v, u) + w[1]) * dt, 0.0)
    return VehicleState(x, v, u, s.lane)


def fuel_rate(v: float, u: float, model: FuelModel = FuelModel()) -> float:
    """Fuel use per second; braking adds nothing beyond the cruise term."""
    return model.rate(v, u)


# ---- records -----------------------------------------------------------------


@dataclass
class ViolationEvent:
    cav: int
    tag: str
    t1: float
    b1: float
    t_end: Optional[float] = None
    c_min: float = math.inf
    infeasible: bool = False

    @property
    def duration(self) -> float:
        return math.nan if self.t_end is None else self.t_end - self.t1

    @property
    def recovered(self) -> bool:
        return self.t_end is not None

    def bound(self, dt: float) -> float:
        """Allowed recovery time ``|b(t1)| / c + 2 dt``."""
        return -self.b1 / self.c_min + 2 * dt if self.c_min > 0 and math.isfinite(self.c_min) else math.inf

    def within_bound(self, dt: float) -> bool:
        return self.recovered and self.duration <= self.bound(dt) + 1e-9


@dataclass
class CavRecord:
    id: int
    lane: str
    t0: float
    v0: float
    state: VehicleState
    plan: Plan
    gate: GateReport
    controller: str
    status: str = "in_cz"
    tM_actual: Optional[float] = None
    energy: float = 0.0
    fuel: float = 0.0
    jerk: float = 0.0
    u_prev: float = 0.0
    demoted: bool = False
    infeasible_steps: int = 0
    merge_gap_at_mp: Optional[float] = None
    rng: Optional[np.random.Generator] = None
    open_events: dict = field(default_factory=dict)


@dataclass
class CavMetrics:
    id: int
    lane: str
    t0: float
    v0: float
    travel_time: float
    energy: float
    fuel: float
    objective: float
    jerk: float
    plan_time: float
    plan_energy: float
    plan_objective: float
    controller: str
    demoted: bool
    infeasible_steps: int


@dataclass
class Metrics:
    per_cav: list = field(default_factory=list)
    events: list = field(default_factory=list)
    infeasible_steps: int = 0
    merge_violations: list = field(default_factory=list)
    crossing_order: list = field(default_factory=list)
    arrivals: list = field(default_factory=list)
    dt: float = 0.1
    beta: float = 0.0

    def mean(self, attr: str, lane: Optional[str] = None) -> float:
        vals = [getattr(m, attr) for m in self.per_cav if lane is None or m.lane == lane]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> dict:
        out = {"n_cavs": len(self.per_cav)}
        for scope in (None, "main", "merge"):
            key = scope or "all"
            out[key] = {a: self.mean(a, scope) for a in
                        ("travel_time", "energy", "fuel", "objective", "jerk", "plan_time", "plan_energy",
                         "plan_objective")}
        out["violation_events"] = len(self.events)
        out["unrecovered_events"] = sum(1 for e in self.events if not e.recovered)
        out["events_over_bound"] = sum(1 for e in self.events if not e.within_bound(self.dt))
        out["violation_time"] = float(sum(e.duration for e in self.events if e.recovered))
        out["infeasible_steps"] = self.infeasible_steps
        out["merge_violations"] = len(self.merge_violations)
        out["fifo_preserved"] = self.crossing_order == sorted(self.crossing_order)
        return out


# ---- coordinator -------------------------------------------------------------


def coordinator_update(queue: list, crossed: set) -> list:
    """Drop vehicles that crossed the merging point; the rest keep FIFO order.

    Queue positions are the list indices, so removing the head shifts every
    remaining index down by one.
    """
    return [c for c in queue if c.id not in crossed]


def lane_predecessor(vehicles: list, cav) -> Optional[object]:
    """Closest earlier vehicle in the same lane among ``vehicles`` (sorted by id)."""
    best = None
    for other in vehicles:
        if other.id >= cav.id:
            break
        if other.lane == cav.lane:
            best = other
    return best


def queue_predecessor(vehicles: list, cav) -> Optional[object]:
    best = None
    for other in vehicles:
        if other.id >= cav.id:
            break
        best = other
    return best


# ---- main loop ---------------------------------------------------------------


def _gate_params(cfg: ScenarioConfig, prm: ControlParams) -> GateParams:
    return GateParams(L=prm.L, phi=prm.phi, delta0=prm.delta0, v_max=prm.v_max, v_min=prm.v_min,
                      beta=cfg.beta)


class _World:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.prm = cfg.control_params()
        self.dt = cfg.dt
        self.beta = cfg.beta
        self.gp = _gate_params(cfg, self.prm)
        self.vehicles: list = []  # every vehicle still visible, sorted by id
        self.next_id = 0
        self.metrics = Metrics(dt=self.dt, beta=self.beta)
        self.log: list = []

    # -- helpers --

    def neighbors(self, cav):
        ip = lane_predecessor(self.vehicles, cav)
        prev = queue_predecessor(self.vehicles, cav)
        if prev is not None and prev is ip:
            prev = None
        return ip, prev

    def step_input(self, cav, t, state=None):
        ip, prev = self.neighbors(cav)
        return StepInput(t, state or cav.state, self.prm, cav.plan,
                         ip.state if ip is not None else None,
                         prev.state if prev is not None else None, cav.v0, cav.u_prev)

    # -- spawning --

    def can_spawn(self, arr: Arrival, t: float) -> bool:
        """Entry is admitted once every barrier is non-negative with an admissible control."""
        probe = CavRecord(self.next_id, arr.lane, t, arr.v0, VehicleState(0.0, arr.v0, 0.0, arr.lane),
                          None, GateReport(), "ocbf")
        inp = self.step_input(probe, t)
        rows, recov, values, recovering, _ = constraint_rows(inp)
        if recovering:
            return False
        lo, hi = control_interval(rows, self.prm)
        if lo > hi:
            return False
        if inp.queue_prev_state is not None:
            # the merge headway must survive the first stretch, where the
            # ramp gives braking almost no authority
            return self._merge_headroom(inp)
        return True

    def _merge_headroom(self, inp) -> bool:
        prm = self.prm
        s, q = inp.state, inp.queue_prev_state
        x, v, xq, vq = s.x, s.v, q.x, q.v
        for _ in range(int(round(prm.L / max(v, 1.0) / prm.dt))):
            probe = StepInput(inp.t, VehicleState(x, v, 0.0, s.lane), prm, inp.plan, None,
                              VehicleState(xq, vq, 0.0, q.lane), inp.v0)
            rows, _, _, recovering, _ = constraint_rows(probe)
            if recovering:
                return False
            lo, hi = control_interval(rows, prm)
            if lo > hi:
                return False
            if hi >= 0 and lo <= 0:
                break  # cruising is admissible: the row is no longer forcing braking
            u = hi
            x, v = x + v * prm.dt, max(v + u * prm.dt, 0.0)
            xq += vq * prm.dt
        return True

    def spawn(self, arr: Arrival, t: float):
        cfg, prm = self.cfg, self.prm
        if cfg.controller.umax_arc:
            plan = plan_with_umax_arc(t, arr.v0, prm.L, self.beta, prm.u_max)
        else:
            plan = solve_unconstrained(t, arr.v0, prm.L, self.beta)
        cav = CavRecord(self.next_id, arr.lane, t, arr.v0, VehicleState(0.0, arr.v0, 0.0, arr.lane),
                        plan, GateReport(), prm.mode,
                        rng=np.random.default_rng([cfg.seed, 1, self.next_id]))
        ip, prev = self.neighbors(cav)
        info = lambda c: None if c is None else CavInfo(c.t0, c.v0, c.plan)
        cav.gate = check_unconstrained_ok(info(cav), info(ip), info(prev), self.gp)
        if prm.mode == "track_only" and not cav.gate.all_ok:
            cav.controller = "ocbf"
        self.vehicles.append(cav)
        self.next_id += 1
        return cav

    # -- control --

    def control(self, cav, t) -> StepResult:
        inp = self.step_input(cav, t)
        mode = cav.controller
        if mode == "track_only":
            res = track_only_step(inp)
            if rows_admit(inp, res.u):
                return res
            cav.controller = "ocbf"
            cav.demoted = True
            mode = "ocbf"
        if mode == "ocbf":
            return ocbf_step(inp)
        if mode == "cbf_fuel":
            return cbf_fuel_step(inp)
        return comfort_lp_step(inp)

    def noise(self, cav):
        w1b, w2b = self.cfg.noise.w1, self.cfg.noise.w2
        if w1b == 0 and w2b == 0:
            return (0.0, 0.0)
        w = cav.rng.uniform(-1.0, 1.0, size=2)
        return (float(w[0] * w1b), float(w[1] * w2b))

    def integrate(self, cav, u, w):
        d = self.cfg.dynamics
        if d.model == "linear":
            return step_dynamics(cav.state, u, self.dt, w)
        return step_dynamics_nonlinear(cav.state, u, self.dt, d.mass, d.k0, d.k1, d.k2, w)

    def track_events(self, cav, t, res: StepResult):
        """Open, update and close violation events from this step's barrier values."""
        values = res.diagnostics.get("b", {})
        rates = res.diagnostics.get("rates", {})
        infeasible = res.diagnostics.get("status") == "infeasible"
        for tag, b in values.items():
            ev = cav.open_events.get(tag)
            if b < -VIOLATION_TOL:
                if ev is None:
                    ev = ViolationEvent(cav.id, tag, t, b)
                    cav.open_events[tag] = ev
                    self.metrics.events.append(ev)
                c = self.prm.c_fixed if self.prm.recovery == "fixed" else rates.get(tag, 0.0)
                if infeasible or tag in res.diagnostics.get("stuck", ()):
                    ev.infeasible = True
                    c = 0.0
                ev.c_min = min(ev.c_min, c)
            elif b >= 0 and ev is not None:
                ev.t_end = t
                del cav.open_events[tag]

    def run(self, arrivals, t_end=None):
        cfg, prm, dt = self.cfg, self.prm, self.dt
        pending = {lane: [a for a in arrivals if a.lane == lane] for lane in LANES}
        self.metrics.arrivals = list(arrivals)
        if t_end is None:
            t_last = max((a.t for a in arrivals), default=0.0)
            t_end = t_last + 20 * prm.L / cfg.traffic.v0_min + 120.0
        k = 0
        while True:
            t = round(k * dt, 10)
            if t > t_end:
                break
            # admit at most one arrival per lane per tick, earliest first
            heads = sorted((pending[l][0] for l in LANES if pending[l] and pending[l][0].t <= t + 1e-12),
                           key=lambda a: (a.t, LANES.index(a.lane)))
            for arr in heads:
                if self.can_spawn(arr, t):
                    self.spawn(arr, t)
                    pending[arr.lane].pop(0)
                else:
                    break  # keep FIFO: a blocked earlier arrival holds back later ones
            active = [c for c in self.vehicles if c.status in ("in_cz", "exiting")]
            if not active and not any(pending.values()):
                break
            # snapshot control for everyone, then commit
            results = {}
            for cav in active:
                if cav.status == "exiting":
                    results[cav.id] = self.control_exit(cav, t)
                    continue
                res = self.control(cav, t)
                results[cav.id] = res
                if res.diagnostics.get("status") == "infeasible":
                    cav.infeasible_steps += 1
                    self.metrics.infeasible_steps += 1
                self.track_events(cav, t, res)
                b = res.diagnostics.get("b", {})
                flags = [cav.controller]
                if res.diagnostics.get("recovering"):
                    flags.append("recovery")
                if res.diagnostics.get("status") in ("infeasible", "clf_dropped"):
                    flags.append(res.diagnostics["status"])
                self.log.append((t, cav.id, cav.lane, cav.state.x, cav.state.v, res.u, res.delta,
                                 b.get("safety", math.nan), b.get("merge", math.nan), "|".join(flags)))
            crossed = set()
            for cav in self.vehicles:
                if cav.status == "exiting":
                    u = results[cav.id].u
                    cav.u_prev = u
                    cav.state = self.integrate(cav, u, self.noise(cav))
                elif cav.status == "in_cz":
                    res = results[cav.id]
                    u = res.u
                    old = cav.state
                    new = self.integrate(cav, u, self.noise(cav))
                    frac = 1.0
                    if new.x >= prm.L:
                        frac = (prm.L - old.x) / (new.x - old.x) if new.x > old.x else 1.0
                        cav.tM_actual = t + frac * dt
                        crossed.add(cav.id)
                    cav.energy += 0.5 * u * u * dt * frac
                    cav.fuel += prm.fuel.rate(old.v, u) * dt * frac
                    cav.jerk += abs(u - cav.u_prev) / dt
                    cav.u_prev = u
                    cav.state = new
                else:
                    hold = 0.0 if cfg.dynamics.model == "linear" else prm.dynamics.balancing_control(cav.state.v)
                    cav.state = self.integrate(cav, hold, self.noise(cav))
            for cav in self.vehicles:
                if cav.id in crossed:
                    self._on_cross(cav)
            self._forget_far_vehicles()
            k += 1
        return self.metrics, self.log

    def control_exit(self, cav, t) -> StepResult:
        """Keep recovering a vehicle that crossed with a violation still open.

        Past the merging point both lanes share one road, so the only
        remaining constraint is the headway to the queue predecessor.  Open
        events close once that headway is non-negative; the vehicle is then
        held at constant speed.
        """
        prev = queue_predecessor(self.vehicles, cav)
        inp = StepInput(t, cav.state, self.prm, cav.plan, prev.state if prev is not None else None,
                        None, cav.v0, cav.u_prev)
        res = ocbf_step(inp)
        b = res.diagnostics.get("b", {}).get("safety", math.inf)
        rates = res.diagnostics.get("rates", {})
        for ev in cav.open_events.values():
            if b >= 0:
                ev.t_end = t
            else:
                ev.c_min = min(ev.c_min, rates.get("safety", 0.0) if self.prm.recovery != "fixed"
                               else self.prm.c_fixed)
                if res.diagnostics.get("status") == "infeasible":
                    ev.infeasible = True
        if b >= 0:
            cav.open_events = {}
            cav.status = "held"
        self.log.append((t, cav.id, cav.lane, cav.state.x, cav.state.v, res.u, res.delta,
                         b if math.isfinite(b) else math.nan, math.nan, "exit_recovery"))
        return res

    def _on_cross(self, cav):
        cav.status = "exiting" if cav.open_events else "held"
        self.metrics.crossing_order.append(cav.id)
        prev = queue_predecessor(self.vehicles, cav)
        if prev is not None:
            gap = prev.state.x - cav.state.x - self.prm.phi * cav.state.v - self.prm.delta0
            cav.merge_gap_at_mp = gap
            if gap < -VIOLATION_TOL:
                self.metrics.merge_violations.append((cav.id, prev.id, gap))
        T = cav.tM_actual - cav.t0
        self.metrics.per_cav.append(CavMetrics(
            cav.id, cav.lane, cav.t0, cav.v0, T, cav.energy, cav.fuel, self.beta * T + cav.energy, cav.jerk,
            cav.plan.horizon, cav.plan.energy, cav.plan.objective, cav.controller, cav.demoted,
            cav.infeasible_steps))

    def _forget_far_vehicles(self):
        """Drop held vehicles that no vehicle inside the zone can still refer to.

        The newest vehicle of each lane stays visible too, so the next arrival
        still sees its lane predecessor.
        """
        keep = []
        active = [c for c in self.vehicles if c.status in ("in_cz", "exiting")]
        referenced = set()
        for c in active:
            ip, prev = self.neighbors(c)
            for o in (ip, prev, queue_predecessor(self.vehicles, c)):
                if o is not None:
                    referenced.add(o.id)
        last = {}
        for c in self.vehicles:
            last[c.lane] = c.id
        newest = self.vehicles[-1].id if self.vehicles else -1
        for c in self.vehicles:
            if c.status in ("in_cz", "exiting") or c.id in referenced:
                keep.append(c)
            elif (c.id == newest or c.id == last.get(c.lane)) and c.state.x < 3 * self.prm.L:
                keep.append(c)
            else:
                c.status = "passed"
        self.vehicles = keep


def scenario_arrivals(cfg: ScenarioConfig) -> list:
    tr = cfg.traffic
    if tr.arrivals is not None:
        arr = [Arrival(float(a[0]), str(a[1]), float(a[2])) for a in tr.arrivals]
        arr.sort(key=lambda a: (a.t, LANES.index(a.lane)))
    else:
        arr = spawn_arrivals(tr.rate_main, tr.rate_merge, tr.horizon, cfg.seed, (tr.v0_min, tr.v0_max))
    if tr.max_cavs is not None:
        arr = arr[: tr.max_cavs]
    return arr


def run_scenario(cfg: ScenarioConfig, arrivals=None):
    """Simulate one scenario.

    Returns:
        (Metrics, trajectory log) where each log row follows ``LOG_FIELDS``.
    """
    world = _World(cfg)
    if arrivals is None:
        arrivals = scenario_arrivals(cfg)
    return world.run(arrivals)
