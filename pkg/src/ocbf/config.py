"""Scenario configuration: nested dataclasses with YAML (de)serialization.

Every field has a default, so an empty file is a valid scenario.  Unknown keys
are rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .controller import MODES, RECOVERY_MODES, ControlParams
from .dynamics import DEFAULT_OMEGA, DEFAULT_R, Dynamics, FuelModel
from .ocplan import U_FORMS, V_FORMS, TrackingGains, beta_from_alpha


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class Geometry:
    L: float = 400.0
    phi: float = 1.8
    delta0: float = 0.0


@dataclass
class Bounds:
    u_min: float = -3.924
    u_max: float = 3.924
    v_min: float = 0.0
    v_max: float = 30.0


@dataclass
class Objective:
    """Exactly one of ``alpha`` (normalized trade-off) or ``beta`` (time weight)."""

    alpha: Optional[float] = None
    beta: Optional[float] = None


@dataclass
class ControllerConfig:
    mode: str = "ocbf"
    u_form: str = "ratio"
    v_form: str = "ratio"
    sigma: list = field(default_factory=lambda: [4.0, 12.0])
    k: list = field(default_factory=lambda: [0.25, 0.1])
    sigma_v: float = 40.0
    eps_clf: float = 10.0
    p_safety: float = 1.0
    p_merge: float = 1.0
    p_speed: float = 1.0
    beta_relax: float = 1.0
    recovery: str = "max_rate"
    K: float = 100.0
    c_max: float = 5.0
    c: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    robust: bool = False
    umax_arc: bool = True


@dataclass
class Traffic:
    rate_main: float = 0.1
    rate_merge: float = 0.1
    horizon: float = 300.0
    max_cavs: Optional[int] = None
    v0_min: float = 15.0
    v0_max: float = 20.0
    arrivals: Optional[list] = None  # explicit [t, lane, v0] triples override the Poisson draw


@dataclass
class Noise:
    w1: float = 0.0
    w2: float = 0.0


@dataclass
class DynamicsConfig:
    model: str = "linear"
    mass: float = 1.0
    k0: float = 0.1 / 1650
    k1: float = 5.0 / 1650
    k2: float = 0.25 / 1650
    omega: list = field(default_factory=lambda: list(DEFAULT_OMEGA))
    r: list = field(default_factory=lambda: list(DEFAULT_R))


@dataclass
class ScenarioConfig:
    geometry: Geometry = field(default_factory=Geometry)
    bounds: Bounds = field(default_factory=Bounds)
    objective: Objective = field(default_factory=Objective)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    traffic: Traffic = field(default_factory=Traffic)
    noise: Noise = field(default_factory=Noise)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        validate(self)

    # -- derived views ---------------------------------------------------------

    @property
    def alpha(self) -> float:
        return 0.25 if self.objective.alpha is None and self.objective.beta is None else self.objective.alpha

    @property
    def beta(self) -> float:
        if self.objective.beta is not None:
            return float(self.objective.beta)
        b = self.bounds
        return beta_from_alpha(self.alpha, b.u_max, b.u_min)

    @property
    def noise_on(self) -> bool:
        return self.noise.w1 > 0 or self.noise.w2 > 0

    def vehicle_dynamics(self) -> Dynamics:
        d = self.dynamics
        if d.model == "linear":
            return Dynamics()
        return Dynamics(d.mass, d.k0, d.k1, d.k2)

    def control_params(self) -> ControlParams:
        c, g, b = self.controller, self.geometry, self.bounds
        W = (self.noise.w1, self.noise.w2) if c.robust else None
        gains = TrackingGains(tuple(c.sigma), tuple(c.k), c.sigma_v, c.u_form, c.v_form)
        return ControlParams(
            u_min=b.u_min, u_max=b.u_max, v_min=b.v_min, v_max=b.v_max, phi=g.phi, delta0=g.delta0,
            L=g.L, eps_clf=c.eps_clf, p_safety=c.p_safety, p_merge=c.p_merge, p_speed=c.p_speed,
            beta_relax=c.beta_relax, dt=self.dt, recovery=c.recovery, K=c.K, c_max=c.c_max,
            c_fixed=c.c, W=W, gains=gains, fuel=FuelModel(tuple(self.dynamics.omega), tuple(self.dynamics.r)),
            beta1=c.beta1, beta2=c.beta2, mode=c.mode, dynamics=self.vehicle_dynamics(),
        )

    def replace(self, **sections) -> "ScenarioConfig":
        """Copy with selected top-level fields or ``section__field`` keys replaced."""
        data = to_dict(self)
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                data[sec][name] = value
            else:
                data[key] = value
        return from_dict(data)


def validate(cfg: ScenarioConfig):
    o = cfg.objective
    if o.alpha is not None and o.beta is not None:
        raise ConfigError("objective: set exactly one of alpha or beta, not both")
    if o.alpha is not None and not 0 <= o.alpha < 1:
        raise ConfigError(f"objective.alpha must lie in [0, 1), got {o.alpha}")
    if o.beta is not None and o.beta < 0:
        raise ConfigError(f"objective.beta must be non-negative, got {o.beta}")
    g, b = cfg.geometry, cfg.bounds
    if g.L <= 0 or g.phi <= 0 or g.delta0 < 0:
        raise ConfigError("geometry: need L > 0, phi > 0, delta0 >= 0")
    if not b.u_min < 0 < b.u_max:
        raise ConfigError("bounds: need u_min < 0 < u_max")
    if not 0 <= b.v_min < b.v_max:
        raise ConfigError("bounds: need 0 <= v_min < v_max")
    c = cfg.controller
    if c.mode not in MODES:
        raise ConfigError(f"controller.mode must be one of {MODES}, got {c.mode!r}")
    if c.recovery not in RECOVERY_MODES:
        raise ConfigError(f"controller.recovery must be one of {RECOVERY_MODES}")
    if c.u_form not in U_FORMS or c.v_form not in V_FORMS:
        raise ConfigError(f"controller.u_form in {U_FORMS}, controller.v_form in {V_FORMS}")
    if len(c.sigma) != 2 or min(c.sigma) <= 0 or not c.sigma[0] < c.sigma[1]:
        raise ConfigError(f"controller.sigma must be two positive increasing values, got {c.sigma}")
    if len(c.k) != 2 or min(c.k) <= 0:
        raise ConfigError(f"controller.k must be two positive values, got {c.k}")
    for name in ("eps_clf", "p_safety", "p_merge", "p_speed", "beta_relax", "K", "c_max", "c", "sigma_v"):
        if getattr(c, name) <= 0:
            raise ConfigError(f"controller.{name} must be positive")
    if c.beta1 < 0 or c.beta2 < 0:
        raise ConfigError("controller.beta1 and beta2 must be non-negative")
    for name in ("p_safety", "p_merge", "p_speed"):
        if getattr(c, name) * cfg.dt > 1:
            raise ConfigError(f"controller.{name} * dt must not exceed 1 for sampled invariance")
    t = cfg.traffic
    if t.rate_main < 0 or t.rate_merge < 0 or t.horizon < 0:
        raise ConfigError("traffic: rates and horizon must be non-negative")
    if not 0 < t.v0_min <= t.v0_max:
        raise ConfigError("traffic: need 0 < v0_min <= v0_max")
    if t.max_cavs is not None and t.max_cavs < 0:
        raise ConfigError("traffic.max_cavs must be non-negative")
    if t.arrivals is not None:
        for a in t.arrivals:
            if len(a) != 3 or a[1] not in ("main", "merge") or a[2] <= 0:
                raise ConfigError(f"traffic.arrivals entries are [t, lane, v0], got {a}")
    if cfg.noise.w1 < 0 or cfg.noise.w2 < 0:
        raise ConfigError("noise bounds must be non-negative")
    d = cfg.dynamics
    if d.model not in ("linear", "nonlinear"):
        raise ConfigError("dynamics.model must be linear or nonlinear")
    if d.mass <= 0 or min(d.k0, d.k1, d.k2) < 0:
        raise ConfigError("dynamics: need mass > 0 and non-negative k0, k1, k2")
    if len(d.omega) != 4 or len(d.r) != 3:
        raise ConfigError("dynamics: omega has 4 coefficients and r has 3")
    if cfg.dt <= 0:
        raise ConfigError("dt must be positive")


_SECTIONS = {
    "geometry": Geometry,
    "bounds": Bounds,
    "objective": Objective,
    "controller": ControllerConfig,
    "traffic": Traffic,
    "noise": Noise,
    "dynamics": DynamicsConfig,
}


def from_dict(data: Optional[dict]) -> ScenarioConfig:
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("top level of a scenario must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            value = {} if value is None else value
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = sorted(set(value) - names)
            if unknown:
                raise ConfigError(f"unknown key(s) {', '.join(key + '.' + u for u in unknown)}")
            try:
                kwargs[key] = cls(**value)
            except TypeError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif key in ("dt", "seed"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def to_dict(cfg: ScenarioConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    return from_dict(data)


def load_config(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
