"""Longitudinal vehicle models: a double integrator and a resistance-force variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dynamics:
    """Speed dynamics ``dv/dt = f_v(v) + g * u`` with ``dx/dt = v``.

    With ``k0 = k1 = k2 = 0`` and ``mass = 1`` this is the double integrator.
    Otherwise ``f_v = -(k0 sgn(v) + k1 v + k2 v^2) / mass`` and ``g = 1/mass``.
    """

    mass: float = 1.0
    k0: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if min(self.k0, self.k1, self.k2) < 0:
            raise ValueError("resistance coefficients must be non-negative")

    @property
    def linear(self) -> bool:
        return self.k0 == 0 and self.k1 == 0 and self.k2 == 0

    @property
    def g(self) -> float:
        return 1.0 / self.mass

    def resistance(self, v: float) -> float:
        # sgn(0) = 0 avoids chatter at standstill
        return self.k0 * float(np.sign(v)) + self.k1 * v + self.k2 * v * v

    def drift(self, v: float) -> float:
        return -self.resistance(v) / self.mass

    def accel(self, v: float, u: float) -> float:
        return self.drift(v) + self.g * u

    def balancing_control(self, v: float) -> float:
        """Control that holds the speed constant."""
        return self.resistance(v)


DOUBLE_INTEGRATOR = Dynamics()


@dataclass(frozen=True)
class VehicleState:
    """Position from the lane origin, speed, and the control applied last step."""

    x: float
    v: float
    u_applied: float = 0.0
    lane: str = "main"


# Placeholder polynomial coefficients (mL/s); only relative comparisons are meaningful.
DEFAULT_OMEGA = (0.1569, 2.450e-2, 7.415e-4, 5.975e-5)
DEFAULT_R = (0.07224, 9.681e-2, 1.075e-3)


@dataclass(frozen=True)
class FuelModel:
    """Polynomial fuel-rate model: cruise term in speed plus a throttle term.

    Braking (u < 0) burns no throttle fuel.
    """

    omega: tuple = DEFAULT_OMEGA
    r: tuple = DEFAULT_R

    def cruise(self, v: float) -> float:
        w0, w1, w2, w3 = self.omega
        return w0 + w1 * v + w2 * v * v + w3 * v**3

    def accel_coeff(self, v: float) -> float:
        r0, r1, r2 = self.r
        return r0 + r1 * v + r2 * v * v

    def rate(self, v: float, u: float) -> float:
        return self.cruise(v) + max(u, 0.0) * self.accel_coeff(v)
