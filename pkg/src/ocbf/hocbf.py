"""Affine-in-control constraint rows from barrier and Lyapunov functions.

Every builder returns a :class:`ConstraintRow` over the control input(s) only,
except the CLF and max-rate recovery rows which append one extra decision
variable (the relaxation or the recovery rate).  The controller scatters
rows into its full decision vector with ``ConstraintRow.expand``.

Class-K functions are linear, ``alpha(s) = p * s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .dynamics import DOUBLE_INTEGRATOR, Dynamics
from .qpsolve import ConstraintRow

__all__ = [
    "ClassK",
    "BarrierSpec",
    "ConstraintRow",
    "FixedRate",
    "MaxRate",
    "RecoveryRow",
    "hocbf_row",
    "robust_hocbf_row",
    "positive_degree",
    "recovery_row",
    "recovery_sequence",
    "clf_row",
    "speed_clf",
    "merge_phi",
    "safety_barrier",
    "speed_max_barrier",
    "speed_min_barrier",
    "merge_barrier",
    "position_max_barrier",
]


@dataclass(frozen=True)
class ClassK:
    """Linear class-K function with gain ``p``."""

    p: float = 1.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"class-K gain must be positive, got {self.p}")

    def __call__(self, s):
        return self.p * s


def _vec(x):
    return None if x is None else np.atleast_1d(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class BarrierSpec:
    """A barrier value and its Lie derivatives at one state.

    Args:
        value: b(x).
        lf: L_f b.
        lg: L_g b, one entry per control input (zero for relative degree 2).
        rel_degree: 1 or 2.
        classk: one class-K function per degree.
        grad: db/dx over the vehicle's own state (x, v); used for noise margins.
        lf2: L_f^2 b (degree 2 only).
        lglf: L_g L_f b (degree 2 only).
        neighbor_grad: db/d(neighbor state), when b depends on another vehicle.
        tag: label carried into the produced rows.
    """

    value: float
    lf: float
    lg: np.ndarray
    rel_degree: int = 1
    classk: tuple = (ClassK(),)
    grad: Optional[np.ndarray] = None
    lf2: Optional[float] = None
    lglf: Optional[np.ndarray] = None
    neighbor_grad: Optional[np.ndarray] = None
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lg", _vec(self.lg))
        object.__setattr__(self, "grad", _vec(self.grad))
        object.__setattr__(self, "lglf", _vec(self.lglf))
        object.__setattr__(self, "neighbor_grad", _vec(self.neighbor_grad))
        object.__setattr__(self, "classk", tuple(self.classk))

    @property
    def psi1(self) -> float:
        """First chained function ``b' + alpha_1(b)`` (degree 2)."""
        return self.lf + self.classk[0](self.value)


def _check_degree(spec: BarrierSpec):
    if spec.rel_degree not in (1, 2):
        raise ValueError(f"relative degree must be 1 or 2, got {spec.rel_degree}")
    if len(spec.classk) < spec.rel_degree:
        raise ValueError("need one class-K function per relative degree")
    if spec.rel_degree == 2 and (spec.lf2 is None or spec.lglf is None):
        raise ValueError("degree-2 barrier needs lf2 and lglf")


def hocbf_row(spec: BarrierSpec) -> ConstraintRow:
    """Row that keeps ``b >= 0`` forward invariant.

    Degree 1: ``-L_g b u <= L_f b + p b``.
    Degree 2: ``-L_g L_f b u <= L_f^2 b + p1 L_f b + p2 psi1``.
    """
    _check_degree(spec)
    if spec.rel_degree == 1:
        return ConstraintRow(-spec.lg, spec.lf + spec.classk[0](spec.value), spec.tag)
    p1, p2 = spec.classk[0], spec.classk[1]
    rhs = spec.lf2 + p1(spec.lf) + p2(spec.psi1)
    return ConstraintRow(-spec.lglf, rhs, spec.tag)


def noise_margin(spec: BarrierSpec, W, W_neighbor=None) -> float:
    """Worst-case drop of ``db/dt`` caused by bounded additive state noise."""
    W = np.asarray(W, dtype=float)
    if np.any(W < 0):
        raise ValueError("noise bounds must be non-negative")
    margin = 0.0
    if spec.grad is not None:
        margin += float(np.abs(spec.grad) @ W)
    if W_neighbor is not None and spec.neighbor_grad is not None:
        Wn = np.asarray(W_neighbor, dtype=float)
        if np.any(Wn < 0):
            raise ValueError("noise bounds must be non-negative")
        margin += float(np.abs(spec.neighbor_grad) @ Wn)
    return margin


def robust_hocbf_row(spec: BarrierSpec, W, W_neighbor=None) -> ConstraintRow:
    """Degree-1 row tightened by ``|db/dx| W`` (plus the neighbor's share if given)."""
    if spec.rel_degree != 1:
        raise ValueError("noise-robust rows are only defined for relative degree 1")
    row = hocbf_row(spec)
    return ConstraintRow(row.coeffs, row.rhs - noise_margin(spec, W, W_neighbor), row.tag)


def positive_degree(derivs: Sequence[float]) -> int:
    """Index of the first strictly positive entry of (b, b', ...), else its length."""
    for i, d in enumerate(derivs):
        if d > 0:
            return i
    return len(derivs)


@dataclass(frozen=True)
class FixedRate:
    c: float = 1.0


@dataclass(frozen=True)
class MaxRate:
    K: float = 100.0
    c_max: float = 5.0


@dataclass(frozen=True)
class RecoveryRow:
    """A recovery constraint plus, in max-rate mode, its rate variable's data.

    ``row`` spans the controls, followed by the rate ``c`` when
    ``rate_cost`` is set.  ``rate_cost`` is the linear cost on ``c`` (negative,
    so the rate is pushed up) and ``c_max`` its upper bound.
    """

    row: ConstraintRow
    rate_cost: Optional[float] = None
    c_max: float = 0.0
    fixed_c: Optional[float] = None

    @property
    def has_rate(self) -> bool:
        return self.rate_cost is not None


def recovery_row(spec: BarrierSpec, mode: Union[FixedRate, MaxRate] = MaxRate()) -> RecoveryRow:
    """Row forcing ``db/dt >= c`` on a violated degree-1 barrier."""
    if spec.value >= 0:
        raise ValueError("recovery rows are only built for violated constraints (b < 0)")
    if spec.rel_degree != 1:
        raise ValueError("use recovery_sequence for relative degree 2")
    if not np.any(spec.lg != 0):
        raise ValueError("control has no authority over this barrier (L_g b = 0)")
    tag = spec.tag or "recovery"
    if isinstance(mode, FixedRate):
        if mode.c <= 0:
            raise ValueError("recovery rate must be positive")
        return RecoveryRow(ConstraintRow(-spec.lg, spec.lf - mode.c, tag), fixed_c=mode.c)
    if mode.K <= 0 or mode.c_max <= 0:
        raise ValueError("K and c_max must be positive")
    coeffs = np.append(-spec.lg, 1.0)
    return RecoveryRow(ConstraintRow(coeffs, spec.lf, tag), rate_cost=-mode.K, c_max=mode.c_max)


def recovery_sequence(spec: BarrierSpec, rho: int, eps: Optional[float] = None, W=None) -> ConstraintRow:
    """Recovery row for a violated degree-2 barrier at positive degree ``rho``.

    rho=2 asks for ``b'' >= eps``; rho=1 keeps ``b' - eps`` positive through
    the class-K chain, so ``b`` itself climbs at rate ``eps`` or more.
    ``eps`` defaults to ``|d psi / dx| W`` when a noise bound is given, else 0.5.
    """
    if spec.rel_degree != 2:
        raise ValueError("recovery_sequence needs a relative-degree-2 barrier")
    _check_degree(spec)
    if rho == 0:
        raise ValueError("positive degree 0: constraint already satisfied")
    if rho not in (1, 2):
        raise ValueError(f"positive degree must be 1 or 2, got {rho}")
    if eps is None:
        eps = noise_margin(spec, W) if W is not None else 0.5
        eps = eps if eps > 0 else 0.5
    if eps <= 0:
        raise ValueError("eps must be positive")
    tag = spec.tag or "recovery"
    if rho == 2:
        return ConstraintRow(-spec.lglf, spec.lf2 - eps, tag)
    p2 = spec.classk[1]
    return ConstraintRow(-spec.lglf, spec.lf2 + p2(spec.lf - eps), tag)


def clf_row(y: float, lgv, lfv: float, eps: float) -> ConstraintRow:
    """Relaxed Lyapunov decrease row over (u, delta) for ``V = y^2``."""
    if eps <= 0:
        raise ValueError("CLF gain must be positive")
    lgv = np.atleast_1d(np.asarray(lgv, dtype=float))
    return ConstraintRow(np.append(lgv, -1.0), -lfv - eps * y * y, "clf")


def speed_clf(v: float, v_ref: float, eps: float, dyn: Dynamics = DOUBLE_INTEGRATOR) -> ConstraintRow:
    """CLF row driving speed to ``v_ref`` (reference held fixed within the step)."""
    y = v - v_ref
    return clf_row(y, 2 * y * dyn.g, 2 * y * dyn.drift(v), eps)


def merge_phi(x: float, v0: float, L: float, phi: float, delta0: float = 0.0) -> float:
    """Linear ramp of the merge headway from ``-delta0/v0`` at x=0 to ``phi`` at x=L."""
    return -delta0 / v0 + (phi + delta0 / v0) * x / L


# ---- barrier builders for the merging problem -------------------------------


def safety_barrier(x, v, x_ip, v_ip, phi, delta0=0.0, p=1.0, dyn: Dynamics = DOUBLE_INTEGRATOR) -> BarrierSpec:
    """Rear-end headway to the same-lane predecessor: ``x_ip - x - phi v - delta0``."""
    b = x_ip - x - phi * v - delta0
    lf = v_ip - v - phi * dyn.drift(v)
    return BarrierSpec(b, lf, [-phi * dyn.g], 1, (ClassK(p),), grad=[-1.0, -phi],
                       neighbor_grad=[1.0, 0.0], tag="safety")


def speed_max_barrier(v, v_max, p=1.0, dyn: Dynamics = DOUBLE_INTEGRATOR) -> BarrierSpec:
    return BarrierSpec(v_max - v, -dyn.drift(v), [-dyn.g], 1, (ClassK(p),), grad=[0.0, -1.0],
                       tag="speed_max")


def speed_min_barrier(v, v_min, p=1.0, dyn: Dynamics = DOUBLE_INTEGRATOR) -> BarrierSpec:
    return BarrierSpec(v - v_min, dyn.drift(v), [dyn.g], 1, (ClassK(p),), grad=[0.0, 1.0],
                       tag="speed_min")


def merge_barrier(x, v, x_prev, v_prev, v0, L, phi, delta0=0.0, p=1.0,
                  dyn: Dynamics = DOUBLE_INTEGRATOR, dt=0.0, u_span=0.0) -> BarrierSpec:
    """Merge headway to the FIFO predecessor: ``x_prev - x - Phi(x) v - delta0``.

    Positions are measured from each lane's own origin, so both lanes share
    the merging point at ``L``.  With ``dt > 0`` the derivatives are replaced
    by the exact one-step forward-Euler increment divided by ``dt``, which
    adds a ``Phi' v dt`` term to the control coefficient; ``u_span`` bounds
    ``|dv/dt|`` in the position-noise sensitivity of that increment.
    """
    Phi = merge_phi(x, v0, L, phi, delta0)
    dPhi = (phi + delta0 / v0) / L
    b = x_prev - x - Phi * v - delta0
    fv = dyn.drift(v)
    ramp = Phi + dPhi * v * dt
    lf = v_prev - v - dPhi * v * v - ramp * fv
    lg = -ramp * dyn.g
    grad = [-1.0 - dPhi * (v + dt * u_span), -ramp]
    return BarrierSpec(b, lf, [lg], 1, (ClassK(p),), grad=grad, neighbor_grad=[1.0, 0.0], tag="merge")


def position_max_barrier(x, v, x_max, p1=1.0, p2=1.0, dyn: Dynamics = DOUBLE_INTEGRATOR) -> BarrierSpec:
    """Relative-degree-2 position box ``x_max - x``."""
    return BarrierSpec(x_max - x, -v, [0.0], 2, (ClassK(p1), ClassK(p2)), grad=[-1.0, 0.0],
                       lf2=-dyn.drift(v), lglf=[-dyn.g], tag="position_max")
