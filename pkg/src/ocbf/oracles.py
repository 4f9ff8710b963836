"""Brute-force reference solvers used to cross-check the fast code paths.

These are slow on purpose and only meant for tests and the ``verify`` command.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import brentq

from .qpsolve import FEAS_TOL, stack_constraints


def enumerate_qp(H, F, rows=(), lower=None, upper=None, tol=1e-9):
    """Minimize a convex QP by trying every active set of size <= n.

    Each candidate set is solved as an equality-constrained KKT system
    (least-squares so that PSD Hessians still yield a point); the best
    feasible candidate wins.

    Returns:
        (z, objective) or (None, inf) when nothing feasible was found.
    """
    F = np.asarray(F, dtype=float)
    n = F.size
    H = np.asarray(H, dtype=float).reshape(n, n)
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    A, b, _ = stack_constraints(list(rows), lower, upper)
    m = b.size
    best_z, best_f = None, np.inf
    for k in range(0, min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            As = A[list(S)]
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            K[:n, n:] = As.T
            K[n:, :n] = As
            rhs = np.concatenate([-F, b[list(S)]])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            z = sol[:n]
            if np.abs(K @ sol - rhs).max(initial=0.0) > 1e-7 * max(1.0, np.abs(rhs).max(initial=0.0)):
                continue
            if m and np.max(A @ z - b) > tol * max(1.0, np.abs(b).max()):
                continue
            f = 0.5 * z @ H @ z + F @ z
            if f < best_f - 1e-12:
                best_z, best_f = z, f
    return best_z, best_f


def enumerate_lp(c, rows=(), lower=None, upper=None, tol=1e-9):
    """Minimize an LP over a bounded polytope by visiting every vertex."""
    c = np.asarray(c, dtype=float)
    n = c.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    A, b, _ = stack_constraints(list(rows), lower, upper)
    best_z, best_f = None, np.inf
    for S in itertools.combinations(range(b.size), n):
        As = A[list(S)]
        if abs(np.linalg.det(As)) < 1e-12:
            continue
        z = np.linalg.solve(As, b[list(S)])
        if np.max(A @ z - b) > tol * max(1.0, np.abs(b).max()):
            continue
        f = float(c @ z)
        if f < best_f - 1e-12:
            best_z, best_f = z, f
    return best_z, best_f


def grid_argmin(cost, feasible, axes):
    """Exhaustive grid search; ``axes`` is a list of 1-D sample arrays."""
    best, best_f = None, np.inf
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    for z in pts:
        if not feasible(z):
            continue
        f = cost(z)
        if f < best_f:
            best, best_f = z, f
    return best, best_f


def fd_lie(func, x, field, h=1e-6):
    """Central-difference directional derivative of ``func`` along ``field(x)``."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(field(x), dtype=float)
    return (func(x + h * d) - func(x - h * d)) / (2 * h)


def reduced_plan_a(T, v0, L):
    """Cubic coefficient of the merging plan once b, c, d are eliminated."""
    return 3.0 * (v0 * T - L) / T**3


def transversality_residual(T, v0, L, beta):
    a = reduced_plan_a(T, v0, L)
    return beta + a * v0 - 0.5 * a * a * T * T


def bisect_horizon(v0, L, beta, xtol=1e-13):
    """Terminal time of the merging plan from the one-dimensional residual.

    The physically meaningful root lies in (0, L/v0]: the residual tends to
    -inf as T -> 0 and equals beta >= 0 at T = L/v0.
    """
    T_hi = L / v0
    if beta == 0.0:
        return T_hi
    T_lo = T_hi
    while transversality_residual(T_lo, v0, L, beta) > 0:
        T_lo *= 0.5
    return brentq(transversality_residual, T_lo, T_hi, args=(v0, L, beta), xtol=xtol, rtol=1e-15)


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def is_feasible(A, b, z):
    return bool(np.all(A @ z - b <= FEAS_TOL))
