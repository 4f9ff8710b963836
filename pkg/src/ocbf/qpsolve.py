"""Dense primal active-set solver for the tiny QPs and LPs solved every control step.

Problems have 2-5 decision variables and a handful of inequality rows, so
everything is plain numpy on dense arrays.  LPs go through the same code path
with a tiny diagonal regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FEAS_TOL = 1e-9
STAT_TOL = 1e-8
LP_REG = 1e-10

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class ConstraintRow:
    """One affine inequality ``coeffs @ z <= rhs`` over a decision vector."""

    coeffs: np.ndarray
    rhs: float
    tag: str = ""

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "rhs", float(self.rhs))
        if not (math.isfinite(self.rhs) and np.isfinite(coeffs).all()):
            raise ValueError(f"non-finite constraint row ({self.tag}): {coeffs} <= {self.rhs}")

    def expand(self, n: int, columns: Sequence[int]) -> "ConstraintRow":
        """Scatter the coefficients into a length-``n`` decision vector."""
        out = np.zeros(n)
        out[list(columns)] = self.coeffs
        return ConstraintRow(out, self.rhs, self.tag)

    def residual(self, z) -> float:
        return float(self.coeffs @ np.asarray(z, dtype=float) - self.rhs)


def _bounds(values, n, fill):
    if values is None:
        return np.full(n, fill)
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size != n:
        raise ValueError(f"bound vector has length {arr.size}, expected {n}")
    return arr


@dataclass
class QpProblem:
    """min 1/2 z'Hz + F'z  s.t.  rows, lower <= z <= upper."""

    H: np.ndarray
    F: np.ndarray
    rows: Sequence[ConstraintRow] = ()
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float).reshape(-1)
        n = self.F.size
        self.H = np.asarray(self.H, dtype=float).reshape(n, n)
        if np.abs(self.H - self.H.T).max(initial=0.0) > 1e-12:
            raise ValueError("H must be symmetric")
        d = np.diagonal(self.H)
        scale = max(1.0, float(np.abs(self.H).max(initial=0.0)))
        diagonal = not np.any(self.H - np.diag(d))
        lam_min = d.min(initial=0.0) if diagonal else np.linalg.eigvalsh(self.H).min(initial=0.0)
        if n and lam_min < -1e-10 * scale:
            raise ValueError("H must be positive semidefinite")
        self.rows = list(self.rows)
        for r in self.rows:
            if r.coeffs.size != n:
                raise ValueError(f"row '{r.tag}' has {r.coeffs.size} coefficients, expected {n}")
        self.lower = _bounds(self.lower, n, -np.inf)
        self.upper = _bounds(self.upper, n, np.inf)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.F.size


@dataclass
class LpProblem:
    """min c'z  s.t.  rows, lower <= z <= upper."""

    c: np.ndarray
    rows: Sequence[ConstraintRow] = ()
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.rows = list(self.rows)
        for r in self.rows:
            if r.coeffs.size != n:
                raise ValueError(f"row '{r.tag}' has {r.coeffs.size} coefficients, expected {n}")
        self.lower = _bounds(self.lower, n, -np.inf)
        self.upper = _bounds(self.upper, n, np.inf)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: str
    active_set: tuple = ()
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound_multipliers: tuple = (np.zeros(0), np.zeros(0))
    residual: float = 0.0
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def stack_constraints(rows, lower, upper):
    """Stack rows and finite bounds into ``A z <= b``.

    Returns (A, b, labels) where labels[k] is the row index for a row, or
    ("lower", j) / ("upper", j) for a bound.
    """
    n = lower.size
    A, b, labels = [], [], []
    for i, r in enumerate(rows):
        A.append(r.coeffs)
        b.append(r.rhs)
        labels.append(i)
    for j in range(n):
        if np.isfinite(lower[j]):
            e = np.zeros(n)
            e[j] = -1.0
            A.append(e)
            b.append(-lower[j])
            labels.append(("lower", j))
        if np.isfinite(upper[j]):
            e = np.zeros(n)
            e[j] = 1.0
            A.append(e)
            b.append(upper[j])
            labels.append(("upper", j))
    if not A:
        return np.zeros((0, n)), np.zeros(0), labels
    return np.array(A, dtype=float), np.array(b, dtype=float), labels


def _null_space(M):
    if M.shape[0] == 0:
        return np.eye(M.shape[1])
    if M.shape[1] == 1:
        return np.zeros((1, 0)) if np.any(M) else np.eye(1)
    _, s, vt = np.linalg.svd(M)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    return vt[rank:].T


def _active_set(H, F, A, b, z, work, max_iter):
    """Primal active-set iterations from a feasible ``z``.

    Returns (z, work, lam_work, status, iterations).  ``work`` is kept sorted so
    ties in the ratio test and in the dropping rule go to the lowest index.
    """
    n = z.size
    m = b.size
    hscale = max(1.0, float(np.abs(H).max())) if n else 1.0
    curv_tol = 1e-13 * hscale
    work = sorted(work)
    bland_after = 4 * (n + m) + 10
    row_scale = np.maximum(1.0, np.abs(A).max(axis=1, initial=0.0))
    lam = np.zeros(0)
    for it in range(max_iter):
        g = H @ z + F
        gscale = max(1.0, float(np.abs(g).max()))
        Aw = A[work] if work else np.zeros((0, n))
        Z = _null_space(Aw)
        ray = False
        d = np.zeros(n)
        if Z.shape[1]:
            gr = Z.T @ g
            if Z.shape[1] == 1:
                w, Q = np.array([float(Z[:, 0] @ H @ Z[:, 0])]), np.ones((1, 1))
            else:
                w, Q = np.linalg.eigh(Z.T @ H @ Z)
            gq = Q.T @ gr
            flat = w <= curv_tol
            descent = flat & (np.abs(gq) > 1e-12 * gscale)
            if descent.any():
                # zero curvature: move along the descent ray until something blocks
                d = -(Z @ (Q[:, descent] @ gq[descent]))
                ray = True
            else:
                pos = ~flat
                if pos.any():
                    d = -(Z @ (Q[:, pos] @ (gq[pos] / w[pos])))
        if not ray and np.abs(d).max(initial=0.0) <= 1e-13 * (1.0 + np.abs(z).max(initial=0.0)):
            if not work:
                return z, work, np.zeros(0), OPTIMAL, it
            lam = np.linalg.lstsq(Aw.T, -g, rcond=None)[0]
            if lam.min() >= -STAT_TOL * gscale:
                return z, work, lam, OPTIMAL, it
            if it >= bland_after:
                k = int(np.flatnonzero(lam < -STAT_TOL * gscale)[0])
            else:
                k = int(np.argmin(lam))
            work.pop(k)
            continue
        Ad = A @ d
        alpha = np.inf if ray else 1.0
        block = -1
        cand = Ad > 1e-14 * np.abs(d).max() * row_scale
        cand[work] = False
        if cand.any():
            idx = np.flatnonzero(cand)
            steps = np.maximum(b[idx] - A[idx] @ z, 0.0) / Ad[idx]
            k = int(np.argmin(steps))
            if steps[k] < alpha:
                alpha = float(steps[k])
                block = int(idx[k])
        if not np.isfinite(alpha):
            return z, work, np.zeros(0), UNBOUNDED, it
        z = z + alpha * d
        if block >= 0:
            work.append(block)
            work.sort()
    raise RuntimeError(f"active-set iteration limit ({max_iter}) reached")


def _phase_one(A, b, z0):
    """Minimize a single shared slack s with A z - s <= b, s >= 0."""
    n = z0.size
    m = b.size
    A1 = np.zeros((m + 1, n + 1))
    A1[:m, :n] = A
    A1[:m, n] = -1.0
    A1[m, n] = -1.0
    b1 = np.append(b, 0.0)
    s0 = max(0.0, float(np.max(A @ z0 - b)))
    F1 = np.zeros(n + 1)
    F1[n] = 1.0
    z1, work, _, status, its = _active_set(
        np.zeros((n + 1, n + 1)), F1, A1, b1, np.append(z0, s0), [], 50 * (n + m + 2)
    )
    if status != OPTIMAL:
        raise RuntimeError("phase-one problem reported unbounded")
    return z1[:n], float(z1[n]), [i for i in work if i < m], its


def _solve(H, F, rows, lower, upper, z0=None):
    n = F.size
    A, b, labels = stack_constraints(rows, lower, upper)
    m = b.size
    n_rows = len(rows)

    def pack(z, work, lam, status, its, residual=0.0):
        lam_full = np.zeros(m)
        if len(work):
            lam_full[work] = lam
        row_lam = lam_full[:n_rows].copy()
        lo_lam, up_lam = np.zeros(n), np.zeros(n)
        for k in range(n_rows, m):
            kind, j = labels[k]
            (lo_lam if kind == "lower" else up_lam)[j] = lam_full[k]
        if status == OPTIMAL:
            residual = float(np.abs(H @ z + F + A.T @ lam_full).max(initial=0.0))
        active = tuple(labels[k] for k in work)
        return QpSolution(z, float(0.5 * z @ H @ z + F @ z), status, active, row_lam,
                          (lo_lam, up_lam), residual, its)

    # unconstrained minimizer when H is positive definite
    try:
        if n and np.diagonal(H).min() <= 0:
            raise np.linalg.LinAlgError("semidefinite H")
        z_unc = -np.linalg.solve(H, F)
        if m == 0 or np.all(A @ z_unc - b <= FEAS_TOL):
            return pack(z_unc, [], np.zeros(0), OPTIMAL, 0)
    except np.linalg.LinAlgError:
        if m == 0:
            return pack(np.zeros(n), [], np.zeros(0), UNBOUNDED, 0)

    if z0 is None:
        z0 = np.clip(np.zeros(n), lower, upper)
    z0 = np.asarray(z0, dtype=float)
    its0 = 0
    if np.any(A @ z0 - b > FEAS_TOL):
        z0, s, _, its0 = _phase_one(A, b, z0)
        if s > FEAS_TOL:
            return pack(z0, [], np.zeros(0), INFEASIBLE, its0, residual=s)
    work = [i for i in range(m) if abs(A[i] @ z0 - b[i]) <= FEAS_TOL][: max(0, n)]
    # keep only a linearly independent subset of the tight rows
    indep = []
    for i in work:
        cand = indep + [i]
        if len(cand) == 1 or np.linalg.matrix_rank(A[cand]) == len(cand):
            indep = cand
    z, work, lam, status, its = _active_set(H, F, A, b, z0, indep, 50 * (n + m + 2))
    return pack(z, work, lam, status, its + its0)


def solve_qp(p: QpProblem, z0=None) -> QpSolution:
    """Solve a convex QP; ``z0`` is an optional warm-start point."""
    return _solve(p.H, p.F, p.rows, p.lower, p.upper, z0)


def solve_lp(p: LpProblem, z0=None) -> QpSolution:
    """Solve an LP through the QP path with an ``LP_REG`` diagonal regularizer.

    The reported objective is ``c'z`` (regularizer removed).  A solution that
    runs off to a huge magnitude is confirmed unbounded by a recession-ray LP.
    """
    n = p.c.size
    sol = _solve(LP_REG * np.eye(n), p.c, p.rows, p.lower, p.upper, z0)
    if sol.status == OPTIMAL and np.abs(sol.z).max(initial=0.0) > 1e6 and _has_descent_ray(p):
        sol.status = UNBOUNDED
    sol.objective = float(p.c @ sol.z)
    return sol


def _has_descent_ray(p: LpProblem) -> bool:
    n = p.c.size
    rows = [ConstraintRow(r.coeffs, 0.0, r.tag) for r in p.rows]
    lo = np.where(np.isfinite(p.lower), 0.0, -1.0)
    up = np.where(np.isfinite(p.upper), 0.0, 1.0)
    ray = _solve(LP_REG * np.eye(n), p.c, rows, lo, up)
    return ray.status == OPTIMAL and float(p.c @ ray.z) < -1e-9


def check_kkt(p: QpProblem, sol: QpSolution):
    """Return (max row violation, stationarity residual, max complementarity)."""
    A, b, _ = stack_constraints(p.rows, p.lower, p.upper)
    lam = np.concatenate([sol.multipliers, _bound_stack(p, sol)])
    viol = float(np.max(A @ sol.z - b, initial=-np.inf))
    stat = float(np.abs(p.H @ sol.z + p.F + A.T @ lam).max(initial=0.0))
    comp = float(np.abs(lam * (A @ sol.z - b)).max(initial=0.0))
    return viol, stat, comp


def _bound_stack(p, sol):
    lo, up = sol.bound_multipliers
    out = []
    for j in range(p.n):
        if np.isfinite(p.lower[j]):
            out.append(lo[j])
        if np.isfinite(p.upper[j]):
            out.append(up[j])
    return np.array(out)
