"""Mechanical systems subject to unilateral constraints.

A system is a bundle of callbacks (mass matrix, effort map, gap functions
and their Jacobian) plus dimensions.  States carry an explicit active set
(the contact mode).  This module computes mode-consistent accelerations
with reaction forces, plastic impact velocity resets, and mode membership
from gap signs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray
Mode = Tuple[int, ...]

TOL_A = 1e-8  # gap tolerance for mode membership, meters

_SYM_RTOL = 1e-12
_COND_LIMIT = 1e12


class ModelError(RuntimeError):
    """Model data violates a structural assumption (non-SPD mass, bad parameter)."""


class SingularConstraintError(RuntimeError):
    """Active constraint rows are rank deficient, or the Delassus matrix is singular."""


class PenetrationError(RuntimeError):
    """A gap function is negative beyond tolerance."""


def normalize_mode(indices: Iterable[int], n: int) -> Mode:
    """Sorted, duplicate-free tuple of 1-based constraint indices."""
    js = tuple(sorted({int(j) for j in indices}))
    if js and (js[0] < 1 or js[-1] > n):
        raise ModelError(f"constraint indices out of range 1..{n}: {js}")
    return js


@dataclass(frozen=True)
class SystemDescriptor:
    """Callbacks and dimensions defining the constrained mechanical system.

    ``effort(q, qd, mode, u)`` returns the generalized force for the given
    contact mode; ``constraints(q)`` the signed gaps (active at zero);
    ``constraint_jacobian(q)`` their Jacobian rows.  ``coriolis`` may be
    None for systems with configuration-independent mass matrices.
    ``constraint_jacobian_rate(q, qd)`` returns d/dt[Da(q)]·qd (the
    curvature vector of the acceleration-level constraint); when None a
    central finite difference of the Jacobian is used.

    ``diagonal_mass`` and ``unit_constraint_rows`` enable a direct solve
    when the mass matrix is diagonal and each constraint row is a unit
    coordinate vector (one coordinate index per constraint, 0-based).
    """

    d: int
    n: int
    mass_matrix: Callable[[Array], Array]
    effort: Callable[[Array, Array, Mode, Array], Array]
    constraints: Callable[[Array], Array]
    constraint_jacobian: Callable[[Array], Array]
    coriolis: Optional[Callable[[Array, Array], Array]] = None
    constraint_jacobian_rate: Optional[Callable[[Array, Array], Array]] = None
    restitution: str = "plastic"
    diagonal_mass: bool = False
    unit_constraint_rows: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.d < 1 or self.n < 0:
            raise ModelError(f"bad dimensions d={self.d}, n={self.n}")
        if self.restitution != "plastic":
            raise ModelError("only plastic restitution is supported")

    def curvature(self, q: Array, qd: Array, mode: Mode) -> Array:
        """Acceleration-level constraint curvature for the active rows."""
        if not mode:
            return np.zeros(0)
        if self.constraint_jacobian_rate is not None:
            full = np.asarray(self.constraint_jacobian_rate(q, qd), dtype=float)
            return full[[j - 1 for j in mode]]
        # fallback: d/dt[Da(q)]*qd by central difference along qd
        eps = 1e-6 * max(1.0, float(np.linalg.norm(q)))
        Dp = np.asarray(self.constraint_jacobian(q + eps * qd), dtype=float)
        Dm = np.asarray(self.constraint_jacobian(q - eps * qd), dtype=float)
        dDa = (Dp - Dm) / (2.0 * eps)
        return dDa[[j - 1 for j in mode]] @ qd


@dataclass
class HybridState:
    """Configuration, velocity, active contact mode, and time."""

    q: Array
    qd: Array
    mode: Mode
    t: float

    def copy(self) -> "HybridState":
        return HybridState(self.q.copy(), self.qd.copy(), self.mode, self.t)


def _check_mass(M: Array) -> Array:
    """Validate symmetry and positive definiteness; return Cholesky factor."""
    scale = float(np.max(np.abs(M)))
    if scale == 0.0 or not np.all(np.isfinite(M)):
        raise ModelError("mass matrix is zero or non-finite")
    if float(np.max(np.abs(M - M.T))) > _SYM_RTOL * scale:
        raise ModelError("mass matrix is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ModelError("mass matrix is not positive definite") from exc


def _active_rows(sys: SystemDescriptor, q: Array, mode: Mode) -> Array:
    Da = np.asarray(sys.constraint_jacobian(q), dtype=float)
    return Da[[j - 1 for j in mode], :]


_EMPTY = np.zeros(0)


def _forces(
    sys: SystemDescriptor, q: Array, qd: Array, mode: Mode, u: Array
) -> Tuple[Array, Array]:
    """Acceleration and active-set multipliers; raw-array hot path."""
    if sys.diagonal_mass and sys.unit_constraint_rows is not None:
        f = sys.effort(q, qd, mode, u)
        diag = sys.mass_matrix(q).diagonal()
        if min(diag) <= 0.0:
            raise ModelError("mass matrix is not positive definite")
        qdd = f / diag
        if not mode:
            return qdd, _EMPTY
        curv = sys.curvature(q, qd, mode)
        lam = np.empty(len(mode))
        rows = sys.unit_constraint_rows
        for i, j in enumerate(mode):
            c = rows[j - 1]
            qdd[c] = -curv[i]
            lam[i] = diag[c] * qdd[c] - f[c]
        return qdd, lam

    f = np.asarray(sys.effort(q, qd, mode, u), dtype=float)
    if sys.coriolis is not None:
        f = f + np.asarray(sys.coriolis(q, qd), dtype=float) @ qd
    if not np.all(np.isfinite(f)):
        raise ModelError("non-finite effort")
    M = np.asarray(sys.mass_matrix(q), dtype=float)
    _check_mass(M)
    if not mode:
        return np.linalg.solve(M, f), np.zeros(0)

    A = _active_rows(sys, q, mode)
    if np.linalg.matrix_rank(A) < len(mode):
        raise SingularConstraintError(f"rank-deficient constraint rows for mode {mode}")
    curv = sys.curvature(q, qd, mode)
    m = len(mode)
    K = np.zeros((sys.d + m, sys.d + m))
    K[: sys.d, : sys.d] = M
    K[: sys.d, sys.d:] = A.T
    K[sys.d:, : sys.d] = A
    rhs = np.concatenate([f, -curv])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularConstraintError("singular contact KKT system") from exc
    qdd = sol[: sys.d]
    lam = -sol[sys.d:]  # K uses +Da^T block, so the multiplier sign flips
    return qdd, lam


def contact_forces(sys: SystemDescriptor, s: HybridState, u: Array) -> Tuple[Array, Array]:
    """Mode-consistent acceleration and reaction forces.

    Solves M(q) qdd = f + c(q,qd) qd + Da_J^T lam together with the
    acceleration-level constraint Da_J qdd + curvature = 0 as one dense
    symmetric block system.  Returns (qdd, lam) with lam ordered like the
    sorted mode.
    """
    return _forces(sys, s.q, s.qd, s.mode, u)


def impact_map(sys: SystemDescriptor, q: Array, qd_minus: Array, mode_new: Mode) -> Array:
    """Plastic impact: remove the normal velocity of every active constraint.

    qd+ = qd- - Minv Da^T (Da Minv Da^T)^-1 Da qd-, the kinetic-metric
    projection onto {Da qd = 0}.  Kinetic energy cannot increase.
    """
    if not mode_new:
        return qd_minus.copy()

    if sys.diagonal_mass and sys.unit_constraint_rows is not None:
        qd_plus = qd_minus.copy()
        for j in mode_new:
            qd_plus[sys.unit_constraint_rows[j - 1]] = 0.0
        return qd_plus

    M = np.asarray(sys.mass_matrix(q), dtype=float)
    _check_mass(M)
    A = _active_rows(sys, q, mode_new)
    Minv_AT = np.linalg.solve(M, A.T)
    G = A @ Minv_AT  # Delassus matrix
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > _COND_LIMIT:
        raise SingularConstraintError("singular Delassus matrix")
    impulse = np.linalg.solve(G, A @ qd_minus)
    return qd_minus - Minv_AT @ impulse


def consistent_mode(sys: SystemDescriptor, q: Array, tol_a: float = TOL_A) -> Mode:
    """Active set {j : a_j(q) <= tol_a}; penetration beyond tol_a is an error."""
    a = np.asarray(sys.constraints(q), dtype=float)
    if np.any(a < -tol_a):
        bad = [int(j) + 1 for j in np.where(a < -tol_a)[0]]
        raise PenetrationError(f"constraints {bad} penetrated: a={a.tolist()}")
    return tuple(int(j) + 1 for j in np.where(a <= tol_a)[0])


def validate_state(sys: SystemDescriptor, s: HybridState, tol_a: float = TOL_A) -> None:
    """Check the state invariants: active gaps at zero, inactive gaps nonnegative."""
    a = np.asarray(sys.constraints(s.q), dtype=float)
    for j in range(1, sys.n + 1):
        if j in s.mode:
            if abs(a[j - 1]) > tol_a:
                raise PenetrationError(
                    f"active constraint {j} has gap {a[j - 1]:.3e} beyond {tol_a:.1e}"
                )
        elif a[j - 1] < -tol_a:
            raise PenetrationError(
                f"inactive constraint {j} penetrated: gap {a[j - 1]:.3e}"
            )


def kinetic_energy(sys: SystemDescriptor, q: Array, qd: Array) -> float:
    M = np.asarray(sys.mass_matrix(q), dtype=float)
    return 0.5 * float(qd @ M @ qd)


def check_constraint_jacobian(
    sys: SystemDescriptor, qs: Sequence[Array], rtol: float = 1e-6
) -> float:
    """Compare constraint_jacobian against a central difference of constraints.

    Returns the worst relative deviation over the test points; raises
    ModelError if it exceeds rtol.
    """
    worst = 0.0
    for q in qs:
        q = np.asarray(q, dtype=float)
        Da = np.asarray(sys.constraint_jacobian(q), dtype=float)
        num = np.zeros_like(Da)
        for i in range(sys.d):
            h = 1e-6 * max(1.0, abs(float(q[i])))
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            num[:, i] = (
                np.asarray(sys.constraints(qp), dtype=float)
                - np.asarray(sys.constraints(qm), dtype=float)
            ) / (2 * h)
        scale = max(1.0, float(np.max(np.abs(Da))))
        dev = float(np.max(np.abs(Da - num))) / scale
        worst = max(worst, dev)
    if worst > rtol:
        raise ModelError(f"constraint Jacobian deviates from finite difference by {worst:.3e}")
    return worst
