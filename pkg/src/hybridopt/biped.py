"""Sagittal-plane biped: body + two spring-damper legs with point feet.

Coordinates q = (z, theta, z_f1, z_f2): body height, body pitch, and the
two foot heights.  The feet are massed points coupled to the body only
through the leg spring/dampers (force coupling), so a single foot
touchdown changes forces, not velocities, elsewhere.  Ground contact is a
unilateral constraint on each foot height.

Two maneuvers:

* touchdown - drop from a small clearance, terminate at the body-height
  nadir (first upward zero crossing of zdot after contact);
* liftoff - start crouched in double support, terminate at the aerial
  apex (first downward zero crossing of zdot once both feet are off).

Leg force inputs u1/u2 act only in the corresponding single-support mode;
the body torque u12 acts only in double support.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict, replace
from typing import List, Optional, Tuple

import numpy as np

from .contacts import HybridState, Mode, ModelError, SystemDescriptor, contact_forces
from .flow import FlowConfig, Termination, Trajectory, flow

Array = np.ndarray

TOUCHDOWN = "touchdown"
LIFTOFF = "liftoff"


class InfeasibleStartError(RuntimeError):
    """Initial contact forces are not all positive."""


class HorizonError(RuntimeError):
    """The maneuver's termination event never fired within the horizon."""


@dataclass(frozen=True)
class BipedParams:
    m: float = 1.0          # body mass, kg
    I: float = 0.1          # body pitch inertia, kg m^2
    m_f: float = 0.1        # foot mass, kg
    w: float = 0.2          # hip half-width, m
    k: float = 200.0        # leg spring stiffness, N/m
    b: float = 2.0          # leg damping, N s/m
    rho0: float = 1.0       # leg rest length, m
    g: float = 9.81         # gravity, m/s^2
    drop_gap: float = 0.05  # initial clearance of the lower foot (touchdown), m
    crouch_depth: float = 0.1  # extra spring compression below static preload (liftoff), m

    def __post_init__(self):
        for name in ("m", "I", "m_f", "w", "k", "b", "rho0", "g", "drop_gap"):
            if getattr(self, name) <= 0.0:
                raise ModelError(f"biped parameter {name} must be positive")
        if self.crouch_depth < 0.0:
            raise ModelError("crouch_depth must be nonnegative")
        if self.m_f > self.m / 5.0:
            warnings.warn("foot mass m_f exceeds m/5; the feet are meant to be light")


@dataclass(frozen=True)
class PolicyInputs:
    """Constant inputs, gated by contact mode inside the effort map."""

    u1: float = 0.0   # left-leg force, mode {1} only, N
    u2: float = 0.0   # right-leg force, mode {2} only, N
    u12: float = 0.0  # body torque, mode {1,2} only, N m

    def as_array(self) -> Array:
        return np.array([self.u1, self.u2, self.u12])

    def check_bounds(self, u_max: float) -> None:
        for name, v in (("u1", self.u1), ("u2", self.u2), ("u12", self.u12)):
            if not math.isfinite(v):
                raise ModelError(f"input {name} is not finite")
            if abs(v) > u_max:
                raise ModelError(f"input {name}={v} exceeds bound {u_max}")


@dataclass(frozen=True)
class CostParams:
    theta_desired: float = 0.05
    a1: float = 1e-3
    a2: float = 2e-3
    a12: float = 100.0

    def __post_init__(self):
        if min(self.a1, self.a2, self.a12) <= 0.0:
            raise ModelError("input penalty weights must be positive")


@dataclass
class Outcome:
    theta_terminal: float
    t_terminal: float
    mode_sequence: List[Mode]
    trajectory: Trajectory


def biped_system(p: BipedParams) -> SystemDescriptor:
    """Build the 4-DOF descriptor.  Constant diagonal mass, constant Da."""
    M = np.diag([p.m, p.I, p.m_f, p.m_f])
    Da = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    m, I, m_f, w, k, b, rho0, g = p.m, p.I, p.m_f, p.w, p.k, p.b, p.rho0, p.g
    mg, mfg = m * g, m_f * g

    def mass_matrix(q: Array) -> Array:
        return M

    def constraints(q: Array) -> Array:
        return np.array([q[2], q[3]])

    def constraint_jacobian(q: Array) -> Array:
        return Da

    def constraint_jacobian_rate(q: Array, qd: Array) -> Array:
        return np.zeros(2)

    def effort(q: Array, qd: Array, mode: Mode, u: Array) -> Array:
        z, th, zf1, zf2 = q
        zd, thd, zf1d, zf2d = qd
        s, c = math.sin(th), math.cos(th)
        rho1 = z - w * s - zf1
        rho2 = z + w * s - zf2
        rho1d = zd - w * c * thd - zf1d
        rho2d = zd + w * c * thd - zf2d
        F1 = k * (rho0 - rho1) - b * rho1d
        F2 = k * (rho0 - rho2) - b * rho2d
        if mode == (1,):
            F1 += u[0]
        elif mode == (2,):
            F2 += u[1]
        tau = u[2] if mode == (1, 2) else 0.0
        return np.array(
            [
                -mg + F1 + F2,
                -w * c * F1 + w * c * F2 + tau,
                -mfg - F1,
                -mfg - F2,
            ]
        )

    return SystemDescriptor(
        d=4,
        n=2,
        mass_matrix=mass_matrix,
        effort=effort,
        constraints=constraints,
        constraint_jacobian=constraint_jacobian,
        coriolis=None,
        constraint_jacobian_rate=constraint_jacobian_rate,
        diagonal_mass=True,
        unit_constraint_rows=(2, 3),
    )


def leg_lengths(p: BipedParams, q: Array) -> Tuple[float, float]:
    z, th, zf1, zf2 = q
    s = math.sin(th)
    return z - p.w * s - zf1, z + p.w * s - zf2


def initial_state(kind: str, theta0: float, p: BipedParams) -> HybridState:
    """Maneuver start.

    Touchdown: aerial, legs at rest length, lower foot at drop_gap, at rest.
    Liftoff: double support with feet on the ground, the body crouched
    crouch_depth below the static preload height, at rest.  Raises
    InfeasibleStartError when the initial contact forces are not positive.
    """
    if abs(theta0) > 0.5:
        raise ModelError(f"|theta0| <= 0.5 rad required, got {theta0}")
    s = math.sin(theta0)
    if kind == TOUCHDOWN:
        z = p.drop_gap + p.rho0 + p.w * abs(s)
        q = np.array([z, theta0, z - p.w * s - p.rho0, z + p.w * s - p.rho0])
        return HybridState(q, np.zeros(4), (), 0.0)
    if kind == LIFTOFF:
        z = p.rho0 - p.m * p.g / (2.0 * p.k) - p.crouch_depth
        q = np.array([z, theta0, 0.0, 0.0])
        state = HybridState(q, np.zeros(4), (1, 2), 0.0)
        _, lam = contact_forces(biped_system(p), state, np.zeros(3))
        if not np.all(lam > 0.0):
            raise InfeasibleStartError(
                f"initial contact forces not positive at theta0={theta0}: {lam.tolist()}"
            )
        return state
    raise ValueError(f"unknown maneuver kind {kind!r}")


def _terminations(kind: str) -> Tuple[Termination, ...]:
    if kind == TOUCHDOWN:
        return (
            Termination(
                name="nadir",
                fn=lambda s: float(s.qd[0]),
                direction=+1,
                armed=lambda s: len(s.mode) > 0,
            ),
        )
    return (
        Termination(
            name="apex",
            fn=lambda s: float(s.qd[0]),
            direction=-1,
            armed=lambda s: len(s.mode) == 0,
        ),
    )


DEFAULT_FLOW = FlowConfig(horizon_T=2.0)


def run_maneuver(
    kind: str,
    theta0: float,
    u: PolicyInputs,
    p: BipedParams,
    cfg: FlowConfig = DEFAULT_FLOW,
    u_max: float = 20.0,
) -> Outcome:
    """Simulate one maneuver and return its terminal pitch outcome."""
    u.check_bounds(u_max)
    sys = biped_system(p)
    x0 = initial_state(kind, theta0, p)
    u_vec = u.as_array()
    traj = flow(sys, x0, lambda mode: u_vec, cfg, _terminations(kind))
    if traj.terminated_by is None:
        raise HorizonError(
            f"{kind} maneuver did not terminate within horizon_T={cfg.horizon_T}"
        )
    final = traj.final_state
    return Outcome(
        theta_terminal=float(final.q[1]),
        t_terminal=float(final.t),
        mode_sequence=traj.mode_sequence(),
        trajectory=traj,
    )


def touchdown_cost(o: Outcome, u: PolicyInputs, cp: CostParams) -> float:
    err = o.theta_terminal - cp.theta_desired
    return err * err + cp.a1 * u.u1 * u.u1 + cp.a2 * u.u2 * u.u2


def liftoff_cost(o: Outcome, u: PolicyInputs, cp: CostParams) -> float:
    err = o.theta_terminal - cp.theta_desired
    return err * err + cp.a12 * u.u12 * u.u12


def params_from_dict(overrides: dict) -> BipedParams:
    """BipedParams with overrides from a config mapping; unknown keys rejected."""
    allowed = set(BipedParams.__dataclass_fields__)
    unknown = set(overrides) - allowed
    if unknown:
        raise KeyError(f"unknown biped parameter keys: {sorted(unknown)}")
    return BipedParams(**overrides)


def cost_from_dict(overrides: dict) -> CostParams:
    allowed = set(CostParams.__dataclass_fields__)
    unknown = set(overrides) - allowed
    if unknown:
        raise KeyError(f"unknown cost parameter keys: {sorted(unknown)}")
    return CostParams(**overrides)
