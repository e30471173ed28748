"""Per-initial-condition input optimization and value/policy curves.

The scalar solves use a coarse grid scan (the trajectory cost can be
multimodal across contact-sequence boundaries) followed by bounded Brent
refinement.  The touchdown problem optimizes (u1, u2) by coordinate
descent; the liftoff problem is a single scalar solve over the body
torque with the leg forces held at their configured values.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .biped import (
    DEFAULT_FLOW,
    LIFTOFF,
    TOUCHDOWN,
    BipedParams,
    CostParams,
    HorizonError,
    InfeasibleStartError,
    Outcome,
    PolicyInputs,
    liftoff_cost,
    run_maneuver,
    touchdown_cost,
)
from .flow import FlowConfig, ZenoGuardError

Array = np.ndarray


class NonFiniteCostError(RuntimeError):
    """The objective returned NaN or infinity."""


@dataclass(frozen=True)
class OptimizationConfig:
    u1_bounds: Tuple[float, float] = (-20.0, 20.0)
    u2_bounds: Tuple[float, float] = (-20.0, 20.0)
    u12_bounds: Tuple[float, float] = (-0.002, 0.002)
    tol: float = 1e-8
    max_evals: int = 200
    rounds: int = 4
    warm_start: bool = True
    scan_points: int = 33

    def __post_init__(self):
        for lo, hi in (self.u1_bounds, self.u2_bounds, self.u12_bounds):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError("input bounds must be finite with lo < hi")
        if self.tol <= 0 or self.max_evals < 10 or self.rounds < 1 or self.scan_points < 5:
            raise ValueError("bad optimization configuration")

    def bounds_for(self, channel: str) -> Tuple[float, float]:
        return {"u1": self.u1_bounds, "u2": self.u2_bounds, "u12": self.u12_bounds}[channel]


def brent_min(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-8,
    scan_points: int = 33,
    extra_candidates: Sequence[float] = (),
    max_evals: int = 200,
) -> Tuple[float, float]:
    """Global-ish scalar minimization on [lo, hi].

    A uniform scan picks the starting neighborhood, bounded Brent refines
    it, and the best evaluation ever seen is returned, so the result
    dominates every probed point.
    """
    best = [math.inf, lo]
    evals = [0]

    def wrapped(x: float) -> float:
        x = float(min(max(x, lo), hi))
        v = float(f(x))
        if not math.isfinite(v):
            raise NonFiniteCostError(f"objective returned {v} at {x}")
        evals[0] += 1
        if v < best[0]:
            best[0], best[1] = v, x
        return v

    xs = list(np.linspace(lo, hi, scan_points))
    for c in extra_candidates:
        if math.isfinite(c):
            xs.append(float(min(max(c, lo), hi)))
    scan = [(wrapped(x), x) for x in xs]
    scan.sort()
    _, x0 = scan[0]

    pitch = (hi - lo) / (scan_points - 1)
    blo = max(lo, x0 - pitch)
    bhi = min(hi, x0 + pitch)
    budget = max(10, max_evals - evals[0])
    minimize_scalar(
        wrapped,
        bounds=(blo, bhi),
        method="bounded",
        options={"xatol": tol, "maxiter": budget},
    )
    return best[1], best[0]


@dataclass
class SolveResult:
    inputs: PolicyInputs
    value: float
    converged: bool
    outcome: Optional[Outcome] = None


def _touchdown_objective(theta0, p, cp, flow_cfg, u_max):
    def f(u1: float, u2: float) -> float:
        u = PolicyInputs(u1, u2, 0.0)
        o = run_maneuver(TOUCHDOWN, theta0, u, p, flow_cfg, u_max)
        return touchdown_cost(o, u, cp)

    return f


def optimize_touchdown(
    theta0: float,
    p: BipedParams,
    cp: CostParams,
    cfg: OptimizationConfig,
    flow_cfg: FlowConfig = DEFAULT_FLOW,
    warm: Optional[PolicyInputs] = None,
) -> SolveResult:
    """Coordinate descent over (u1, u2), each coordinate solved by brent_min."""
    u_max = max(abs(b) for bb in (cfg.u1_bounds, cfg.u2_bounds) for b in bb)
    f2 = _touchdown_objective(theta0, p, cp, flow_cfg, u_max)
    u = [warm.u1, warm.u2] if warm is not None else [0.0, 0.0]
    u = [
        float(min(max(u[0], cfg.u1_bounds[0]), cfg.u1_bounds[1])),
        float(min(max(u[1], cfg.u2_bounds[0]), cfg.u2_bounds[1])),
    ]
    value = f2(u[0], u[1])
    converged = False
    for rnd in range(cfg.rounds):
        value_before = value
        for ci, bounds in ((0, cfg.u1_bounds), (1, cfg.u2_bounds)):
            other = u[1 - ci]
            if ci == 0:
                g = lambda x: f2(x, other)
            else:
                g = lambda x: f2(other, x)
            if rnd == 0:
                # global scan once per coordinate; the cost can be multimodal
                xs, vs = brent_min(
                    g, bounds[0], bounds[1], cfg.tol, cfg.scan_points,
                    extra_candidates=(u[ci],), max_evals=cfg.max_evals,
                )
            else:
                # later rounds refine inside the basin found by the scan
                pitch = (bounds[1] - bounds[0]) / (cfg.scan_points - 1)
                xs, vs = brent_min(
                    g,
                    max(bounds[0], u[ci] - pitch),
                    min(bounds[1], u[ci] + pitch),
                    cfg.tol,
                    scan_points=5,
                    extra_candidates=(u[ci],),
                    max_evals=cfg.max_evals,
                )
            if vs < value:
                u[ci], value = xs, vs
        if value_before - value < 1e-12:
            converged = True
            break
    else:
        converged = value_before - value <= 1e-10
    inputs = PolicyInputs(u[0], u[1], 0.0)
    o = run_maneuver(TOUCHDOWN, theta0, inputs, p, flow_cfg, u_max)
    return SolveResult(inputs, touchdown_cost(o, inputs, cp), converged, o)


def optimize_liftoff(
    theta0: float,
    p: BipedParams,
    cp: CostParams,
    cfg: OptimizationConfig,
    flow_cfg: FlowConfig = DEFAULT_FLOW,
    fixed_legs: Tuple[float, float] = (16.0, 2.0),
    warm: Optional[PolicyInputs] = None,
) -> SolveResult:
    """Scalar solve over the double-support torque with fixed leg forces."""
    u1, u2 = fixed_legs
    u_max = max(
        abs(b) for bb in (cfg.u12_bounds,) for b in bb
    )
    u_max = max(u_max, abs(u1), abs(u2))

    def g(u12: float) -> float:
        u = PolicyInputs(u1, u2, u12)
        o = run_maneuver(LIFTOFF, theta0, u, p, flow_cfg, u_max)
        return liftoff_cost(o, u, cp)

    extras = (warm.u12,) if warm is not None else ()
    xs, vs = brent_min(
        g, cfg.u12_bounds[0], cfg.u12_bounds[1], cfg.tol, cfg.scan_points,
        extra_candidates=extras, max_evals=cfg.max_evals,
    )
    inputs = PolicyInputs(u1, u2, xs)
    o = run_maneuver(LIFTOFF, theta0, inputs, p, flow_cfg, u_max)
    return SolveResult(inputs, liftoff_cost(o, inputs, cp), True, o)


@dataclass
class CurveRow:
    theta0: float
    u1: float = math.nan
    u2: float = math.nan
    u12: float = math.nan
    value: float = math.nan
    theta_terminal: float = math.nan
    t_terminal: float = math.nan
    mode_sequence: str = ""
    status: str = "ok"


@dataclass
class ValuePolicyCurve:
    kind: str
    rows: List[CurveRow]
    meta: dict = field(default_factory=dict)

    @property
    def theta0(self) -> Array:
        return np.array([r.theta0 for r in self.rows])

    def column(self, name: str) -> Array:
        return np.array([getattr(r, name) for r in self.rows])

    def ok_mask(self) -> Array:
        return np.array([r.status == "ok" for r in self.rows])

    def to_csv(self) -> str:
        cols = [
            "theta0", "u1", "u2", "u12", "value",
            "theta_terminal", "t_terminal", "mode_sequence", "status",
        ]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        f"{r.theta0:.17g}", f"{r.u1:.17g}", f"{r.u2:.17g}",
                        f"{r.u12:.17g}", f"{r.value:.17g}",
                        f"{r.theta_terminal:.17g}", f"{r.t_terminal:.17g}",
                        r.mode_sequence, r.status,
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def format_mode_sequence(seq) -> str:
    return "|".join(";".join(str(j) for j in mode) for mode in seq)


_ROW_ERRORS = (HorizonError, InfeasibleStartError, ZenoGuardError, NonFiniteCostError)


def _solve_row(args) -> CurveRow:
    kind, theta0, p, cp, cfg, flow_cfg, fixed_legs, warm = args
    try:
        if kind == TOUCHDOWN:
            res = optimize_touchdown(theta0, p, cp, cfg, flow_cfg, warm)
        else:
            res = optimize_liftoff(theta0, p, cp, cfg, flow_cfg, fixed_legs, warm)
    except _ROW_ERRORS as exc:
        return CurveRow(theta0=theta0, status=type(exc).__name__)
    o = res.outcome
    return CurveRow(
        theta0=theta0,
        u1=res.inputs.u1,
        u2=res.inputs.u2,
        u12=res.inputs.u12,
        value=res.value,
        theta_terminal=o.theta_terminal,
        t_terminal=o.t_terminal,
        mode_sequence=format_mode_sequence(o.mode_sequence),
        status="ok" if res.converged else "nonconverged",
    )


def sweep(
    kind: str,
    grid: Sequence[float],
    p: BipedParams,
    cp: CostParams,
    cfg: OptimizationConfig,
    flow_cfg: FlowConfig = DEFAULT_FLOW,
    fixed_legs: Tuple[float, float] = (16.0, 2.0),
    jobs: int = 1,
) -> ValuePolicyCurve:
    """Optimize per grid point; rows are emitted in grid order.

    Serial execution chains warm starts along the grid (warm candidates
    only seed the scan, so results stay within solver tolerance of cold
    starts).  Parallel execution is cold-start by construction.
    """
    grid = [float(t) for t in grid]
    if sorted(grid) != grid:
        raise ValueError("theta0 grid must be sorted")
    rows: List[CurveRow] = []
    if jobs > 1:
        args = [(kind, t, p, cp, cfg, flow_cfg, fixed_legs, None) for t in grid]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_solve_row, args, chunksize=4))
    else:
        warm = None
        for t in grid:
            row = _solve_row((kind, t, p, cp, cfg, flow_cfg, fixed_legs,
                              warm if cfg.warm_start else None))
            rows.append(row)
            if row.status in ("ok", "nonconverged"):
                warm = PolicyInputs(row.u1, row.u2, row.u12)
    return ValuePolicyCurve(kind=kind, rows=rows, meta={"grid": [grid[0], grid[-1], len(grid)]})


def _fixed_row(args) -> CurveRow:
    kind, theta0, u, p, cp, flow_cfg, u_max = args
    try:
        o = run_maneuver(kind, theta0, u, p, flow_cfg, u_max)
    except _ROW_ERRORS as exc:
        return CurveRow(theta0=theta0, u1=u.u1, u2=u.u2, u12=u.u12,
                        status=type(exc).__name__)
    cost = touchdown_cost(o, u, cp) if kind == TOUCHDOWN else liftoff_cost(o, u, cp)
    return CurveRow(
        theta0=theta0, u1=u.u1, u2=u.u2, u12=u.u12, value=cost,
        theta_terminal=o.theta_terminal, t_terminal=o.t_terminal,
        mode_sequence=format_mode_sequence(o.mode_sequence), status="ok",
    )


def fixed_policy_sweep(
    kind: str,
    u: PolicyInputs,
    grid: Sequence[float],
    p: BipedParams,
    cp: CostParams,
    flow_cfg: FlowConfig = DEFAULT_FLOW,
    u_max: float = 20.0,
    jobs: int = 1,
) -> ValuePolicyCurve:
    """Run the maneuver with constant inputs over the grid; no optimization."""
    grid = [float(t) for t in grid]
    if sorted(grid) != grid:
        raise ValueError("theta0 grid must be sorted")
    args = [(kind, t, u, p, cp, flow_cfg, u_max) for t in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_fixed_row, args, chunksize=8))
    else:
        rows = [_fixed_row(a) for a in args]
    return ValuePolicyCurve(kind=kind, rows=rows, meta={
        "grid": [grid[0], grid[-1], len(grid)],
        "fixed_policy": [u.u1, u.u2, u.u12],
    })


def theta_grid(lo: float, hi: float, count: int) -> List[float]:
    if count < 1 or hi <= lo:
        raise ValueError("grid needs hi > lo and count >= 1")
    return [float(x) for x in np.linspace(lo, hi, count)]
