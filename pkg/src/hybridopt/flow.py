"""Event-driven integration of mode-dependent contact dynamics.

Fixed-step RK4 inside a contact mode, bisection localization of constraint
activations (gap sign change), deactivations (multiplier sign change) and
named termination events, plastic impact resets at activations.  The flow
is deterministic: identical inputs produce bit-identical trajectories.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .contacts import (
    HybridState,
    Mode,
    ModelError,
    SystemDescriptor,
    _forces,
    consistent_mode,
    contact_forces,
    impact_map,
    kinetic_energy,
    validate_state,
)

logger = logging.getLogger(__name__)

Array = np.ndarray

ACTIVATION = "activation"
DEACTIVATION = "deactivation"
TERMINATION = "termination"
GRAZING = "grazing"
ZENO_GUARD = "zeno_guard"


class ZenoGuardError(RuntimeError):
    """More contact events than max_events within the horizon."""


@dataclass(frozen=True)
class FlowConfig:
    horizon_T: float
    step_h: float = 1e-3
    event_time_tol: float = 1e-10
    simultaneity_window: float = 1e-9
    max_events: int = 64

    def __post_init__(self):
        if min(self.horizon_T, self.step_h, self.event_time_tol, self.simultaneity_window) < 0:
            raise ValueError("flow configuration values must be positive")
        if self.max_events < 1:
            raise ValueError("max_events must be at least 1")
        if not (self.event_time_tol < self.simultaneity_window < self.step_h):
            raise ValueError("need event_time_tol < simultaneity_window < step_h")


@dataclass(frozen=True)
class Termination:
    """Named scalar event function with a crossing direction.

    Fires when ``fn`` crosses zero in the given direction (+1 upward, -1
    downward) while ``armed`` holds at the start of the step.
    """

    name: str
    fn: Callable[[HybridState], float]
    direction: int
    armed: Callable[[HybridState], bool] = lambda s: True


@dataclass
class Event:
    time: float
    kind: str
    index: Optional[int]
    name: Optional[str]
    pre_state: HybridState
    post_state: HybridState

    def to_dict(self) -> dict:
        out = {"time": self.time, "kind": self.kind}
        if self.index is not None:
            out["index"] = self.index
        if self.name is not None:
            out["name"] = self.name
        return out


@dataclass
class Trajectory:
    """Dense sample record with per-sample mode and reaction forces."""

    times: List[float] = field(default_factory=list)
    qs: List[Array] = field(default_factory=list)
    qds: List[Array] = field(default_factory=list)
    modes: List[Mode] = field(default_factory=list)
    lams: List[Array] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)
    terminated_by: Optional[str] = None

    def append(self, s: HybridState, lam_full: Array) -> None:
        if self.times and s.t <= self.times[-1]:
            # event localized at (numerically) the same instant: keep the newer state
            self.times[-1] = s.t
            self.qs[-1] = s.q.copy()
            self.qds[-1] = s.qd.copy()
            self.modes[-1] = s.mode
            self.lams[-1] = lam_full.copy()
            return
        self.times.append(s.t)
        self.qs.append(s.q.copy())
        self.qds.append(s.qd.copy())
        self.modes.append(s.mode)
        self.lams.append(lam_full.copy())

    @property
    def final_state(self) -> HybridState:
        return HybridState(self.qs[-1].copy(), self.qds[-1].copy(), self.modes[-1], self.times[-1])

    def mode_sequence(self) -> List[Mode]:
        seq: List[Mode] = []
        for m in self.modes:
            if not seq or seq[-1] != m:
                seq.append(m)
        return seq

    def mode_timeline(self) -> List[Tuple[float, float, Mode]]:
        segs: List[Tuple[float, float, Mode]] = []
        start = self.times[0]
        cur = self.modes[0]
        for t, m in zip(self.times[1:], self.modes[1:]):
            if m != cur:
                segs.append((start, t, cur))
                start, cur = t, m
        segs.append((start, self.times[-1], cur))
        return segs

    def to_csv(self) -> str:
        d = len(self.qs[0])
        n = len(self.lams[0])
        cols = (
            ["t"]
            + [f"q_{i+1}" for i in range(d)]
            + [f"qd_{i+1}" for i in range(d)]
            + ["mode"]
            + [f"lambda_{j+1}" for j in range(n)]
        )
        lines = [",".join(cols)]
        for t, q, qd, m, lam in zip(self.times, self.qs, self.qds, self.modes, self.lams):
            row = (
                [f"{t:.17g}"]
                + [f"{v:.17g}" for v in q]
                + [f"{v:.17g}" for v in qd]
                + [";".join(str(j) for j in m)]
                + [f"{v:.17g}" for v in lam]
            )
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def events_to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)

    def timeline_to_csv(self) -> str:
        lines = ["t_start,t_end,mode"]
        for t0, t1, m in self.mode_timeline():
            lines.append(f"{t0:.17g},{t1:.17g}," + ";".join(str(j) for j in m))
        return "\n".join(lines) + "\n"


def _project_active(sys: SystemDescriptor, q: Array, qd: Array, mode: Mode) -> Tuple[Array, Array]:
    """Re-project positions onto a_J = 0 and velocities onto Da_J qd = 0."""
    if not mode:
        return q, qd
    if sys.diagonal_mass and sys.unit_constraint_rows is not None:
        for j in mode:
            c = sys.unit_constraint_rows[j - 1]
            q[c] = 0.0
            qd[c] = 0.0
        return q, qd
    rows = [j - 1 for j in mode]
    for _ in range(3):
        a = np.asarray(sys.constraints(q), dtype=float)[rows]
        if float(np.max(np.abs(a))) < 1e-12:
            break
        A = np.asarray(sys.constraint_jacobian(q), dtype=float)[rows, :]
        q = q - A.T @ np.linalg.solve(A @ A.T, a)
    A = np.asarray(sys.constraint_jacobian(q), dtype=float)[rows, :]
    qd = qd - A.T @ np.linalg.solve(A @ A.T, A @ qd)
    return q, qd


def step_fixed_mode(
    sys: SystemDescriptor, s: HybridState, u: Array, h: float
) -> HybridState:
    """One classical RK4 step holding the contact mode fixed.

    Active constraint positions and velocities are re-projected after the
    step so that a_J(q) = 0 and Da_J qd = 0 hold to machine precision.
    """
    if h == 0.0:
        return s.copy()
    mode = s.mode

    q0, v0 = s.q, s.qd
    a1 = _forces(sys, q0, v0, mode, u)[0]
    q1 = q0 + 0.5 * h * v0
    v1 = v0 + 0.5 * h * a1
    a2 = _forces(sys, q1, v1, mode, u)[0]
    q2 = q0 + 0.5 * h * v1
    v2 = v0 + 0.5 * h * a2
    a3 = _forces(sys, q2, v2, mode, u)[0]
    q3 = q0 + h * v2
    v3 = v0 + h * a3
    a4 = _forces(sys, q3, v3, mode, u)[0]
    q = q0 + (h / 6.0) * (v0 + 2.0 * v1 + 2.0 * v2 + v3)
    qd = v0 + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise ModelError("non-finite state after integration step")
    q, qd = _project_active(sys, q, qd, mode)
    return HybridState(q, qd, mode, s.t + h)


@dataclass(frozen=True)
class _Candidate:
    kind: str
    index: Optional[int]
    name: Optional[str]
    g_prev: float
    g_next: float
    sign: int  # sign of g on the pre-crossing side


def detect_events(
    sys: SystemDescriptor,
    s_prev: HybridState,
    s_next: HybridState,
    u: Array,
    terminations: Sequence[Termination] = (),
    lam_prev: Optional[Array] = None,
    lam_next: Optional[Array] = None,
) -> List[_Candidate]:
    """Sign-change candidates over one step: activations, deactivations, terminations.

    Precomputed active-set multipliers at the endpoints may be passed to
    avoid redundant force solves.
    """
    if s_prev.mode != s_next.mode:
        raise ValueError("detect_events requires both states in the same mode")
    mode = s_prev.mode
    out: List[_Candidate] = []

    a_prev = np.asarray(sys.constraints(s_prev.q), dtype=float)
    a_next = np.asarray(sys.constraints(s_next.q), dtype=float)
    for j in range(1, sys.n + 1):
        if j not in mode and a_prev[j - 1] > 0.0 and a_next[j - 1] <= 0.0:
            out.append(_Candidate(ACTIVATION, j, None, a_prev[j - 1], a_next[j - 1], +1))

    if mode:
        if lam_prev is None:
            lam_prev = contact_forces(sys, s_prev, u)[1]
        if lam_next is None:
            lam_next = contact_forces(sys, s_next, u)[1]
        for i, j in enumerate(mode):
            if lam_prev[i] > 0.0 and lam_next[i] <= 0.0:
                out.append(_Candidate(DEACTIVATION, j, None, lam_prev[i], lam_next[i], +1))

    for term in terminations:
        if not term.armed(s_prev):
            continue
        gp, gn = term.fn(s_prev), term.fn(s_next)
        if term.direction > 0 and gp < 0.0 and gn >= 0.0:
            out.append(_Candidate(TERMINATION, None, term.name, gp, gn, -1))
        elif term.direction < 0 and gp > 0.0 and gn <= 0.0:
            out.append(_Candidate(TERMINATION, None, term.name, gp, gn, +1))
    return out


def _candidate_fn(
    sys: SystemDescriptor,
    cand: _Candidate,
    u: Array,
    terminations: Sequence[Termination],
) -> Callable[[HybridState], float]:
    if cand.kind == ACTIVATION:
        j = cand.index
        return lambda s: float(np.asarray(sys.constraints(s.q), dtype=float)[j - 1])
    if cand.kind == DEACTIVATION:
        j = cand.index

        def lam_j(s: HybridState) -> float:
            _, lam = contact_forces(sys, s, u)
            return float(lam[s.mode.index(j)])

        return lam_j
    term = next(t for t in terminations if t.name == cand.name)
    return term.fn


def localize_event(
    sys: SystemDescriptor,
    s_prev: HybridState,
    u: Array,
    h: float,
    cand: _Candidate,
    terminations: Sequence[Termination] = (),
    time_tol: float = 1e-10,
) -> Optional[float]:
    """Bisection for the crossing time offset in (0, h].

    The returned offset is the left edge of the final bracket, so the
    re-integrated state still lies on the pre-crossing side of the event
    surface (gaps nonnegative, multipliers nonnegative).  Returns None when
    the bracket is invalid (grazing); the caller flags it.
    """
    g = _candidate_fn(sys, cand, u, terminations)
    lo, g_lo = 0.0, cand.g_prev
    hi, g_hi = h, cand.g_next
    if g_lo * cand.sign <= 0.0 or g_hi * cand.sign > 0.0:
        return None
    while hi - lo > time_tol:
        mid = 0.5 * (lo + hi)
        gm = g(step_fixed_mode(sys, s_prev, u, mid))
        if gm * cand.sign > 0.0:
            lo, g_lo = mid, gm
        else:
            hi, g_hi = mid, gm
    return lo


def flow(
    sys: SystemDescriptor,
    x0: HybridState,
    policy: Callable[[Mode], Array],
    cfg: FlowConfig,
    terminations: Sequence[Termination] = (),
) -> Trajectory:
    """Integrate from x0, handling mode changes and terminations.

    Activations apply the plastic impact map with the union of newly active
    and still-active constraints; deactivations drop indices with no
    velocity jump.  Within one simultaneity window, activations are
    processed before deactivations and terminations.  Stops at horizon_T or
    at the first termination; raises ZenoGuardError beyond max_events.
    """
    if consistent_mode(sys, x0.q) != x0.mode:
        raise ModelError(
            f"initial mode {x0.mode} disagrees with gap signs "
            f"{consistent_mode(sys, x0.q)}"
        )
    validate_state(sys, x0)

    traj = Trajectory()
    state = x0.copy()
    u = policy(state.mode)
    lam_state = _forces(sys, state.q, state.qd, state.mode, u)[1] if state.mode else None
    traj.append(state, _pad_lam(sys, state.mode, lam_state))
    n_events = 0

    while state.t < cfg.horizon_T - 1e-15:
        h = min(cfg.step_h, cfg.horizon_T - state.t)
        u = policy(state.mode)
        trial = step_fixed_mode(sys, state, u, h)
        lam_trial = (
            _forces(sys, trial.q, trial.qd, trial.mode, u)[1] if trial.mode else None
        )
        cands = detect_events(
            sys, state, trial, u, terminations, lam_prev=lam_state, lam_next=lam_trial
        )
        if not cands:
            state = trial
            lam_state = lam_trial
            traj.append(state, _pad_lam(sys, state.mode, lam_state))
            continue

        locs: List[Tuple[float, _Candidate]] = []
        for cand in cands:
            tau = localize_event(sys, state, u, h, cand, terminations, cfg.event_time_tol)
            if tau is None:
                logger.warning(
                    "grazing: lost bracket for %s %s at t=%.9g", cand.kind, cand.index, state.t
                )
                grazed = state.copy()
                traj.events.append(
                    Event(state.t, GRAZING, cand.index, cand.name, grazed, grazed)
                )
                continue
            locs.append((tau, cand))
        if not locs:
            state = trial
            lam_state = lam_trial
            traj.append(state, _pad_lam(sys, state.mode, lam_state))
            continue

        tau_min = min(tau for tau, _ in locs)
        group = [c for tau, c in locs if tau - tau_min <= cfg.simultaneity_window]
        pre = step_fixed_mode(sys, state, u, tau_min)

        activations = sorted(
            (c.index for c in group if c.kind == ACTIVATION), key=int
        )
        deactivations = sorted(
            (c.index for c in group if c.kind == DEACTIVATION), key=int
        )
        termination = next((c for c in group if c.kind == TERMINATION), None)

        post = pre.copy()
        if activations:
            new_mode = tuple(sorted(set(pre.mode) | set(activations)))
            qd_plus = impact_map(sys, pre.q, pre.qd, new_mode)
            ke_pre = kinetic_energy(sys, pre.q, pre.qd)
            ke_post = kinetic_energy(sys, pre.q, qd_plus)
            if ke_post > ke_pre + 1e-12 * max(1.0, ke_pre):
                raise ModelError("plastic impact increased kinetic energy")
            post = HybridState(pre.q.copy(), qd_plus, new_mode, pre.t)
            q, qd = _project_active(sys, post.q, post.qd, new_mode)
            post = HybridState(q, qd, new_mode, pre.t)
            for j in activations:
                traj.events.append(Event(pre.t, ACTIVATION, j, None, pre.copy(), post.copy()))
            n_events += 1
        if deactivations:
            base = post
            new_mode = tuple(j for j in base.mode if j not in deactivations)
            post = HybridState(base.q.copy(), base.qd.copy(), new_mode, base.t)
            for j in deactivations:
                traj.events.append(Event(base.t, DEACTIVATION, j, None, base.copy(), post.copy()))
            n_events += 1

        # multipliers must stay nonnegative in the retained active set
        u_post = policy(post.mode)
        lam_post = _forces(sys, post.q, post.qd, post.mode, u_post)[1] if post.mode else None
        if post.mode:
            drop = tuple(j for i, j in enumerate(post.mode) if lam_post[i] < 0.0)
            if drop:
                base = post
                new_mode = tuple(j for j in base.mode if j not in drop)
                post = HybridState(base.q.copy(), base.qd.copy(), new_mode, base.t)
                for j in drop:
                    traj.events.append(
                        Event(base.t, DEACTIVATION, j, None, base.copy(), post.copy())
                    )
                n_events += 1
                u_post = policy(post.mode)
                lam_post = (
                    _forces(sys, post.q, post.qd, post.mode, u_post)[1] if post.mode else None
                )

        traj.append(post, _pad_lam(sys, post.mode, lam_post))

        if termination is not None:
            traj.events.append(
                Event(post.t, TERMINATION, None, termination.name, post.copy(), post.copy())
            )
            traj.terminated_by = termination.name
            return traj

        state = post
        lam_state = lam_post
        if n_events > cfg.max_events:
            raise ZenoGuardError(
                f"exceeded max_events={cfg.max_events}; possible Zeno behavior at t={state.t:.6g}"
            )

    return traj


def _pad_lam(sys: SystemDescriptor, mode: Mode, lam: Optional[Array]) -> Array:
    """Active-set reaction forces padded with zeros over all n constraints."""
    lam_full = np.zeros(sys.n)
    if mode and lam is not None:
        for i, j in enumerate(mode):
            lam_full[j - 1] = lam[i]
    return lam_full

