"""One-sided derivative estimation, optimality checks, curve classification,
and the policy-gradient divergence experiment.

All derivatives are finite-difference based.  One-sided estimates use a
halving step ladder with Richardson extrapolation so that truncation
error is separated from the genuinely one-sided structure of the
function.  Curve classification demands persistence of the evidence under
4x grid refinement to avoid mislabeling steep-but-smooth transitions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray


class NonFiniteCostError(RuntimeError):
    pass


class SingularHessianError(RuntimeError):
    pass


class GridMismatchError(RuntimeError):
    pass


@dataclass
class BDerivEstimate:
    """One-sided directional derivative with its extrapolation residual."""

    x: float
    direction: int
    value: float
    ladder: Tuple[float, ...]
    residual: float


def one_sided_derivative(
    f: Callable[[float], float],
    x: float,
    direction: int,
    h0: Optional[float] = None,
) -> BDerivEstimate:
    """Estimate lim_{t->0+} (f(x + t*direction) - f(x)) / t.

    Divided differences at steps h0, h0/2, h0/4, h0/8 are Richardson
    extrapolated from first to second order; the residual is the change
    between the two finest extrapolations.
    """
    if direction not in (-1, 1):
        raise ValueError("direction must be +1 or -1")
    if h0 is None:
        h0 = 1e-4 * max(1.0, abs(x))
    f0 = float(f(x))
    steps = [h0, h0 / 2, h0 / 4, h0 / 8]
    diffs = []
    for h in steps:
        fh = float(f(x + direction * h))
        if not (math.isfinite(fh) and math.isfinite(f0)):
            raise NonFiniteCostError(f"objective not finite near {x}")
        diffs.append((fh - f0) / h)
    extraps = [2.0 * diffs[i + 1] - diffs[i] for i in range(3)]
    value = extraps[-1]
    residual = abs(extraps[-1] - extraps[-2])
    return BDerivEstimate(x, direction, value, tuple(steps), residual)


@dataclass
class FirstOrderCheck:
    passed: bool
    derivatives: Dict[Tuple[int, ...], float]
    worst_direction: Optional[Tuple[int, ...]]
    worst_value: float


def _section(c_u: Callable[..., float], u_star: Sequence[float], v: Sequence[float]):
    u0 = np.asarray(u_star, dtype=float)
    vv = np.asarray(v, dtype=float)

    def g(t: float) -> float:
        return float(c_u(*(u0 + t * vv)))

    return g


def coordinate_directions(k: int) -> List[Tuple[int, ...]]:
    dirs = []
    for i in range(k):
        e = [0] * k
        e[i] = 1
        dirs.append(tuple(e))
        e2 = [0] * k
        e2[i] = -1
        dirs.append(tuple(e2))
    return dirs


def check_first_order(
    c_u: Callable[..., float],
    u_star: Sequence[float],
    directions: Optional[Sequence[Tuple[int, ...]]] = None,
    tol: float = 1e-4,
    h0: Optional[float] = None,
) -> FirstOrderCheck:
    """Directional stationarity at a (possibly kinked) minimizer.

    Passes iff the one-sided derivative along every direction is >= -tol.
    The caller is responsible for only submitting interior points.
    """
    k = len(u_star)
    if directions is None:
        directions = coordinate_directions(k)
    scale = max(1.0, abs(float(c_u(*u_star))))
    derivs: Dict[Tuple[int, ...], float] = {}
    worst_dir, worst = None, math.inf
    for v in directions:
        g = _section(c_u, u_star, v)
        est = one_sided_derivative(g, 0.0, +1, h0=h0)
        derivs[tuple(v)] = est.value
        if est.value < worst:
            worst, worst_dir = est.value, tuple(v)
    return FirstOrderCheck(worst >= -tol * scale, derivs, worst_dir, worst)


@dataclass
class SecondOrderCheck:
    passed: bool
    second_derivatives: Dict[Tuple[int, ...], float]
    invertible: bool


def check_second_order(
    c_u: Callable[..., float],
    u_star: Sequence[float],
    directions: Optional[Sequence[Tuple[int, ...]]] = None,
    tol: float = 1e-6,
    first_order_tol: float = 1e-4,
    h0: Optional[float] = None,
) -> SecondOrderCheck:
    """One-sided second differences on the critical directions.

    Critical directions are those whose one-sided first derivative
    vanishes within first_order_tol; the check passes iff the second
    difference exceeds tol on all of them.  Invertibility (scalar and 2-D
    coordinate sense) additionally requires every direction's one-sided
    second derivative to be nonzero.
    """
    k = len(u_star)
    if directions is None:
        directions = coordinate_directions(k)
    if h0 is None:
        h0 = 1e-4 * max(1.0, float(np.max(np.abs(u_star))) if len(u_star) else 1.0)
    scale = max(1.0, abs(float(c_u(*u_star))))
    second: Dict[Tuple[int, ...], float] = {}
    passed = True
    invertible = True
    for v in directions:
        g = _section(c_u, u_star, v)
        d1 = one_sided_derivative(g, 0.0, +1, h0=h0).value
        # one-sided second divided difference, Richardson to higher order
        g0 = g(0.0)
        d2s = []
        for h in (h0, h0 / 2):
            d2s.append((g(2 * h) - 2 * g(h) + g0) / (h * h))
        d2 = 2.0 * d2s[1] - d2s[0]
        second[tuple(v)] = d2
        if abs(d2) <= tol * scale:
            invertible = False
        if abs(d1) <= first_order_tol * scale and d2 <= tol * scale:
            passed = False
    return SecondOrderCheck(passed, second, invertible)


def smooth_sensitivities(
    c: Callable[[float, Sequence[float]], float],
    x: float,
    u_star: Sequence[float],
    h: Optional[float] = None,
) -> Tuple[Array, float]:
    """Derivatives of the optimal policy and value at a smooth optimum.

    Central-difference Hessian blocks feed Dpi = -(Duu c)^-1 Dxu c and
    Dnu = Dx c + Du c . Dpi.
    """
    u0 = np.asarray(u_star, dtype=float)
    k = len(u0)
    if h is None:
        h = 1e-4 * max(1.0, abs(x), float(np.max(np.abs(u0))) if k else 1.0)

    def cu(uu: Array) -> float:
        return float(c(x, uu))

    # Duu by central second differences
    H = np.zeros((k, k))
    c0 = cu(u0)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        H[i, i] = (cu(u0 + ei) - 2 * c0 + cu(u0 - ei)) / (h * h)
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h
            H[i, j] = H[j, i] = (
                cu(u0 + ei + ej) - cu(u0 + ei - ej) - cu(u0 - ei + ej) + cu(u0 - ei - ej)
            ) / (4 * h * h)
    if abs(float(np.linalg.det(H))) < 1e-10:
        raise SingularHessianError("second derivative in u is numerically singular")

    # Dxu by mixed central differences
    mixed = np.zeros(k)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        mixed[i] = (
            float(c(x + h, u0 + ei)) - float(c(x + h, u0 - ei))
            - float(c(x - h, u0 + ei)) + float(c(x - h, u0 - ei))
        ) / (4 * h * h)

    dpi = -np.linalg.solve(H, mixed)
    du = np.array([
        (cu(u0 + _unit(k, i, h)) - cu(u0 - _unit(k, i, h))) / (2 * h) for i in range(k)
    ])
    dx = (float(c(x + h, u0)) - float(c(x - h, u0))) / (2 * h)
    dnu = dx + float(du @ dpi)
    return dpi, dnu


def _unit(k: int, i: int, h: float) -> Array:
    e = np.zeros(k)
    e[i] = h
    return e


def pc_sensitivities(
    c: Callable[[float, Sequence[float]], float],
    x: float,
    u_star: Sequence[float],
    v: int,
    h: Optional[float] = None,
) -> Tuple[Array, float]:
    """One-sided (B-derivative) variants of the policy/value sensitivities.

    The x-derivatives are taken one-sided along direction v; the Hessian
    in u is two-sided (the cost is smooth in u at an interior optimum of
    each selection piece).
    """
    if v not in (-1, 1):
        raise ValueError("direction must be +1 or -1")
    u0 = np.asarray(u_star, dtype=float)
    k = len(u0)
    if h is None:
        h = 1e-4 * max(1.0, abs(x), float(np.max(np.abs(u0))) if k else 1.0)

    def cu(uu: Array) -> float:
        return float(c(x, uu))

    H = np.zeros((k, k))
    c0 = cu(u0)
    for i in range(k):
        ei = _unit(k, i, h)
        H[i, i] = (cu(u0 + ei) - 2 * c0 + cu(u0 - ei)) / (h * h)
        for j in range(i + 1, k):
            ej = _unit(k, j, h)
            H[i, j] = H[j, i] = (
                cu(u0 + ei + ej) - cu(u0 + ei - ej) - cu(u0 - ei + ej) + cu(u0 - ei - ej)
            ) / (4 * h * h)
    if abs(float(np.linalg.det(H))) < 1e-10:
        raise SingularHessianError("second derivative in u is numerically singular")

    # mixed block, one-sided in x: d/du c at x + v*h vs at x, divided by v*h
    mixed = np.zeros(k)
    for i in range(k):
        ei = _unit(k, i, h)
        du_far = (float(c(x + v * h, u0 + ei)) - float(c(x + v * h, u0 - ei))) / (2 * h)
        du_near = (cu(u0 + ei) - cu(u0 - ei)) / (2 * h)
        mixed[i] = (du_far - du_near) / (v * h)

    dpi_dx = -np.linalg.solve(H, mixed)  # derivative of pi wrt x on side v
    dpi_v = v * dpi_dx                   # B-derivative along the direction v

    # Dnu(x; v) = D1c(x,pi;v) + D2c(x,pi; Dpi(x;v))
    d1_directional = one_sided_derivative(
        lambda s: float(c(x + s * v, u0)), 0.0, +1
    ).value
    norm = float(np.linalg.norm(dpi_v))
    if norm > 0.0:
        d2_directional = one_sided_derivative(
            lambda s: float(c(x, u0 + s * (dpi_v / norm))), 0.0, +1
        ).value * norm
    else:
        d2_directional = 0.0
    dnu_v = d1_directional + d2_directional
    return dpi_v, dnu_v


def verify_value_identity(
    c: Callable[[float, Sequence[float]], float],
    nu: Callable[[float], float],
    x: float,
    u_star: Sequence[float],
    v: int,
    h0: Optional[float] = None,
) -> float:
    """Residual between the direct one-sided derivative of the optimal
    value and its chain-rule expression through the cost and policy.

    Scaled by max(1, |direct|)."""
    direct = one_sided_derivative(nu, x, v, h0=h0).value
    _, dnu_v = pc_sensitivities(c, x, u_star, v)
    return abs(direct - dnu_v) / max(1.0, abs(direct))


SMOOTH = "smooth"
KINK = "kink"
JUMP = "jump"
BOUNDARY = "boundary/unknown"


@dataclass
class PointClass:
    x: float
    label: str
    d_plus: float
    d_minus: float
    jump_estimate: float


@dataclass
class RegularityReport:
    points: List[PointClass]
    kappa_kink: float
    kappa_jump: float
    meta: dict = field(default_factory=dict)

    def label_at(self, x: float, atol: float = 1e-12) -> str:
        for pt in self.points:
            if abs(pt.x - x) <= atol:
                return pt.label
        raise KeyError(f"no classified point at {x}")

    def labels(self) -> Dict[float, str]:
        return {pt.x: pt.label for pt in self.points}

    def to_csv(self) -> str:
        lines = ["theta0,class,d_plus,d_minus,jump_estimate"]
        for pt in self.points:
            lines.append(
                f"{pt.x:.17g},{pt.label},{pt.d_plus:.17g},{pt.d_minus:.17g},"
                f"{pt.jump_estimate:.17g}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "kappa_kink": self.kappa_kink,
                "kappa_jump": self.kappa_jump,
                "meta": self.meta,
                "points": [
                    {
                        "x": pt.x,
                        "class": pt.label,
                        "d_plus": pt.d_plus,
                        "d_minus": pt.d_minus,
                        "jump_estimate": pt.jump_estimate,
                    }
                    for pt in self.points
                ],
            },
            indent=2,
        )


def _slope_stats(x: Array, y: Array) -> Tuple[Array, float]:
    slopes = np.diff(y) / np.diff(x)
    med = float(np.median(np.abs(slopes)))
    return slopes, med


def classify_curve(
    coarse_x: Sequence[float],
    coarse_y: Sequence[float],
    fine_x: Sequence[float],
    fine_y: Sequence[float],
    kappa_kink: float = 0.2,
    kappa_jump: float = 20.0,
) -> RegularityReport:
    """Per-point {smooth | kink | jump} classification with refinement evidence.

    The fine grid must refine the coarse grid 4x over the same interval.
    A point is a jump when its adjacent increment dominates the median
    increment at both resolutions and does not shrink with the grid; a
    kink when the one-sided secant slopes disagree (relative to the local
    slope scale) at both resolutions; else smooth.
    """
    cx = np.asarray(coarse_x, dtype=float)
    cy = np.asarray(coarse_y, dtype=float)
    fx = np.asarray(fine_x, dtype=float)
    fy = np.asarray(fine_y, dtype=float)
    if len(fx) - 1 != 4 * (len(cx) - 1):
        raise GridMismatchError("fine grid must refine the coarse grid 4x")
    if abs(fx[0] - cx[0]) > 1e-12 or abs(fx[-1] - cx[-1]) > 1e-12:
        raise GridMismatchError("grids must cover the same interval")
    if not np.allclose(fx[::4], cx, atol=1e-12):
        raise GridMismatchError("fine grid nodes must contain the coarse nodes")

    inc_c = np.abs(np.diff(cy))
    inc_f = np.abs(np.diff(fy))
    floor = 1e-300
    med_inc_c = max(float(np.median(inc_c)), floor)
    med_inc_f = max(float(np.median(inc_f)), floor)
    slopes_c, med_slope_c = _slope_stats(cx, cy)
    slopes_f, med_slope_f = _slope_stats(fx, fy)

    def window_scale(slopes: Array, i: int, med: float) -> float:
        w = max(3, len(slopes) // 10)
        lo, hi = max(0, i - w), min(len(slopes), i + w + 1)
        local = float(np.median(np.abs(slopes[lo:hi])))
        return max(local, 0.1 * med, 1e-300)

    points: List[PointClass] = []
    for i in range(1, len(cx) - 1):
        fi = 4 * i
        dp_c = slopes_c[i]
        dm_c = slopes_c[i - 1]
        dp_f = slopes_f[fi]
        dm_f = slopes_f[fi - 1]

        g_c = max(inc_c[i - 1], inc_c[i])
        g_f = max(inc_f[fi - 1], inc_f[fi])
        jump_c = g_c > kappa_jump * med_inc_c
        jump_f = g_f > kappa_jump * med_inc_f
        persists = g_f > 0.5 * g_c  # a smooth increment would shrink ~4x
        if jump_c and jump_f and persists:
            points.append(PointClass(float(cx[i]), JUMP, dp_c, dm_c, float(g_f)))
            continue

        kink_c = abs(dp_c - dm_c) > kappa_kink * window_scale(slopes_c, i, med_slope_c)
        kink_f = abs(dp_f - dm_f) > kappa_kink * window_scale(slopes_f, fi, med_slope_f)
        if kink_c and kink_f:
            points.append(PointClass(float(cx[i]), KINK, dp_c, dm_c, 0.0))
        else:
            points.append(PointClass(float(cx[i]), SMOOTH, dp_c, dm_c, 0.0))
    return RegularityReport(points, kappa_kink, kappa_jump)


TRUE_B = "true_b"
SMOOTHED = "smoothed"
SAMPLED = "sampled"


@dataclass
class PGStep:
    pi_plus: float
    step: float
    estimate: float
    detail: dict = field(default_factory=dict)


def pg_update(
    pi: float,
    alpha: float,
    grad_estimator: str,
    f: Callable[[float], float],
    h_s: float = 0.05,
    rng: Optional[np.random.Generator] = None,
    n_samples: int = 8,
    grad_tol: float = 1e-4,
    h0: float = 1e-4,
) -> PGStep:
    """One policy update pi+ = pi + alpha * argmin_{|d|=1} D f(pi; d).

    true_b: one-sided derivative pair; a nonnegative pair means pi is a
    fixed point and the step is zero.  smoothed: symmetric difference of
    width h_s; sampled: Gaussian-smoothed two-point estimate with a seeded
    generator.  The smoothed/sampled step is -alpha * sign(g) with a
    deadband |g| <= grad_tol standing in for an exact zero estimate.
    """
    if grad_estimator == TRUE_B:
        dp = one_sided_derivative(f, pi, +1, h0=h0)
        dm = one_sided_derivative(f, pi, -1, h0=h0)
        detail = {"d_plus": dp.value, "d_minus": dm.value}
        if min(dp.value, dm.value) >= -grad_tol:
            return PGStep(pi, 0.0, 0.0, detail)
        step = alpha * (1.0 if dp.value < dm.value else -1.0)
        return PGStep(pi + step, step, min(dp.value, dm.value), detail)

    if grad_estimator == SMOOTHED:
        g = (float(f(pi + h_s)) - float(f(pi - h_s))) / (2.0 * h_s)
        detail = {"g": g}
    elif grad_estimator == SAMPLED:
        if rng is None:
            raise ValueError("sampled estimator needs a seeded generator")
        gs = []
        for _ in range(n_samples):
            xi = float(rng.standard_normal())
            if abs(xi) < 1e-8:
                continue
            gs.append(xi * (float(f(pi + h_s * xi)) - float(f(pi - h_s * xi))) / (2.0 * h_s))
        g = float(np.mean(gs)) if gs else 0.0
        detail = {"g": g, "n": len(gs)}
    else:
        raise ValueError(f"unknown estimator {grad_estimator!r}")

    if not math.isfinite(g):
        raise NonFiniteCostError("gradient estimate is not finite")
    if abs(g) <= grad_tol:
        return PGStep(pi, 0.0, g, detail)
    step = -alpha * math.copysign(1.0, g)
    return PGStep(pi + step, step, g, detail)


def pg_divergence_experiment(
    objective: Callable[[float], float],
    pi_star: float,
    alphas: Sequence[float],
    estimators: Sequence[str] = (TRUE_B, SMOOTHED, SAMPLED),
    h_s: float = 0.05,
    master_seed: int = 2024,
    n_samples: int = 8,
    grad_tol: float = 1e-4,
    h0: float = 1e-4,
) -> dict:
    """Distance moved from pi_star by one update, per estimator and step size.

    Randomness for the sampled estimator is derived from the master seed
    and the (alpha, estimator) task index so results are schedule
    independent.
    """
    out: Dict[str, dict] = {}
    for ei, est in enumerate(estimators):
        per_alpha = {}
        for ai, alpha in enumerate(alphas):
            rng = np.random.default_rng(np.random.SeedSequence([master_seed, ei, ai]))
            res = pg_update(
                pi_star, alpha, est, objective,
                h_s=h_s, rng=rng, n_samples=n_samples, grad_tol=grad_tol, h0=h0,
            )
            per_alpha[alpha] = {
                "pi_plus": res.pi_plus,
                "moved": abs(res.pi_plus - pi_star),
                "estimate": res.estimate,
                "detail": res.detail,
            }
        out[est] = per_alpha
    return out
