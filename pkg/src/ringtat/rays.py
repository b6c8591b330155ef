"""Geodesic tracing and the event geometry of circular detectors.

Singularities travel along unit-speed geodesics of the metric with line
element dx/c.  A traced ray leaves the unit disc, continues as an exact
straight line (the speed is one outside), and produces detector readings
exactly where it crosses a detector circle through that circle's center:
such crossings are perpendicular, which is what makes them visible in the
data.  The small geometry yields two crossings per time direction (near and
far side of the center), the large geometry one outward crossing.

The visibility classifier follows the masked-singularity rule: an event is
useless when another wavefront sample produces an event at the mirror point
of the same circle at the same time, because the two contributions cannot be
separated in circle-averaged data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._spline import SplineField
from .detector import DetectorConfig, LargeMode, SmallMode
from .field import Covector, SpeedField

_TWO_PI = 2.0 * math.pi

DEFAULT_RAY_STEP = 0.005


@dataclass(frozen=True)
class RayState:
    """A point on a traced ray: position, momentum covector, elapsed time.
    Along any trace c(x)|p| stays within 1e-6 of one."""

    x: np.ndarray
    p: np.ndarray
    t: float


@dataclass
class RayPath:
    """Result of tracing one covector in one time direction.

    ``states`` samples the interior leg.  If the ray escaped the unit disc,
    (``x_exit``, ``t_exit``, ``v_exit``) give the exit point, exit time and
    unit direction of the straight exterior continuation
    gamma(t) = x_exit + (t - t_exit) * v_exit.
    """

    covector: Covector
    sigma: int
    c_start: float
    states: list[RayState]
    escaped: bool
    x_exit: np.ndarray | None = None
    t_exit: float | None = None
    v_exit: np.ndarray | None = None

    def exterior_point(self, t: float) -> np.ndarray:
        if not self.escaped:
            raise ValueError("ray never left the unit disc")
        return self.x_exit + (t - self.t_exit) * self.v_exit


@dataclass(frozen=True)
class DetectionEvent:
    """One perpendicular crossing of a detector circle.

    ``branch`` is 1 for the near-side crossing (before the center passage)
    and 2 for the far side; large-mode events are all branch 1.  ``lam`` is
    the fiber scale, positive on branch 1; ``tau`` is the time frequency,
    negative for sigma = +1; ``omega`` is the angular frequency 2-vector,
    zero for radial crossings.  ``point`` is the crossing location.
    """

    sigma: int
    branch: int
    t_det: float
    theta: float
    lam: float
    tau: float
    omega: np.ndarray
    point: np.ndarray


def _speed_spline(speed: SpeedField) -> SplineField:
    g = speed.grid
    return SplineField(-g.L, g.h, speed.c)


def trace_geodesic(
    start: Covector,
    speed: SpeedField,
    sigma: int = 1,
    t_max: float = 6.0,
    h_ray: float = DEFAULT_RAY_STEP,
    _spline: SplineField | None = None,
) -> RayPath:
    """Integrate the unit-speed geodesic issued from a covector.

    Fourth-order Runge-Kutta on xdot = c^2 p, pdot = -c |p|^2 grad c, with
    the speed and its gradient read from a bicubic interpolant of the
    sampled field.  Momentum starts at sigma * xi / c, so c|p| = 1 along the
    exact flow.  Integration stops at the first sample outside the closed
    unit disc; the exit point is then refined along the last segment and the
    exterior continuation is an exact straight line.  A ray still inside the
    disc at t_max is reported as non-escaping.
    """
    if sigma not in (-1, 1):
        raise ValueError("sigma must be +1 or -1")
    if t_max <= 0 or h_ray <= 0:
        raise ValueError("t_max and h_ray must be positive")
    sp = _speed_spline(speed) if _spline is None else _spline

    def deriv(x, p):
        c, grad = sp.value_and_gradient(x[None, :])
        c = float(c[0])
        dx = (c * c) * p
        dp = -c * float(np.dot(p, p)) * grad[0]
        return dx, dp

    x = start.y_arr.copy()
    c0, _ = sp.value_and_gradient(x[None, :])
    c0 = float(c0[0])
    p = sigma * start.xi_arr / c0
    t = 0.0
    states = [RayState(x=x.copy(), p=p.copy(), t=t)]
    n_steps = int(math.ceil(t_max / h_ray))
    for _ in range(n_steps):
        k1x, k1p = deriv(x, p)
        k2x, k2p = deriv(x + 0.5 * h_ray * k1x, p + 0.5 * h_ray * k1p)
        k3x, k3p = deriv(x + 0.5 * h_ray * k2x, p + 0.5 * h_ray * k2p)
        k4x, k4p = deriv(x + h_ray * k3x, p + h_ray * k3p)
        x_new = x + (h_ray / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        p_new = p + (h_ray / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        t_new = t + h_ray
        states.append(RayState(x=x_new.copy(), p=p_new.copy(), t=t_new))
        if float(np.dot(x_new, x_new)) >= 1.0:
            # refine the unit-circle crossing on the segment [x, x_new];
            # the segment is straight to integrator accuracy
            d = x_new - x
            a = float(np.dot(d, d))
            b = float(np.dot(x, d))
            cc = float(np.dot(x, x)) - 1.0
            s = (-b + math.sqrt(max(b * b - a * cc, 0.0))) / a if a > 0 else 1.0
            x_exit = x + s * d
            nrm = float(np.hypot(x_exit[0], x_exit[1]))
            if nrm > 0:
                x_exit = x_exit / nrm
            v = p_new / float(np.hypot(p_new[0], p_new[1]))
            return RayPath(
                covector=start, sigma=sigma, c_start=c0, states=states,
                escaped=True, x_exit=x_exit, t_exit=t + s * h_ray, v_exit=v,
            )
        x, p, t = x_new, p_new, t_new
    return RayPath(covector=start, sigma=sigma, c_start=c0, states=states, escaped=False)


def detect_events(path: RayPath, config: DetectorConfig) -> list[DetectionEvent]:
    """Perpendicular detector-circle crossings of an escaped ray.

    The exterior continuation is straight, so crossings are solved in closed
    form.  Small geometry: the line meets the circle of detector centers at
    one forward point R*theta_hat; the detector circle there is crossed at
    distance r on either side of that passage.  Large geometry: the exit
    point itself is the detector center and the single outward crossing lies
    r past it.  Crossings failing the perpendicularity check or occurring at
    non-positive times are discarded.
    """
    if not path.escaped:
        return []
    mode = config.mode
    scale = path.c_start * path.covector.magnitude  # c(y)|xi|
    lam_mag = scale / (2.0 * mode.r)
    tau = -path.sigma * scale
    q, v, t_q = path.x_exit, path.v_exit, path.t_exit

    events: list[DetectionEvent] = []
    if isinstance(mode, SmallMode):
        # forward crossing of the center ring |z| = R
        b = float(np.dot(q, v))
        disc = b * b + mode.R**2 - float(np.dot(q, q))
        if disc < 0.0:
            return []
        s = -b + math.sqrt(disc)
        center = q + s * v
        t_c = t_q + s
        theta = math.atan2(center[1], center[0]) % _TWO_PI
        for branch, t_det in ((1, t_c - mode.r), (2, t_c + mode.r)):
            if t_det <= 0.0:
                continue
            point = path.exterior_point(t_det)
            n_hat = (point - center) / mode.r
            if abs(float(np.dot(v, n_hat))) < 1.0 - 1e-6:
                continue
            events.append(_make_event(path.sigma, branch, t_det, theta, lam_mag, tau, scale, point))
        return events

    # large geometry: the exit point is on the ring of centers already
    theta = math.atan2(q[1], q[0]) % _TWO_PI
    t_det = t_q + mode.r
    point = path.exterior_point(t_det)
    n_hat = (point - q) / mode.r
    if t_det > 0.0 and abs(float(np.dot(v, n_hat))) >= 1.0 - 1e-6:
        events.append(_make_event(path.sigma, 1, t_det, theta, lam_mag, tau, scale, point))
    return events


def _make_event(sigma, branch, t_det, theta, lam_mag, tau, scale, point) -> DetectionEvent:
    theta_hat = np.array([math.cos(theta), math.sin(theta)])
    omega = scale * (point - float(np.dot(point, theta_hat)) * theta_hat)
    lam = lam_mag if branch == 1 else -lam_mag
    return DetectionEvent(
        sigma=sigma, branch=branch, t_det=float(t_det), theta=float(theta),
        lam=float(lam), tau=float(tau), omega=omega, point=np.asarray(point, dtype=float),
    )


def canonical_image(
    cv: Covector,
    speed: SpeedField,
    config: DetectorConfig,
    t_max: float = 6.0,
    h_ray: float = DEFAULT_RAY_STEP,
    _spline: SplineField | None = None,
) -> list[DetectionEvent]:
    """All detector events of one covector, both time directions.

    Four events for the small geometry (two branches per direction), two for
    the large one.  A shorter list means a non-escaping ray or a discarded
    degenerate crossing; callers compare against the expected count.
    """
    sp = _speed_spline(speed) if _spline is None else _spline
    events: list[DetectionEvent] = []
    for sigma in (1, -1):
        path = trace_geodesic(cv, speed, sigma=sigma, t_max=t_max, h_ray=h_ray, _spline=sp)
        events.extend(detect_events(path, config))
    return events


def mirror_point(x, theta: float, config: DetectorConfig) -> np.ndarray:
    """The partner point of a perpendicular crossing on the same detector
    circle: the antipode through the circle's center.  An involution."""
    mode = config.mode
    center = mode.center_radius * np.array([math.cos(theta), math.sin(theta)])
    x = np.asarray(x, dtype=float)
    if abs(float(np.hypot(*(x - center))) - mode.r) > 1e-9:
        raise ValueError("point is not on the detector circle at this angle")
    return 2.0 * center - x


@dataclass(frozen=True)
class CovectorVerdict:
    covector: Covector
    verdict: str  # "visible" | "masked" | "out_of_aperture"
    witness: DetectionEvent | None = None
    partner_index: int | None = None
    escaped: bool = True


@dataclass
class VisibilityReport:
    verdicts: list[CovectorVerdict]
    time_window: tuple[float, float]
    arc: tuple[float, float] | None

    def count(self, verdict: str) -> int:
        return sum(1 for v in self.verdicts if v.verdict == verdict)


def _in_arc(theta: float, arc: tuple[float, float] | None) -> bool:
    if arc is None:
        return True
    a, b = arc
    return (theta - a) % _TWO_PI < (b - a) % _TWO_PI or (b - a) >= _TWO_PI


def coverage_time(mode: SmallMode | LargeMode) -> float:
    """Record length after which every escaping covector has produced at
    least one event, for unit exterior speed.

    Small geometry: the slowest first event comes from the disc center,
    whose center-ring passage happens at distance R, minus the r the
    crossing happens early.  Large geometry: a ray exits the unit disc
    after at most 1 and meets its detector circle r later.
    """
    if isinstance(mode, SmallMode):
        return mode.R - mode.r
    return 1.0 + mode.r


def visibility(
    wf: list[Covector],
    speed: SpeedField,
    config: DetectorConfig,
    time_window: tuple[float, float] | None = None,
    arc: tuple[float, float] | None = None,
    pos_tol: float | None = None,
    time_tol: float | None = None,
    h_ray: float = DEFAULT_RAY_STEP,
) -> VisibilityReport:
    """Classify wavefront samples against an acquisition aperture.

    A covector is visible when one of its events lands inside the time
    window and the angular arc and no other wavefront sample produces an
    event at the mirror point of the same circle at the same time (within
    the matching tolerances).  If every in-aperture event is mirrored the
    covector is masked; with no in-aperture event at all, or a trapped ray,
    it is out of aperture.  Verdicts do not depend on covector magnitudes.
    """
    if not wf:
        raise ValueError("need at least one wavefront sample")
    if time_window is None:
        time_window = (0.0, config.T)
    if arc is None:
        arc = config.aperture
    if pos_tol is None:
        pos_tol = 2.0 * speed.grid.h
    if time_tol is None:
        time_tol = pos_tol

    sp = _speed_spline(speed)
    t_max = time_window[1] + 1.0
    all_events: list[list[DetectionEvent]] = [
        canonical_image(cv, speed, config, t_max=t_max, h_ray=h_ray, _spline=sp) for cv in wf
    ]

    verdicts: list[CovectorVerdict] = []
    t0, t1 = time_window
    for i, cv in enumerate(wf):
        events = all_events[i]
        if not events:
            verdicts.append(CovectorVerdict(cv, "out_of_aperture", escaped=False))
            continue
        in_ap = [e for e in events if t0 < e.t_det <= t1 and _in_arc(e.theta, arc)]
        if not in_ap:
            verdicts.append(CovectorVerdict(cv, "out_of_aperture"))
            continue
        verdict, witness, partner = "masked", None, None
        for e in in_ap:
            mirror = mirror_point(e.point, e.theta, config)
            partner_here = None
            for j, others in enumerate(all_events):
                if j == i:
                    continue
                for o in others:
                    if (
                        abs(o.t_det - e.t_det) <= time_tol
                        and float(np.hypot(*(o.point - mirror))) <= pos_tol
                    ):
                        partner_here = j
                        break
                if partner_here is not None:
                    break
            if partner_here is None:
                verdict, witness, partner = "visible", e, None
                break
            if witness is None:
                witness, partner = e, partner_here
        verdicts.append(CovectorVerdict(cv, verdict, witness=witness, partner_index=partner))
    return VisibilityReport(verdicts=verdicts, time_window=(t0, t1), arc=arc)
