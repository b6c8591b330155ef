"""Circle-averaged measurements and their consistency oracles.

A detector is a circle of radius r centered at R*(cos theta, sin theta);
its reading is the mean of the pressure over the circle.  Two geometries
are supported: small detectors surrounding the imaging disc from outside
(center radius R, R - r >= 1) and large detectors enclosing it (centers on
the unit circle, r >= 2).  Either way every detector point keeps distance
at least 1 from the origin.

The forward map, radius sweeps and the exact adjoint all drive the wave
module; sampling goes through the shared bicubic machinery so the adjoint
identity holds to machine precision.

The sweep data families satisfy cylinder wave equations in the sweep
variable; the residual operations evaluate those equations with centered
differences and serve as the package's physics self-check: residuals must
shrink at second order under simultaneous lattice refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._spline import BicubicSampler
from .field import Phantom, SpeedField
from .wave import WaveSolver, PmlProfile, choose_time_steps, _check_finite

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SmallMode:
    """Detector circles of radius r with centers on the circle of radius R;
    the imaging disc stays outside every detector disc (R - r >= 1)."""

    R: float
    r: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("detector radius r must be positive")
        if self.R - self.r < 1.0 - 1e-12:
            raise ValueError(
                f"small-detector geometry needs R - r >= 1, got R - r = {self.R - self.r:g}"
            )

    @property
    def center_radius(self) -> float:
        return self.R

    @property
    def reach(self) -> float:
        return self.R + self.r


@dataclass(frozen=True)
class LargeMode:
    """Detector circles of radius r >= 2 with centers on the unit circle;
    the imaging disc lies inside every detector disc."""

    r: float

    def __post_init__(self):
        if self.r < 2.0 - 1e-12:
            raise ValueError(f"large-detector geometry needs r >= 2, got r = {self.r:g}")

    R = 1.0

    @property
    def center_radius(self) -> float:
        return 1.0

    @property
    def reach(self) -> float:
        return 1.0 + self.r


@dataclass(frozen=True)
class DetectorConfig:
    """Acquisition description: geometry, angular sampling, record window.

    ``aperture`` restricts the detector centers to the open arc (a, b);
    None means the full circle.  ``nt`` is the number of time samples on
    [0, T]; None lets the forward operator pick it from the CFL bound.
    """

    mode: SmallMode | LargeMode
    n_theta: int = 180
    n_alpha: int = 256
    T: float = 5.0
    nt: int | None = None
    aperture: tuple[float, float] | None = None

    def __post_init__(self):
        if self.n_alpha < 64:
            raise ValueError("n_alpha must be at least 64")
        if self.n_theta < 1:
            raise ValueError("n_theta must be positive")
        if self.T <= 0:
            raise ValueError("record length T must be positive")
        if self.nt is not None and self.nt < 2:
            raise ValueError("nt must be at least 2")
        if self.aperture is not None:
            a, b = self.aperture
            if not (b > a and b - a <= _TWO_PI + 1e-12):
                raise ValueError("aperture must be an increasing arc of at most one turn")

    @property
    def full_circle(self) -> bool:
        return self.aperture is None


def theta_grid(config: DetectorConfig) -> np.ndarray:
    """Detector-center angles: uniform on [0, 2pi) for the full circle,
    midpoints of a uniform partition (endpoints excluded) on a sub-arc."""
    n = config.n_theta
    if config.full_circle:
        return _TWO_PI * np.arange(n) / n
    a, b = config.aperture
    return a + (np.arange(n) + 0.5) * (b - a) / n


def detector_points(config: DetectorConfig, theta: float) -> np.ndarray:
    """The n_alpha quadrature nodes on the detector circle at angle theta."""
    mode = config.mode
    alphas = _TWO_PI * np.arange(config.n_alpha) / config.n_alpha
    cx = mode.center_radius * math.cos(theta)
    cy = mode.center_radius * math.sin(theta)
    return np.stack(
        [cx + mode.r * np.cos(alphas), cy + mode.r * np.sin(alphas)], axis=-1
    )


def _require_clear_of_band(points: np.ndarray, grid) -> None:
    reach = float(np.max(np.abs(points)))
    if reach >= grid.interior_half_width - 1e-12:
        raise ValueError(
            f"detector points reach |x| = {reach:g}, inside the absorbing band "
            f"(interior half width {grid.interior_half_width:g})"
        )


def ring_average(u, config: DetectorConfig, theta: float, grid=None) -> float:
    """Discrete circular mean of a field over one detector circle.

    ``u`` is either a callable u(x, y) evaluated exactly at the quadrature
    nodes, or an (n, n) grid array interpolated bicubically (then ``grid``
    is required).  Uniform nodes on a periodic smooth integrand make this
    the trapezoid rule, so the quadrature error decays faster than any
    power of 1/n_alpha for callable fields.
    """
    pts = detector_points(config, theta)
    if callable(u):
        vals = u(pts[:, 0], pts[:, 1])
        return float(np.mean(vals))
    if grid is None:
        raise ValueError("grid is required to average a sampled field")
    _require_clear_of_band(pts, grid)
    from ._spline import SplineField

    sf = SplineField(-grid.L, grid.h, np.asarray(u, dtype=float))
    return float(np.mean(sf.value(pts)))


# ---------------------------------------------------------------------------
# data containers


@dataclass
class Sinogram:
    """Detector readings: data[i, j] = circle average at time i*dt, angle
    thetas[j]."""

    data: np.ndarray
    dt: float
    thetas: np.ndarray
    config: DetectorConfig

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.data.shape[0])


@dataclass
class RadiusSweep:
    """A family of sinograms over a swept radius.

    data[i, j, k] is the reading at time i*dt, angle thetas[j], radius
    radii[k].  ``variable`` records what was swept: "center" (the circle
    of detector centers, small geometry) or "detector" (the detector
    radius itself, large geometry).
    """

    data: np.ndarray
    dt: float
    thetas: np.ndarray
    radii: np.ndarray
    variable: str
    config: DetectorConfig


# ---------------------------------------------------------------------------
# sampling machinery shared by the forward map, the adjoint and the sweeps


def _build_sampler(grid, centers_radius: float | np.ndarray, circle_radius: float | np.ndarray,
                   thetas: np.ndarray, n_alpha: int) -> BicubicSampler:
    """Sampler whose row (j * n_radii + i) averages circle i at angle j.

    centers_radius/circle_radius may be scalars or per-radius arrays; rows
    are laid out theta-major so a single-radius sampler and the matching
    column of a sweep sampler are built from identical point sequences
    (this is what makes sweep columns bit-exact against forward runs).
    """
    Rs = np.atleast_1d(np.asarray(centers_radius, dtype=float))
    rs = np.atleast_1d(np.asarray(circle_radius, dtype=float))
    if Rs.size == 1:
        Rs = np.full(rs.size, Rs[0])
    if rs.size == 1:
        rs = np.full(Rs.size, rs[0])
    n_rad = Rs.size
    alphas = _TWO_PI * np.arange(n_alpha) / n_alpha
    ca, sa = np.cos(alphas), np.sin(alphas)
    pts = np.empty((thetas.size, n_rad, n_alpha, 2))
    for j, th in enumerate(thetas):
        for i in range(n_rad):
            pts[j, i, :, 0] = Rs[i] * math.cos(th) + rs[i] * ca
            pts[j, i, :, 1] = Rs[i] * math.sin(th) + rs[i] * sa
    flat = pts.reshape(-1, 2)
    _require_clear_of_band(flat, grid)
    rows = np.repeat(np.arange(thetas.size * n_rad), n_alpha)
    weights = np.full(flat.shape[0], 1.0 / n_alpha)
    return BicubicSampler(
        -grid.L, grid.h, grid.n, flat, rows=rows, weights=weights,
        n_rows=thetas.size * n_rad,
    )


def _time_lattice(speed: SpeedField, config: DetectorConfig) -> tuple[int, float]:
    if config.nt is None:
        return choose_time_steps(speed, config.T, safety=0.5)
    nt = config.nt
    dt = config.T / (nt - 1)
    return nt, dt


def _record_forward(f, speed: SpeedField, sampler: BicubicSampler, nt: int, dt: float,
                    pml: PmlProfile | None) -> np.ndarray:
    solver = WaveSolver(speed, dt, pml)
    s = solver.init_state(f.f if isinstance(f, Phantom) else np.asarray(f, dtype=float))
    out = np.empty((nt, sampler.n_rows))
    out[0] = sampler.apply(s.u_curr)
    for k in range(1, nt):
        s = solver.step(s)
        if k % 100 == 0:
            _check_finite(s, k)
        out[k] = sampler.apply(s.u_curr)
    return out


def forward_operator(
    f, speed: SpeedField, config: DetectorConfig, pml: PmlProfile | None = None
) -> Sinogram:
    """The measurement map: one wave solve, every detector read at every level."""
    thetas = theta_grid(config)
    mode = config.mode
    sampler = _build_sampler(speed.grid, mode.center_radius, mode.r, thetas, config.n_alpha)
    nt, dt = _time_lattice(speed, config)
    data = _record_forward(f, speed, sampler, nt, dt, pml)
    return Sinogram(data=data, dt=dt, thetas=thetas, config=config)


def adjoint_operator(
    data: np.ndarray,
    speed: SpeedField,
    config: DetectorConfig,
    pml: PmlProfile | None = None,
) -> np.ndarray:
    """Exact transpose of forward_operator, mapping a sinogram-shaped array
    back to an image.

    Composes the transposes of the solver steps and of the sampling in
    reverse order; with forward_operator it passes the adjoint identity at
    machine precision (plain Euclidean inner products on both sides).
    """
    thetas = theta_grid(config)
    mode = config.mode
    sampler = _build_sampler(speed.grid, mode.center_radius, mode.r, thetas, config.n_alpha)
    nt, dt = _time_lattice(speed, config)
    data = np.asarray(data, dtype=float)
    if data.shape != (nt, thetas.size):
        raise ValueError(f"data shape {data.shape} does not match lattice {(nt, thetas.size)}")
    solver = WaveSolver(speed, dt, pml)
    w = solver.zero_state()
    for k in range(nt - 1, -1, -1):
        w.u_curr = w.u_curr + sampler.apply_T(data[k])
        if k > 0:
            w = solver.step_T(w)
    return solver.init_state_T(w)


def sweep_small_radius(
    f,
    speed: SpeedField,
    config: DetectorConfig,
    R_values,
    pml: PmlProfile | None = None,
) -> RadiusSweep:
    """Record the small-geometry family P(t, theta, R) over center radii.

    One wave solve serves every R: the detectors are passive probes of the
    same field.  Each R must satisfy the small-geometry invariant.
    """
    if not isinstance(config.mode, SmallMode):
        raise ValueError("center-radius sweep requires the small-detector mode")
    r = config.mode.r
    Rs = np.asarray(sorted(R_values), dtype=float)
    if np.any(Rs - r < 1.0 - 1e-12):
        raise ValueError("every swept center radius must keep R - r >= 1")
    thetas = theta_grid(config)
    sampler = _build_sampler(speed.grid, Rs, r, thetas, config.n_alpha)
    nt, dt = _time_lattice(speed, config)
    flat = _record_forward(f, speed, sampler, nt, dt, pml)
    data = flat.reshape(nt, thetas.size, Rs.size)
    return RadiusSweep(data=data, dt=dt, thetas=thetas, radii=Rs, variable="center", config=config)


def sweep_large_radius(
    f,
    speed: SpeedField,
    config: DetectorConfig,
    r_values,
    pml: PmlProfile | None = None,
) -> RadiusSweep:
    """Record the large-geometry family P(t, theta, r) over detector radii."""
    if not isinstance(config.mode, LargeMode):
        raise ValueError("detector-radius sweep requires the large-detector mode")
    rs = np.asarray(sorted(r_values), dtype=float)
    if np.any(rs < 2.0 - 1e-12):
        raise ValueError("every swept detector radius must satisfy r >= 2")
    thetas = theta_grid(config)
    sampler = _build_sampler(speed.grid, 1.0, rs, thetas, config.n_alpha)
    nt, dt = _time_lattice(speed, config)
    flat = _record_forward(f, speed, sampler, nt, dt, pml)
    data = flat.reshape(nt, thetas.size, rs.size)
    return RadiusSweep(data=data, dt=dt, thetas=thetas, radii=rs, variable="detector", config=config)


# ---------------------------------------------------------------------------
# cylinder-equation residual oracles


def _sweep_stencil_parts(sweep: RadiusSweep):
    P = sweep.data
    nt, n_th, n_rad = P.shape
    if nt < 3 or n_rad < 3:
        raise ValueError("need at least 3 time samples and 3 radii for centered stencils")
    dr = np.diff(sweep.radii)
    if not np.allclose(dr, dr[0], rtol=1e-10, atol=0):
        raise ValueError("swept radii must be uniformly spaced")
    dt, dR = sweep.dt, float(dr[0])
    mid = P[1:-1, :, 1:-1]
    P_tt = (P[2:, :, 1:-1] - 2.0 * mid + P[:-2, :, 1:-1]) / dt**2
    P_rr = (P[1:-1, :, 2:] - 2.0 * mid + P[1:-1, :, :-2]) / dR**2
    P_r = (P[1:-1, :, 2:] - P[1:-1, :, :-2]) / (2.0 * dR)
    rho = sweep.radii[1:-1][None, None, :]
    return P_tt, P_rr, P_r, rho


def _theta_second_diff(sweep: RadiusSweep):
    P = sweep.data
    dth = float(sweep.thetas[1] - sweep.thetas[0]) if sweep.thetas.size > 1 else None
    if dth is None:
        raise ValueError("need at least 2 angles for a theta stencil")
    if sweep.config.full_circle:
        P_aa = (np.roll(P, -1, axis=1) - 2.0 * P + np.roll(P, 1, axis=1)) / dth**2
        return P_aa[1:-1, :, 1:-1], slice(None)
    P_aa = (P[:, 2:, :] - 2.0 * P[:, 1:-1, :] + P[:, :-2, :]) / dth**2
    return P_aa[1:-1, :, 1:-1], slice(1, -1)


def cylinder_residual_small(sweep: RadiusSweep) -> np.ndarray:
    """Centered-difference residual of the center-radius wave identity
    P_tt - P_RR - P_R / R - P_thth / R^2 at interior lattice points.

    On data from sweep_small_radius this is a discretization of an exact
    identity of the continuum measurements, so its RMS must decay at
    second order under simultaneous lattice refinement.  Applied to a
    detector-radius sweep it is the wrong equation (the angular term does
    not belong) and the residual stalls: a geometry discriminator.
    """
    P_tt, P_rr, P_r, rho = _sweep_stencil_parts(sweep)
    P_aa, th_sl = _theta_second_diff(sweep)
    return P_tt[:, th_sl, :] - P_rr[:, th_sl, :] - P_r[:, th_sl, :] / rho - P_aa / rho**2


def cylinder_residual_large(sweep: RadiusSweep) -> np.ndarray:
    """Centered-difference residual of the detector-radius wave identity
    P_tt - P_rr - P_r / r at interior lattice points (no angular term)."""
    P_tt, P_rr, P_r, rho = _sweep_stencil_parts(sweep)
    return P_tt - P_rr - P_r / rho
