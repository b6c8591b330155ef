"""Time-domain acoustic propagation.

Solves u_tt = c(x)^2 Lap u with u(0) = f, u_t(0) = 0 by an explicit
second-order leapfrog scheme.  An optional split-field absorbing layer
occupies a band inside each domain edge; its damping enters
semi-implicitly, so the scheme keeps the standard stability bound.

Every map here (one time step, the initial-data embedding) is linear in
the field and has a hand-written exact transpose, with plain Euclidean
inner products (no h^2 or dt weights).  Downstream modules compose these
into an exact discrete adjoint of the full measurement map.

State convention: u_curr is the field at the current level, u_prev one
level back, phi/psi the split-field layer memory.  Since u_t(0) = 0 makes
the solution even in time, the initial state uses u(-dt) = u(+dt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .field import Grid2D, Phantom, SpeedField

_NAN_CHECK_EVERY = 100


def laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """Five-point Laplacian with zero padding outside; symmetric as a matrix."""
    out = -4.0 * u
    out[1:, :] += u[:-1, :]
    out[:-1, :] += u[1:, :]
    out[:, 1:] += u[:, :-1]
    out[:, :-1] += u[:, 1:]
    return out / (h * h)


def ddx(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Centered first difference with zero padding; antisymmetric as a matrix."""
    out = np.zeros_like(u)
    um = np.moveaxis(u, axis, 0)
    om = np.moveaxis(out, axis, 0)
    om[:-1] += um[1:]
    om[1:] -= um[:-1]
    out /= 2.0 * h
    return out


def _edge_diff(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Forward differences across all n+1 cell edges (field zero outside).

    With this operator G the padded Laplacian factors as -G^T G, which is
    what makes the discrete energy below exactly conserved.
    """
    um = np.moveaxis(u, axis, 0)
    w = np.zeros((um.shape[0] + 1,) + um.shape[1:])
    w[1:-1] = um[1:] - um[:-1]
    w[0] = um[0]
    w[-1] = -um[-1]
    return w / h


def cfl_limit(speed: SpeedField) -> float:
    """Largest stable dt for the five-point leapfrog scheme."""
    return speed.grid.h / (math.sqrt(2.0) * speed.max_c)


def choose_time_steps(speed: SpeedField, duration: float, safety: float = 0.5) -> tuple[int, float]:
    """Level count and dt covering [0, duration] at a fraction of the CFL bound.

    Returns (nt, dt) with dt = duration / (nt - 1): level k sits at k*dt and
    the last level at exactly ``duration``.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not (0 < safety <= 1):
        raise ValueError("cfl safety factor must lie in (0, 1]")
    bound = safety * cfl_limit(speed)
    nt = int(math.ceil(duration / bound)) + 1
    return nt, duration / (nt - 1)


# ---------------------------------------------------------------------------
# absorbing layer


@dataclass(frozen=True)
class PmlProfile:
    """Per-axis damping of the absorbing band.

    sigma(d) = sigma_max * (d / width)^m for depth d into the band; zero in
    the interior, monotone up to sigma_max at the outer boundary.  sx/sy are
    the profile sampled along the two axes.
    """

    width: float
    sigma_max: float
    m: int
    sx: np.ndarray
    sy: np.ndarray


def default_sigma_max(width: float, m: int = 2, target: float = 1e-4) -> float:
    """Damping amplitude making a unit-speed round trip through the band
    attenuate to ``target`` in the continuous model."""
    return (m + 1) * math.log(1.0 / target) / (2.0 * width)


def pml_profile(
    grid: Grid2D,
    width: float | None = None,
    sigma_max: float | None = None,
    m: int = 2,
) -> PmlProfile:
    """Damping profile for the grid's absorbing band.

    The band geometry is owned by the grid (make_grid's pml_width), so a
    ``width`` given here must agree with it; detector-circle clearance is
    checked where detectors are configured, against grid.interior_half_width.
    """
    if grid.pml_width <= 0.0:
        raise ValueError("grid was built without an absorbing band (pml_width = 0)")
    if width is None:
        width = grid.pml_width
    if width != grid.pml_width:
        raise ValueError(
            f"profile width {width:g} conflicts with the grid band {grid.pml_width:g}"
        )
    if sigma_max is None:
        sigma_max = default_sigma_max(width, m)
    if sigma_max <= 0 or m < 1:
        raise ValueError("need sigma_max > 0 and polynomial order m >= 1")
    d = np.maximum(0.0, np.abs(grid.axis) - (grid.L - width))
    s = sigma_max * (d / width) ** m
    return PmlProfile(width=float(width), sigma_max=float(sigma_max), m=int(m), sx=s, sy=s.copy())


# ---------------------------------------------------------------------------
# state and stepping engine


@dataclass
class WaveState:
    u_curr: np.ndarray
    u_prev: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    t: float
    dt: float

    def copy(self) -> "WaveState":
        return WaveState(
            self.u_curr.copy(), self.u_prev.copy(), self.phi.copy(), self.psi.copy(),
            self.t, self.dt,
        )

    def dot(self, other: "WaveState") -> float:
        return float(
            np.sum(self.u_curr * other.u_curr)
            + np.sum(self.u_prev * other.u_prev)
            + np.sum(self.phi * other.phi)
            + np.sum(self.psi * other.psi)
        )


class WaveSolver:
    """Leapfrog stepper bound to one speed field, dt and damping profile.

    ``step`` advances a WaveState one level; ``step_T`` applies the exact
    matrix transpose of that map.  States are treated as immutable: returned
    states may share arrays with their input.
    """

    def __init__(self, speed: SpeedField, dt: float, pml: PmlProfile | None = None):
        grid = speed.grid
        limit = cfl_limit(speed)
        if dt <= 0:
            raise ValueError("dt must be positive")
        if dt > limit * (1.0 + 1e-12):
            raise ValueError(
                f"dt = {dt:g} exceeds the stability bound {limit:g} "
                f"(h = {grid.h:g}, max c = {speed.max_c:g})"
            )
        self.grid = grid
        self.dt = float(dt)
        self.h = grid.h
        self.c2 = speed.c**2
        self.pml = pml
        if pml is not None:
            self.sx = pml.sx[:, None]
            self.sy = pml.sy[None, :]
            self._den = 1.0 + 0.5 * dt * (self.sx + self.sy)
            self._coef_u = 2.0 - dt**2 * self.sx * self.sy
            self._coef_v = 1.0 - 0.5 * dt * (self.sx + self.sy)

    def zero_state(self) -> WaveState:
        z = np.zeros_like(self.c2)
        return WaveState(z, z.copy(), z.copy(), z.copy(), 0.0, self.dt)

    # -- initial data embedding and its transpose --------------------------

    def init_state(self, f: np.ndarray) -> WaveState:
        f = np.asarray(f, dtype=float)
        v = f + 0.5 * self.dt**2 * self.c2 * laplacian(f, self.h)
        z = np.zeros_like(f)
        return WaveState(f.copy(), v, z, z.copy(), 0.0, self.dt)

    def init_state_T(self, s: WaveState) -> np.ndarray:
        return s.u_curr + s.u_prev + 0.5 * self.dt**2 * laplacian(self.c2 * s.u_prev, self.h)

    # -- one time level and its transpose -----------------------------------

    def step(self, s: WaveState, source: np.ndarray | None = None) -> WaveState:
        dt, h = self.dt, self.h
        flux = laplacian(s.u_curr, h)
        if source is not None:
            body = self.c2 * flux + source
        else:
            body = self.c2 * flux
        if self.pml is not None:
            body = body + self.c2 * (ddx(s.phi, h, 0) + ddx(s.psi, h, 1))
            u_new = (self._coef_u * s.u_curr - self._coef_v * s.u_prev + dt**2 * body) / self._den
            phi_new = (1.0 - dt * self.sx) * s.phi + dt * (self.sy - self.sx) * ddx(s.u_curr, h, 0)
            psi_new = (1.0 - dt * self.sy) * s.psi + dt * (self.sx - self.sy) * ddx(s.u_curr, h, 1)
        else:
            u_new = 2.0 * s.u_curr - s.u_prev + dt**2 * body
            phi_new, psi_new = s.phi, s.psi
        return WaveState(u_new, s.u_curr, phi_new, psi_new, s.t + dt, dt)

    def step_T(self, s: WaveState) -> WaveState:
        dt, h = self.dt, self.h
        if self.pml is not None:
            w = s.u_curr / self._den
            c2w = self.c2 * w
            a = self._coef_u * w + dt**2 * laplacian(c2w, h) + s.u_prev
            a = a - dt * ddx((self.sy - self.sx) * s.phi, h, 0)
            a = a - dt * ddx((self.sx - self.sy) * s.psi, h, 1)
            b = -self._coef_v * w
            g = -(dt**2) * ddx(c2w, h, 0) + (1.0 - dt * self.sx) * s.phi
            q = -(dt**2) * ddx(c2w, h, 1) + (1.0 - dt * self.sy) * s.psi
        else:
            a = 2.0 * s.u_curr + dt**2 * laplacian(self.c2 * s.u_curr, h) + s.u_prev
            b = -s.u_curr
            g, q = s.phi, s.psi
        return WaveState(a, b, g, q, s.t - dt, dt)


# ---------------------------------------------------------------------------
# module-level operations


def _as_array(f) -> np.ndarray:
    return f.f if isinstance(f, Phantom) else np.asarray(f, dtype=float)


def init_state(f, speed: SpeedField, dt: float, pml: PmlProfile | None = None) -> WaveState:
    """Initial leapfrog state for pressure f released from rest."""
    return WaveSolver(speed, dt, pml).init_state(_as_array(f))


def step(state: WaveState, speed: SpeedField, pml: PmlProfile | None = None) -> WaveState:
    """Advance one level (convenience wrapper; loops should use WaveSolver)."""
    return WaveSolver(speed, state.dt, pml).step(state)


def energy(state: WaveState, speed: SpeedField) -> float:
    """Discrete wave energy of the leapfrog level pair.

    Uses the product of gradients at consecutive levels rather than a
    squared gradient; for the undamped scheme this quantity is conserved
    step to step up to roundoff.  Agrees with the kinetic-plus-potential
    energy to O(dt).
    """
    h, dt = speed.grid.h, state.dt
    kin = np.sum(((state.u_curr - state.u_prev) / dt) ** 2 / (speed.c**2))
    pot = 0.0
    for axis in (0, 1):
        pot += np.sum(
            _edge_diff(state.u_curr, h, axis) * _edge_diff(state.u_prev, h, axis)
        )
    return 0.5 * h * h * (kin + pot)


def _check_finite(state: WaveState, k: int) -> None:
    if not np.all(np.isfinite(state.u_curr)):
        raise FloatingPointError(
            f"field blew up at step {k} (t = {state.t:g}); check the CFL bound"
        )


def solve_forward(
    f,
    speed: SpeedField,
    duration: float,
    pml: PmlProfile | None = None,
    probe=None,
    cfl_safety: float = 0.5,
    dt: float | None = None,
    nt: int | None = None,
) -> WaveState:
    """March the pressure field from rest over [0, duration].

    ``probe(t, u)`` is invoked at every level including t = 0; the level
    spacing is chosen from the CFL bound unless (dt, nt) are given
    explicitly (then nt levels at spacing dt are computed and duration is
    ignored).  Returns the final state.
    """
    if dt is None or nt is None:
        nt, dt = choose_time_steps(speed, duration, cfl_safety)
    solver = WaveSolver(speed, dt, pml)
    s = solver.init_state(_as_array(f))
    if probe is not None:
        probe(0.0, s.u_curr)
    for k in range(1, nt):
        s = solver.step(s)
        if k % _NAN_CHECK_EVERY == 0:
            _check_finite(s, k)
        if probe is not None:
            probe(s.t, s.u_curr)
    _check_finite(s, nt - 1)
    return s


def solve_with_sources(
    sources,
    speed: SpeedField,
    dt: float,
    pml: PmlProfile | None = None,
    probe=None,
) -> WaveState:
    """Drive u_tt = c^2 Lap u + s from zero initial data.

    ``sources`` is a sequence of (n, n) arrays (or None for quiet steps),
    one per time step: entry k acts while advancing from level k to k+1, so
    len(sources) steps are taken.  ``probe(t, u)`` is invoked at every
    level including t = 0.
    """
    solver = WaveSolver(speed, dt, pml)
    s = solver.zero_state()
    if probe is not None:
        probe(0.0, s.u_curr)
    n = speed.grid.n
    for k, src in enumerate(sources):
        if src is not None:
            src = np.asarray(src, dtype=float)
            if src.shape != (n, n):
                raise ValueError(f"source at step {k} has shape {src.shape}, expected {(n, n)}")
        s = solver.step(s, source=src)
        if (k + 1) % _NAN_CHECK_EVERY == 0:
            _check_finite(s, k + 1)
        if probe is not None:
            probe(s.t, s.u_curr)
    _check_finite(s, len(sources))
    return s


def snapshots(
    speed: SpeedField,
    f,
    dt: float,
    nt: int,
    every: int = 1,
    pml: PmlProfile | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """March nt levels and collect u at levels 0, every, 2*every, ..."""
    solver = WaveSolver(speed, dt, pml)
    s = solver.init_state(_as_array(f))
    times = [0.0]
    fields = [s.u_curr.copy()]
    for k in range(1, nt):
        s = solver.step(s)
        if k % every == 0:
            times.append(s.t)
            fields.append(s.u_curr.copy())
    return np.array(times), fields
