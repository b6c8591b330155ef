"""Natural bicubic spline interpolation with an exact matrix transpose.

The measurement operator samples wave fields along curves that sweep across
grid cells as the geometry parameters vary.  A C2 interpolant keeps the
sampling error smooth in those parameters (piecewise-linear interpolation
has O(h) derivative kinks at every cell edge, which pollutes grid-refinement
studies), and since every operation here is a plain linear map with natural
end conditions, the transpose needed by the adjoint solver is exact to
machine precision.

Conventions: grid functions are (n, n) arrays indexed [ix, iy] on a uniform
axis starting at x0 with spacing h; query points are (k, 2) arrays.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csr_matrix

_CORNER = np.array([0, 1])


@lru_cache(maxsize=32)
def _bands(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Banded forms (solve_banded layout) of the natural-spline tridiagonal
    system and of its transpose.  Do not mutate the cached arrays."""
    ab = np.zeros((3, n))
    ab[1] = 4.0
    ab[1, 0] = ab[1, -1] = 1.0  # end rows pin the coefficient to zero
    ab[0, 2:] = 1.0
    ab[2, :-2] = 1.0
    abT = np.zeros((3, n))
    abT[1] = ab[1]
    abT[0, 1:] = ab[2, :-1]
    abT[2, :-1] = ab[0, 1:]
    return ab, abT


def _second_diff(g: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Spline right-hand side: scaled interior second differences, zero in
    the first and last slot (natural end conditions)."""
    out = np.zeros_like(g)
    s = 6.0 / (h * h)
    gm = np.moveaxis(g, axis, 0)
    om = np.moveaxis(out, axis, 0)
    om[1:-1] = s * (gm[2:] - 2.0 * gm[1:-1] + gm[:-2])
    return out


def _second_diff_T(w: np.ndarray, h: float, axis: int) -> np.ndarray:
    s = 6.0 / (h * h)
    wm = np.moveaxis(w, axis, 0).copy()
    wm[0] = 0.0
    wm[-1] = 0.0
    out = -2.0 * wm
    out[1:] += wm[:-1]
    out[:-1] += wm[1:]
    return np.moveaxis(s * out, 0, axis)


def _solve(ab: np.ndarray, rhs: np.ndarray, axis: int) -> np.ndarray:
    r = np.moveaxis(rhs, axis, 0)
    shp = r.shape
    x = solve_banded((1, 1), ab, r.reshape(shp[0], -1), check_finite=False)
    return np.moveaxis(x.reshape(shp), 0, axis)


def spline_coeffs_1d(g: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Natural-spline second derivatives along one axis (zero at both ends)."""
    ab, _ = _bands(g.shape[axis])
    return _solve(ab, _second_diff(g, h, axis), axis)


def spline_coeffs_1d_T(w: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Exact transpose of spline_coeffs_1d."""
    _, abT = _bands(w.shape[axis])
    return _second_diff_T(_solve(abT, w, axis), h, axis)


def _locate(q: np.ndarray, x0: float, h: float, n: int):
    """Cell index and local coordinate in [0, 1) for positions along one axis."""
    t = (np.asarray(q, dtype=float) - x0) / h
    i = np.clip(np.floor(t).astype(np.int64), 0, n - 2)
    return i, t - i


def _weights(xi: np.ndarray, h: float):
    """Per-point weights on the two cell-corner values and on the two stored
    second derivatives; together they evaluate the cubic inside the cell."""
    a = 1.0 - xi
    wg = np.stack([a, xi], axis=-1)
    wm = (h * h / 6.0) * np.stack([a**3 - a, xi**3 - xi], axis=-1)
    return wg, wm


def _dweights(xi: np.ndarray, h: float):
    a = 1.0 - xi
    one = np.ones_like(xi)
    dwg = np.stack([-one / h, one / h], axis=-1)
    dwm = (h / 6.0) * np.stack([1.0 - 3.0 * a**2, 3.0 * xi**2 - 1.0], axis=-1)
    return dwg, dwm


class SplineField:
    """Bicubic interpolant of one fixed grid function, for pointwise queries."""

    def __init__(self, x0: float, h: float, values: np.ndarray):
        v = np.asarray(values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 4:
            raise ValueError("values must be square (n, n) with n >= 4")
        self.x0 = float(x0)
        self.h = float(h)
        self.n = v.shape[0]
        self.g = v
        self.mx = spline_coeffs_1d(v, self.h, 0)
        self.my = spline_coeffs_1d(v, self.h, 1)
        self.mxy = spline_coeffs_1d(self.mx, self.h, 1)

    def _gather(self, pts: np.ndarray):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        ix, xi = _locate(pts[:, 0], self.x0, self.h, self.n)
        iy, yi = _locate(pts[:, 1], self.x0, self.h, self.n)
        IX = (ix[:, None] + _CORNER)[:, :, None]
        IY = (iy[:, None] + _CORNER)[:, None, :]
        blocks = tuple(arr[IX, IY] for arr in (self.g, self.mx, self.my, self.mxy))
        return xi, yi, blocks

    def value(self, pts: np.ndarray) -> np.ndarray:
        xi, yi, (G, MX, MY, MXY) = self._gather(pts)
        wgx, wmx = _weights(xi, self.h)
        wgy, wmy = _weights(yi, self.h)
        return (
            np.einsum("ka,kb,kab->k", wgx, wgy, G)
            + np.einsum("ka,kb,kab->k", wmx, wgy, MX)
            + np.einsum("ka,kb,kab->k", wgx, wmy, MY)
            + np.einsum("ka,kb,kab->k", wmx, wmy, MXY)
        )

    def value_and_gradient(self, pts: np.ndarray):
        xi, yi, (G, MX, MY, MXY) = self._gather(pts)
        wgx, wmx = _weights(xi, self.h)
        wgy, wmy = _weights(yi, self.h)
        dgx, dmx = _dweights(xi, self.h)
        dgy, dmy = _dweights(yi, self.h)

        def combine(ax, mx_, ay, my_):
            return (
                np.einsum("ka,kb,kab->k", ax, ay, G)
                + np.einsum("ka,kb,kab->k", mx_, ay, MX)
                + np.einsum("ka,kb,kab->k", ax, my_, MY)
                + np.einsum("ka,kb,kab->k", mx_, my_, MXY)
            )

        val = combine(wgx, wmx, wgy, wmy)
        gx = combine(dgx, dmx, wgy, wmy)
        gy = combine(wgx, wmx, dgy, dmy)
        return val, np.stack([gx, gy], axis=-1)


class BicubicSampler:
    """Fixed linear map m = A u from a grid function to weighted point sums,
    evaluated through the bicubic interpolant, with an exact transpose.

    Each sample point contributes ``weight`` to output row ``row``; points
    sharing a row accumulate.  apply/apply_T are exact matrix transposes of
    each other (plain Euclidean inner products, no grid weights).
    """

    def __init__(
        self,
        x0: float,
        h: float,
        n: int,
        points: np.ndarray,
        rows: np.ndarray | None = None,
        weights: np.ndarray | None = None,
        n_rows: int | None = None,
    ):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        k = pts.shape[0]
        rows = np.zeros(k, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
        weights = np.ones(k) if weights is None else np.asarray(weights, dtype=float)
        if rows.shape != (k,) or weights.shape != (k,):
            raise ValueError("rows and weights must be 1-d with one entry per point")
        self.x0 = float(x0)
        self.h = float(h)
        self.n = int(n)
        self.n_rows = int(rows.max()) + 1 if n_rows is None else int(n_rows)

        ix, xi = _locate(pts[:, 0], self.x0, self.h, self.n)
        iy, yi = _locate(pts[:, 1], self.x0, self.h, self.n)
        wgx, wmx = _weights(xi, self.h)
        wgy, wmy = _weights(yi, self.h)
        cols = (ix[:, None, None] + _CORNER[None, :, None]) * n + (
            iy[:, None, None] + _CORNER[None, None, :]
        )
        rr = np.broadcast_to(rows[:, None, None], cols.shape)
        w = weights[:, None, None]

        def mat(wx, wy):
            vals = w * wx[:, :, None] * wy[:, None, :]
            return csr_matrix(
                (vals.ravel(), (rr.ravel(), cols.ravel())),
                shape=(self.n_rows, n * n),
            )

        self._e00 = mat(wgx, wgy)
        self._e10 = mat(wmx, wgy)
        self._e01 = mat(wgx, wmy)
        self._e11 = mat(wmx, wmy)

    def apply(self, u: np.ndarray) -> np.ndarray:
        mx = spline_coeffs_1d(u, self.h, 0)
        my = spline_coeffs_1d(u, self.h, 1)
        mxy = spline_coeffs_1d(mx, self.h, 1)
        return (
            self._e00 @ u.ravel()
            + self._e10 @ mx.ravel()
            + self._e01 @ my.ravel()
            + self._e11 @ mxy.ravel()
        )

    def apply_T(self, m: np.ndarray) -> np.ndarray:
        n = self.n
        out = (self._e00.T @ m).reshape(n, n).copy()
        out += spline_coeffs_1d_T((self._e10.T @ m).reshape(n, n), self.h, 0)
        out += spline_coeffs_1d_T((self._e01.T @ m).reshape(n, n), self.h, 1)
        cross = spline_coeffs_1d_T((self._e11.T @ m).reshape(n, n), self.h, 1)
        out += spline_coeffs_1d_T(cross, self.h, 0)
        return out
