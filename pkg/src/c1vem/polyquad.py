"""Scaled monomial bases and quadrature on polygons and edges.

Monomials are ordered graded-lexicographically:
``1, x, y, x^2, xy, y^2, x^3, x^2 y, x y^2, y^3, ...`` where ``x`` and ``y``
stand for the scaled coordinates ``(x - x_E) / h_E`` and ``(y - y_E) / h_E``.
Projector matrices are exchanged between modules by this index, so the
ordering must not change.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


def monomial_exponents(degree: int) -> np.ndarray:
    """Exponent pairs ``(a, b)`` of all monomials of total degree <= ``degree``."""
    exps = [(d - j, j) for d in range(degree + 1) for j in range(d + 1)]
    return np.array(exps, dtype=int).reshape(-1, 2)


def basis_dimension(degree: int) -> int:
    if degree < 0:
        return 0
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate sampled values; the first axis runs over the points."""
        return np.tensordot(self.weights, values, axes=(0, 0))


class ScaledMonomialBasis:
    """Monomials ``((x - x_E)/h_E)^a ((y - y_E)/h_E)^b`` with ``a + b <= degree``."""

    def __init__(self, center, diameter: float, degree: int):
        self.center = np.asarray(center, dtype=float)
        self.h = float(diameter)
        self.degree = int(degree)
        self.exponents = monomial_exponents(self.degree)

    @property
    def dim(self) -> int:
        return len(self.exponents)

    def _powers(self, t: np.ndarray, shift: int) -> np.ndarray:
        # t**(e - shift) with zero where e - shift < 0
        out = np.zeros(t.shape + (self.degree + 1,))
        for e in range(shift, self.degree + 1):
            out[..., e] = t ** (e - shift)
        return out

    def evaluate(self, points, derivative_order: int = 0):
        """Values, gradients or Hessians of all basis members at ``points``.

        Returns arrays of shape ``(npts, dim)``, ``(npts, dim, 2)`` or
        ``(npts, dim, 2, 2)`` for ``derivative_order`` 0, 1, 2.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi = (pts[:, 0] - self.center[0]) / self.h
        eta = (pts[:, 1] - self.center[1]) / self.h
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        px = [self._powers(xi, s) for s in range(3)]
        py = [self._powers(eta, s) for s in range(3)]
        # falling factorial coefficients
        fa1, fb1 = a.astype(float), b.astype(float)
        fa2, fb2 = (a * (a - 1)).astype(float), (b * (b - 1)).astype(float)
        if derivative_order == 0:
            return px[0][:, a] * py[0][:, b]
        if derivative_order == 1:
            g = np.empty((len(pts), self.dim, 2))
            g[..., 0] = fa1 * px[1][:, a] * py[0][:, b] / self.h
            g[..., 1] = fb1 * px[0][:, a] * py[1][:, b] / self.h
            return g
        if derivative_order == 2:
            hs = np.empty((len(pts), self.dim, 2, 2))
            h2 = self.h * self.h
            hs[..., 0, 0] = fa2 * px[2][:, a] * py[0][:, b] / h2
            hs[..., 0, 1] = fa1 * fb1 * px[1][:, a] * py[1][:, b] / h2
            hs[..., 1, 0] = hs[..., 0, 1]
            hs[..., 1, 1] = fb2 * px[0][:, a] * py[2][:, b] / h2
            return hs
        raise ValueError(f"derivative_order must be 0, 1 or 2, got {derivative_order}")

    def grad_laplacian(self, points) -> np.ndarray:
        """``grad(Laplacian(m))`` of every basis member, shape ``(npts, dim, 2)``.

        This is ``div(D^2 m)`` and appears in boundary terms of the Hessian
        projector.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi = (pts[:, 0] - self.center[0]) / self.h
        eta = (pts[:, 1] - self.center[1]) / self.h
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        px = [self._powers(xi, s) for s in range(4)]
        py = [self._powers(eta, s) for s in range(4)]
        f3a = (a * (a - 1) * (a - 2)).astype(float)
        f3b = (b * (b - 1) * (b - 2)).astype(float)
        f2a = (a * (a - 1)).astype(float)
        f2b = (b * (b - 1)).astype(float)
        h3 = self.h ** 3
        out = np.empty((len(pts), self.dim, 2))
        # d/dx (m_xx + m_yy), d/dy (m_xx + m_yy)
        out[..., 0] = (f3a * px[3][:, a] * py[0][:, b] + a * f2b * px[1][:, a] * py[2][:, b]) / h3
        out[..., 1] = (f2a * b * px[2][:, a] * py[1][:, b] + f3b * px[0][:, a] * py[3][:, b]) / h3
        return out


@lru_cache(maxsize=None)
def gauss_legendre_01(npts: int):
    x, w = roots_legendre(npts)
    return (x + 1.0) / 2.0, w / 2.0


def gauss_points_for(exactness: int) -> int:
    return max(1, int(np.ceil((exactness + 1) / 2)))


@lru_cache(maxsize=None)
def reference_triangle_rule(exactness: int):
    """Collapsed (conical product) Gauss rule on the triangle (0,0),(1,0),(0,1).

    Gauss-Jacobi in the collapsed direction absorbs the Jacobian, so all
    weights are positive and the rule is exact up to ``exactness``.
    """
    n = gauss_points_for(exactness)
    xg, wg = roots_legendre(n)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    u = (xj + 1.0) / 2.0  # collapsed coordinate
    s = (xg + 1.0) / 2.0
    wu = wj / 4.0
    ws = wg / 2.0
    uu, ss = np.meshgrid(u, s, indexing="ij")
    # (u, s) -> (x, y) = (u, (1 - u) s); the Jacobian (1 - u) sits in wu
    bary = np.column_stack([uu.ravel(), ((1.0 - uu) * ss).ravel()])
    w = np.outer(wu, ws).ravel()
    return bary, w


def triangle_quadrature(a, b, c, exactness: int) -> QuadratureRule:
    bary, w = reference_triangle_rule(exactness)
    a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
    jac = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    pts = a + np.outer(bary[:, 0], b - a) + np.outer(bary[:, 1], c - a)
    return QuadratureRule(pts, w * abs(jac), exactness)


def polygon_centroid(xy: np.ndarray):
    x, y = xy[:, 0], xy[:, 1]
    xs, ys = np.roll(x, -1), np.roll(y, -1)
    cross = x * ys - xs * y
    area = 0.5 * cross.sum()
    cx = ((x + xs) * cross).sum() / (6.0 * area)
    cy = ((y + ys) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def element_quadrature(polygon, exactness: int, center=None) -> QuadratureRule:
    """Quadrature on a polygon by fanning it from ``center`` (default: centroid).

    Raises ValueError if the polygon is not star-shaped with respect to the
    fan center.
    """
    xy = np.asarray(polygon, dtype=float)
    if center is None:
        _, center = polygon_centroid(xy)
    center = np.asarray(center, dtype=float)
    bary, w = reference_triangle_rule(exactness)
    nv = len(xy)
    a = xy
    b = np.roll(xy, -1, axis=0)
    da = a - center
    db = b - center
    jac = da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0]
    if np.any(jac <= 0.0):
        bad = int(np.argmin(jac))
        raise ValueError(
            f"polygon is not star-shaped w.r.t. its fan center (sub-triangle {bad})"
        )
    pts = (
        center[None, None, :]
        + bary[None, :, 0, None] * da[:, None, :]
        + bary[None, :, 1, None] * db[:, None, :]
    ).reshape(nv * len(w), 2)
    weights = (jac[:, None] * w[None, :]).ravel()
    return QuadratureRule(pts, weights, exactness)


def edge_quadrature(a, b, exactness: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``ceil((exactness+1)/2)`` points on segment ``ab``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s, w = gauss_legendre_01(gauss_points_for(exactness))
    length = float(np.hypot(*(b - a)))
    pts = a + np.outer(s, b - a)
    return QuadratureRule(pts, w * length, exactness)


def evaluate_basis(basis: ScaledMonomialBasis, points, derivative_order: int = 0):
    return basis.evaluate(points, derivative_order)
