"""Local enhanced C1 virtual element space on a polygon.

Degrees of freedom per element (orders k = 2, 3):

* per vertex: ``v``, ``h_xi * dv/dx``, ``h_xi * dv/dy`` (``h_xi`` is the mean
  diameter of the cells sharing the vertex);
* per edge, k = 3 only: ``h_e * dv/dn`` at the edge midpoint, with the
  element's outward normal.

Local ordering is vertex-major (``3*i + {0, 1, 2}``) followed by edge DoFs.
Everything the discrete forms need is obtained from the DoFs through the
edge traces: a cubic Hermite value trace and a degree ``k-1`` normal
derivative trace.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .polymesh import PolyMesh
from .polyquad import (
    ScaledMonomialBasis,
    basis_dimension,
    edge_quadrature,
    element_quadrature,
    gauss_legendre_01,
    gauss_points_for,
)

log = logging.getLogger(__name__)

SUPPORTED_ORDERS = (2, 3)


class UnsupportedOrder(ValueError):
    pass


class ElementError(RuntimeError):
    """A local projector system could not be solved on a cell."""


class DofKind(Enum):
    VERTEX_VALUE = "vertex_value"
    VERTEX_GRAD_X1 = "vertex_grad_x1"
    VERTEX_GRAD_X2 = "vertex_grad_x2"
    EDGE_VALUE = "edge_value"
    EDGE_NORMAL_DERIV = "edge_normal_deriv"
    MOMENT = "moment"


@dataclass(frozen=True)
class DofDescriptor:
    kind: DofKind
    entity: int  # global vertex or edge index
    point: int = 0
    scale: float = 1.0


@dataclass(frozen=True)
class DofLayout:
    k: int
    descriptors: tuple

    @property
    def n_dofs(self) -> int:
        return len(self.descriptors)

    @staticmethod
    def k_e(k: int) -> int:
        return max(0, k - 3)

    @staticmethod
    def k_n(k: int) -> int:
        return max(0, k - 2)

    @staticmethod
    def local_count(k: int, n_edges: int) -> int:
        k_e, k_n = DofLayout.k_e(k), DofLayout.k_n(k)
        return (3 + k_e + k_n) * n_edges + max(0, (k - 3) * (k - 2) // 2)


def _check_order(k: int):
    if k not in SUPPORTED_ORDERS:
        raise UnsupportedOrder(f"order k={k} is not supported (available: {SUPPORTED_ORDERS})")


def global_dof_count(n_vertices: int, n_edges: int, n_cells: int, k: int) -> int:
    k_e, k_n = DofLayout.k_e(k), DofLayout.k_n(k)
    return 3 * n_vertices + (k_e + k_n) * n_edges + max(0, (k - 3) * (k - 2) // 2) * n_cells


def build_dof_layout(mesh: PolyMesh, cell: int, k: int) -> DofLayout:
    _check_order(k)
    loop = mesh.cells[cell]
    desc = []
    for v in loop:
        hv = float(mesh.vertex_h[v])
        desc.append(DofDescriptor(DofKind.VERTEX_VALUE, int(v)))
        desc.append(DofDescriptor(DofKind.VERTEX_GRAD_X1, int(v), scale=hv))
        desc.append(DofDescriptor(DofKind.VERTEX_GRAD_X2, int(v), scale=hv))
    if DofLayout.k_n(k):
        lengths = mesh.edge_length()
        for e in mesh.cell_edges[cell]:
            desc.append(DofDescriptor(DofKind.EDGE_NORMAL_DERIV, int(e), 0, float(lengths[e])))
    return DofLayout(k, tuple(desc))


# Hermite cubic and quadratic Lagrange shape functions on t in [0, 1]
# rows: coefficient of t^0..t^3
_HERMITE = np.array([
    [1.0, 0.0, -3.0, 2.0],   # H00: value at 0
    [0.0, 1.0, -2.0, 1.0],   # H10: slope at 0
    [0.0, 0.0, 3.0, -2.0],   # H01: value at 1
    [0.0, 0.0, -1.0, 1.0],   # H11: slope at 1
])
_LAGRANGE2 = np.array([
    [1.0, -3.0, 2.0],   # t = 0
    [0.0, -1.0, 2.0],   # t = 1
    [0.0, 4.0, -4.0],   # t = 1/2
])


def _solve_refined(A: np.ndarray, B: np.ndarray, cell: int, what: str) -> np.ndarray:
    """Dense LU with partial pivoting plus one step of iterative refinement."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-13 * d.max():
        raise ElementError(f"singular {what} system on cell {cell}")
    X = lu_solve((lu, piv), B, check_finite=False)
    X += lu_solve((lu, piv), B - A @ X, check_finite=False)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("cell %d %s condition number %.3e", cell, what, np.linalg.cond(A))
    return X


class LocalSpace:
    """Projector matrices and quadrature data of the local space on one cell.

    Attributes (``nd`` local DoFs, ``np_`` = dim P_k):

    ``P_D2``, ``P_0``  (np_, nd)   coefficients of the Hessian / L2 projections
    ``G_0``            (2, ng, nd) L2 projection of the gradient onto [P_{k-1}]^2
    ``H_0``            (3, nh, nd) xx, xy, yy parts of the projected Hessian in P_{k-2}
    ``D``              (nd, np_)   DoF values of the monomials
    """

    def __init__(self, mesh: PolyMesh, cell: int, k: int, exactness: int | None = None):
        _check_order(k)
        self.mesh = mesh
        self.cell = int(cell)
        self.k = int(k)
        self.layout = build_dof_layout(mesh, cell, k)
        loop = mesh.cells[cell]
        self.xy = mesh.vertices[loop]
        self.nv = len(loop)
        self.area = float(mesh.area[cell])
        self.h = float(mesh.diameter[cell])
        self.center = mesh.centroid[cell]
        self.vertex_h = mesh.vertex_h[loop]
        self.nd = self.layout.n_dofs
        self.basis = ScaledMonomialBasis(self.center, self.h, k)
        self.np_ = self.basis.dim
        self.ng = basis_dimension(k - 1)
        self.nh = basis_dimension(k - 2)
        self.exactness = 4 * k - 2 if exactness is None else int(exactness)

        a = self.xy
        b = np.roll(self.xy, -1, axis=0)
        d = b - a
        self.edge_len = np.hypot(d[:, 0], d[:, 1])
        self.tangent = d / self.edge_len[:, None]
        self.normal = np.column_stack([self.tangent[:, 1], -self.tangent[:, 0]])

        self.quad = element_quadrature(self.xy, self.exactness, center=self.center)
        self._edge_s, self._edge_w = gauss_legendre_01(gauss_points_for(4 * k + 1))

        self.D = self._dof_matrix()
        self._edge_traces()
        self.P_D2 = self._build_pi_d2()
        # enhancement: for k <= 3 every moment against P_k is a moment of the
        # Hessian projection, hence the L2 projector coincides with it
        self.P_0 = self.P_D2
        self._prepare_volume()
        self.G_0 = self._build_pi0_grad()
        self.H_0 = self._build_pi0_hess()

    # ------------------------------------------------------------------
    def local_index(self, i: int, comp: int) -> int:
        return 3 * i + comp

    def edge_dof(self, i: int) -> int:
        return 3 * self.nv + i

    def _dof_matrix(self) -> np.ndarray:
        D = np.zeros((self.nd, self.np_))
        vals = self.basis.evaluate(self.xy, 0)
        grads = self.basis.evaluate(self.xy, 1)
        D[0:3 * self.nv:3] = vals
        D[1:3 * self.nv:3] = self.vertex_h[:, None] * grads[:, :, 0]
        D[2:3 * self.nv:3] = self.vertex_h[:, None] * grads[:, :, 1]
        if self.k == 3:
            mid = 0.5 * (self.xy + np.roll(self.xy, -1, axis=0))
            g = self.basis.evaluate(mid, 1)
            D[3 * self.nv:] = self.edge_len[:, None] * np.einsum("ejc,ec->ej", g, self.normal)
        return D

    # ------------------------------------------------------------------
    # edge traces as linear maps of the DoF vector

    def value_trace_coeffs(self, i: int) -> np.ndarray:
        """(4, nd): coefficients in t^0..t^3 (t in [0,1]) of the value trace on edge i."""
        j = (i + 1) % self.nv
        ell, t = self.edge_len[i], self.tangent[i]
        C = np.zeros((4, self.nd))
        C[:, 3 * i] = _HERMITE[0]
        C[:, 3 * j] = _HERMITE[2]
        for comp in range(2):
            C[:, 3 * i + 1 + comp] = _HERMITE[1] * ell * t[comp] / self.vertex_h[i]
            C[:, 3 * j + 1 + comp] = _HERMITE[3] * ell * t[comp] / self.vertex_h[j]
        return C

    def normal_trace_coeffs(self, i: int) -> np.ndarray:
        """(k, nd): coefficients in t^0..t^{k-1} of the normal-derivative trace on edge i."""
        j = (i + 1) % self.nv
        n = self.normal[i]
        C = np.zeros((self.k, self.nd))
        if self.k == 2:
            lin0, lin1 = np.array([1.0, -1.0]), np.array([0.0, 1.0])
        else:
            lin0, lin1 = _LAGRANGE2[0], _LAGRANGE2[1]
            C[:, self.edge_dof(i)] = _LAGRANGE2[2] / self.edge_len[i]
        for comp in range(2):
            C[:, 3 * i + 1 + comp] = lin0 * n[comp] / self.vertex_h[i]
            C[:, 3 * j + 1 + comp] = lin1 * n[comp] / self.vertex_h[j]
        return C

    def _edge_traces(self):
        s = self._edge_s
        T4 = np.vander(s, 4, increasing=True)
        dT4 = np.column_stack([np.zeros_like(s), np.ones_like(s), 2 * s, 3 * s ** 2])
        Tk = np.vander(s, self.k, increasing=True)
        self.edge_points = []
        self.edge_weights = []
        self.trace_val = []   # (nq, nd)
        self.trace_dt = []    # tangential derivative, (nq, nd)
        self.trace_dn = []    # normal derivative, (nq, nd)
        for i in range(self.nv):
            a = self.xy[i]
            b = self.xy[(i + 1) % self.nv]
            self.edge_points.append(a + np.outer(s, b - a))
            self.edge_weights.append(self._edge_w * self.edge_len[i])
            Cv = self.value_trace_coeffs(i)
            self.trace_val.append(T4 @ Cv)
            self.trace_dt.append(dT4 @ Cv / self.edge_len[i])
            self.trace_dn.append(Tk @ self.normal_trace_coeffs(i))

    def boundary_gradient(self, i: int) -> np.ndarray:
        """(nq, 2, nd): full gradient of the basis functions on edge i."""
        return (self.trace_dt[i][:, None, :] * self.tangent[i][None, :, None]
                + self.trace_dn[i][:, None, :] * self.normal[i][None, :, None])

    # ------------------------------------------------------------------
    def _build_pi_d2(self) -> np.ndarray:
        q = self.quad
        hess = self.basis.evaluate(q.points, 2)
        G = np.einsum("q,qaij,qbij->ab", q.weights, hess, hess)
        B = np.zeros((self.np_, self.nd))
        for i in range(self.nv):
            pts, w = self.edge_points[i], self.edge_weights[i]
            n = self.normal[i]
            Hn = np.einsum("qaij,j->qai", self.basis.evaluate(pts, 2), n)
            gv = self.boundary_gradient(i)
            B += np.einsum("q,qai,qid->ad", w, Hn, gv)
            if self.k >= 3:
                divH = self.basis.grad_laplacian(pts) @ n
                B -= np.einsum("q,qa,qd->ad", w, divH, self.trace_val[i])
        # rows of the linear monomials carry no Hessian information; replace
        # them by boundary means of the value and of the gradient
        G[:3] = 0.0
        B[:3] = 0.0
        for i in range(self.nv):
            pts, w = self.edge_points[i], self.edge_weights[i]
            G[0] += w @ self.basis.evaluate(pts, 0)
            g = self.basis.evaluate(pts, 1)
            G[1] += np.einsum("q,qa->a", w, g[:, :, 0])
            G[2] += np.einsum("q,qa->a", w, g[:, :, 1])
            B[0] += w @ self.trace_val[i]
            gv = self.boundary_gradient(i)
            B[1] += w @ gv[:, 0, :]
            B[2] += w @ gv[:, 1, :]
        return _solve_refined(G, B, self.cell, "Hessian projector")

    def _prepare_volume(self):
        q = self.quad
        self.phi_q = self.basis.evaluate(q.points, 0)          # (nq, np_)
        self.dphi_q = self.basis.evaluate(q.points, 1)         # (nq, np_, 2)
        self.mass_poly = np.einsum("q,qa,qb->ab", q.weights, self.phi_q, self.phi_q)

    def _build_pi0_grad(self) -> np.ndarray:
        q = self.quad
        ng = self.ng
        Mg = self.mass_poly[:ng, :ng]
        G0 = np.empty((2, ng, self.nd))
        for c in range(2):
            # -(d_c m_g, Pi0 v) + sum_e n_c (m_g, v)_e
            C = np.einsum("q,qa,qb->ab", q.weights, self.dphi_q[:, :ng, c], self.phi_q)
            rhs = -C @ self.P_0
            for i in range(self.nv):
                m = self.basis.evaluate(self.edge_points[i], 0)[:, :ng]
                rhs += self.normal[i][c] * np.einsum("q,qa,qd->ad", self.edge_weights[i], m, self.trace_val[i])
            G0[c] = _solve_refined(Mg, rhs, self.cell, "gradient projector")
        return G0

    def _build_pi0_hess(self) -> np.ndarray:
        q = self.quad
        nh, ng = self.nh, self.ng
        Mh = self.mass_poly[:nh, :nh]
        # Pi0 grad v at the quadrature points, (nq, 2, nd)
        gq = np.einsum("qa,cad->qcd", self.phi_q[:, :ng], self.G_0)
        dp = self.dphi_q[:, :nh, :]  # derivatives of the test polynomials
        rhs = np.zeros((3, nh, self.nd))
        # volume parts: -(Pi0 d_a v, d_b p)
        vol = np.einsum("q,qpb,qad->abpd", q.weights, dp, gq)  # [a, b] = (d_a v, d_b p)
        rhs[0] -= vol[0, 0]
        rhs[2] -= vol[1, 1]
        rhs[1] -= 0.5 * (vol[0, 1] + vol[1, 0])
        for i in range(self.nv):
            w = self.edge_weights[i]
            n = self.normal[i]
            p = self.basis.evaluate(self.edge_points[i], 0)[:, :nh]
            gv = self.boundary_gradient(i)
            rhs[0] += n[0] * np.einsum("q,qp,qd->pd", w, p, gv[:, 0, :])
            rhs[2] += n[1] * np.einsum("q,qp,qd->pd", w, p, gv[:, 1, :])
            rhs[1] += 0.5 * np.einsum("q,qp,qd->pd", w, p, n[1] * gv[:, 0, :] + n[0] * gv[:, 1, :])
        H0 = np.empty_like(rhs)
        for c in range(3):
            H0[c] = _solve_refined(Mh, rhs[c], self.cell, "Hessian L2 projector")
        return H0

    # ------------------------------------------------------------------
    # conveniences

    def poly_dofs(self, coeffs) -> np.ndarray:
        """DoF vector of the polynomial with the given scaled-monomial coefficients."""
        return self.D @ np.asarray(coeffs, dtype=float)

    def projected_values(self, dofs, points=None) -> np.ndarray:
        pts = self.quad.points if points is None else points
        return self.basis.evaluate(pts, 0) @ (self.P_0 @ dofs)

    def projected_gradient(self, dofs, points=None) -> np.ndarray:
        pts = self.quad.points if points is None else points
        psi = self.basis.evaluate(pts, 0)[:, :self.ng]
        return np.einsum("qa,cad,...d->q...c", psi, self.G_0, dofs)

    def projected_hessian(self, dofs) -> np.ndarray:
        """Coefficients (3, nh) of the xx, xy, yy parts of the projected Hessian."""
        return np.einsum("cpd,d->cp", self.H_0, dofs)


def build_local_space(mesh: PolyMesh, cell: int, k: int, exactness: int | None = None) -> LocalSpace:
    return LocalSpace(mesh, cell, k, exactness)


def build_pi_d2(mesh: PolyMesh, cell: int, k: int) -> np.ndarray:
    return LocalSpace(mesh, cell, k).P_D2


def build_pi0(mesh: PolyMesh, cell: int, k: int) -> np.ndarray:
    return LocalSpace(mesh, cell, k).P_0


def build_pi0_grad(mesh: PolyMesh, cell: int, k: int) -> np.ndarray:
    return LocalSpace(mesh, cell, k).G_0


def build_pi0_hess(mesh: PolyMesh, cell: int, k: int) -> np.ndarray:
    return LocalSpace(mesh, cell, k).H_0


def trace_value_on_edge(space: LocalSpace, dofs, i: int) -> Polynomial:
    """Value trace on local edge ``i`` as a polynomial in arc length from its start."""
    c = space.value_trace_coeffs(i) @ np.asarray(dofs, dtype=float)
    return Polynomial(c / space.edge_len[i] ** np.arange(len(c)))


def trace_normal_derivative_on_edge(space: LocalSpace, dofs, i: int) -> Polynomial:
    """Outward normal derivative trace on local edge ``i`` in arc length."""
    c = space.normal_trace_coeffs(i) @ np.asarray(dofs, dtype=float)
    return Polynomial(c / space.edge_len[i] ** np.arange(len(c)))


# --------------------------------------------------------------------------
# interpolation

def interpolate(fn, mesh: PolyMesh, k: int) -> np.ndarray:
    """Global DoF vector of the interpolant of ``fn``.

    ``fn(points)`` returns ``(values, gradients)`` with shapes (N,) and (N, 2).
    The vector has ``3 * n_vertices`` vertex entries (value, scaled x/y
    derivative) followed, for k = 3, by one scaled normal derivative per edge
    with respect to the reference edge normal.
    """
    _check_order(k)
    val, grad = fn(mesh.vertices)
    val = np.asarray(val, dtype=float)
    grad = np.asarray(grad, dtype=float)
    out = np.empty(global_dof_count(mesh.n_vertices, mesh.n_edges, mesh.n_cells, k))
    nv = mesh.n_vertices
    out[0:3 * nv:3] = val
    out[1:3 * nv:3] = mesh.vertex_h * grad[:, 0]
    out[2:3 * nv:3] = mesh.vertex_h * grad[:, 1]
    if k == 3:
        mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        _, gm = fn(mid)
        gm = np.asarray(gm, dtype=float)
        out[3 * nv:] = mesh.edge_length() * np.einsum("ec,ec->e", gm, mesh.edge_normal())
    return out


def local_dofs(mesh: PolyMesh, cell: int, k: int, global_full: np.ndarray) -> np.ndarray:
    """Restrict a full global DoF vector (see :func:`interpolate`) to one cell."""
    loop = mesh.cells[cell]
    idx = (3 * loop[:, None] + np.arange(3)).ravel()
    out = [global_full[idx]]
    if k == 3:
        e = mesh.cell_edges[cell]
        out.append(mesh.cell_edge_signs[cell] * global_full[3 * mesh.n_vertices + e])
    return np.concatenate(out)
