"""Element bilinear and semilinear forms with their Newton derivatives.

All matrices are dense and indexed in the local DoF order of
:class:`~c1vem.c1space.LocalSpace`. The per-element functions are the
reference implementation; :class:`ElementBatch` evaluates the state-dependent
reaction term for many elements of equal size at once and is what the time
loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .c1space import LocalSpace


class MaterialLaw:
    """Double-well potential psi(x) = (1 - x^2)^2 / 4 and its derivatives."""

    @staticmethod
    def psi(x):
        return 0.25 * (1.0 - x * x) ** 2

    @staticmethod
    def phi(x):
        return x ** 3 - x

    @staticmethod
    def dphi(x):
        return 3.0 * x * x - 1.0

    @staticmethod
    def ddphi(x):
        return 6.0 * x


def quadrature_values(space: LocalSpace):
    """``(w, V, G)``: weights, Pi0 phi_j and Pi0 grad phi_j at the element quadrature points.

    Shapes: (nq,), (nq, nd), (nq, 2, nd).
    """
    V = space.phi_q @ space.P_0
    G = np.einsum("qa,cad->qcd", space.phi_q[:, :space.ng], space.G_0)
    return space.quad.weights, V, G


def stab_matrix(space: LocalSpace) -> np.ndarray:
    R = np.eye(space.nd) - space.D @ space.P_0
    return R.T @ R


def mass_consistency(space: LocalSpace) -> np.ndarray:
    P = space.P_0
    return P.T @ space.mass_poly @ P


def stiffness_consistency(space: LocalSpace) -> np.ndarray:
    Mh = space.mass_poly[:space.nh, :space.nh]
    H = space.H_0
    # the off-diagonal Hessian entry appears twice in D^2 v : D^2 w
    return H[0].T @ Mh @ H[0] + 2.0 * H[1].T @ Mh @ H[1] + H[2].T @ Mh @ H[2]


def stiffness_d2(space: LocalSpace, S: np.ndarray | None = None) -> np.ndarray:
    S = stab_matrix(space) if S is None else S
    return stiffness_consistency(space) + S / space.h ** 2


def mass(space: LocalSpace, S: np.ndarray | None = None) -> np.ndarray:
    S = stab_matrix(space) if S is None else S
    return mass_consistency(space) + space.h ** 2 * S


def convection(space: LocalSpace, u) -> np.ndarray:
    """B_ij = int u . (Pi0 grad phi_j) (Pi0 phi_i); ``u(points) -> (npts, 2)``."""
    w, V, G = quadrature_values(space)
    uq = np.asarray(u(space.quad.points), dtype=float)
    return np.einsum("q,qi,qc,qcj->ij", w, V, uq, G)


def reaction_residual(space: LocalSpace, z) -> np.ndarray:
    w, V, G = quadrature_values(space)
    zq = V @ z
    gz = G @ z
    return np.einsum("q,qc,qci->i", w * MaterialLaw.dphi(zq), gz, G)


def reaction_jacobian(space: LocalSpace, z) -> np.ndarray:
    w, V, G = quadrature_values(space)
    zq = V @ z
    gz = G @ z
    gzG = np.einsum("qc,qci->qi", gz, G)
    J = np.einsum("q,qi,qj->ij", w * MaterialLaw.ddphi(zq), gzG, V)
    J += np.einsum("q,qci,qcj->ij", w * MaterialLaw.dphi(zq), G, G)
    return J


def fidelity_residual(space: LocalSpace, f: float, lam: float, c) -> np.ndarray:
    """l_i = int lam (f - Pi0 c) Pi0 phi_i with ``f`` and ``lam`` constant on the cell."""
    if lam == 0.0:
        return np.zeros(space.nd)
    w, V, _ = quadrature_values(space)
    return lam * np.einsum("q,qi->i", w * (f - V @ c), V)


def fidelity_jacobian(space: LocalSpace, f: float, lam: float) -> np.ndarray:
    if lam == 0.0:
        return np.zeros((space.nd, space.nd))
    return -lam * mass_consistency(space)


@dataclass
class ElementForms:
    A_d2: np.ndarray
    M: np.ndarray
    M_c: np.ndarray
    S: np.ndarray
    B: np.ndarray | None = None


def element_forms(space: LocalSpace, u=None) -> ElementForms:
    S = stab_matrix(space)
    return ElementForms(
        A_d2=stiffness_d2(space, S),
        M=mass(space, S),
        M_c=mass_consistency(space),
        S=S,
        B=None if u is None else convection(space, u),
    )


class ElementBatch:
    """Stacked quadrature data of elements sharing the local DoF count.

    ``cells`` indexes mesh cells; arrays carry a leading element axis.
    """

    def __init__(self, spaces: list[LocalSpace]):
        if not spaces:
            raise ValueError("empty batch")
        nd = {s.nd for s in spaces}
        nq = {s.quad.weights.size for s in spaces}
        if len(nd) != 1 or len(nq) != 1:
            raise ValueError("batch elements must share DoF and quadrature sizes")
        self.cells = np.array([s.cell for s in spaces])
        self.nd = nd.pop()
        data = [quadrature_values(s) for s in spaces]
        self.w = np.stack([d[0] for d in data])
        self.V = np.stack([d[1] for d in data])
        self.G = np.stack([d[2] for d in data])
        self.points = np.stack([s.quad.points for s in spaces])
        # (ne, 2 nq, nd) view with rows ordered (q, component)
        self._G_rows = self.G.reshape(len(spaces), -1, self.nd)

    def reaction(self, z: np.ndarray, jacobian: bool = True):
        """Residual (ne, nd) and optionally Jacobian (ne, nd, nd) for local states ``z``."""
        ne, nq = self.w.shape
        zq = np.matmul(self.V, z[:, :, None])[:, :, 0]
        Gr = self._G_rows
        gz = np.matmul(Gr, z[:, :, None]).reshape(ne, nq, 2)
        gzG = (gz[..., None] * self.G).sum(axis=2)
        wd = self.w * MaterialLaw.dphi(zq)
        res = np.matmul(wd[:, None, :], gzG)[:, 0, :]
        if not jacobian:
            return res, None
        X = (self.w * MaterialLaw.ddphi(zq))[:, :, None] * gzG
        J = np.matmul(X.transpose(0, 2, 1), self.V)
        J += np.matmul((Gr * np.repeat(wd, 2, axis=1)[:, :, None]).transpose(0, 2, 1), Gr)
        return res, J

    def integrals(self, z: np.ndarray):
        """Per-element ``(int Pi0 z, int psi(Pi0 z), int |Pi0 grad z|^2)``."""
        zq = np.einsum("eqi,ei->eq", self.V, z)
        gz = np.einsum("eqci,ei->eqc", self.G, z)
        return (
            np.einsum("eq,eq->e", self.w, zq),
            np.einsum("eq,eq->e", self.w, MaterialLaw.psi(zq)),
            np.einsum("eq,eqc,eqc->e", self.w, gz, gz),
        )

    def first_moment(self) -> np.ndarray:
        """(ne, nd): int Pi0 phi_i."""
        return np.einsum("eq,eqi->ei", self.w, self.V)
