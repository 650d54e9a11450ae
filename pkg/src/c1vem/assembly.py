"""Global DoF numbering, boundary constraints and sparse assembly.

The full global vector holds ``3 * n_vertices`` vertex entries (value and
the two scaled Cartesian derivatives, vertex-major) followed, for k = 3, by
one scaled normal derivative per edge measured against the reference edge
normal (:meth:`PolyMesh.edge_normal`). The homogeneous Neumann condition
``dv/dn = 0`` is imposed by eliminating DoFs: on the unit square the
tangential/normal frame of a boundary vertex is aligned with the axes, so the
normal gradient component is a single Cartesian DoF. Corners lose both
gradient DoFs, boundary edges lose their normal-derivative DoF.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .c1space import LocalSpace, global_dof_count
from .forms import ElementBatch
from .polymesh import MeshError, PolyMesh

log = logging.getLogger(__name__)


class AssemblyError(RuntimeError):
    pass


# boundary frame codes per vertex
INTERIOR, NORMAL_X, NORMAL_Y, CORNER = -1, 0, 1, 2


@dataclass(frozen=True)
class GlobalDofMap:
    k: int
    n_full: int
    full_to_free: np.ndarray       # (n_full,), -1 where constrained
    free_to_full: np.ndarray       # (n_free,)
    cell_full: tuple               # per cell: full index of each local DoF
    cell_sign: tuple               # per cell: +-1 relating local to global DoF
    vertex_frame: np.ndarray       # (n_vertices,) INTERIOR / NORMAL_X / NORMAL_Y / CORNER

    @property
    def n_free(self) -> int:
        return len(self.free_to_full)

    @property
    def constrained(self) -> np.ndarray:
        return np.flatnonzero(self.full_to_free < 0)

    def local_map(self, cell: int):
        """Free index and coefficient of each local DoF (coefficient 0 if constrained)."""
        g = self.full_to_free[self.cell_full[cell]]
        coef = np.where(g >= 0, self.cell_sign[cell], 0.0)
        return np.maximum(g, 0), coef

    def expand(self, free: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n_full)
        full[self.free_to_full] = free
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full, dtype=float)[self.free_to_full]

    def local_values(self, free: np.ndarray, cell: int) -> np.ndarray:
        g, coef = self.local_map(cell)
        return coef * free[g]


def build_global_map(mesh: PolyMesh, k: int) -> GlobalDofMap:
    nv, ne = mesh.n_vertices, mesh.n_edges
    n_full = global_dof_count(nv, ne, mesh.n_cells, k)
    if np.any(mesh.edge_cells[:, 0] < 0):
        raise AssemblyError("edge without an owning cell")
    interior_open = (mesh.edge_cells[:, 1] < 0) & ~mesh.boundary_edge
    if np.any(interior_open):
        e = int(np.flatnonzero(interior_open)[0])
        raise AssemblyError(f"non-conforming incidence: interior edge {e} has a single cell")

    v = mesh.vertices
    on_x = (v[:, 0] == 0.0) | (v[:, 0] == 1.0)
    on_y = (v[:, 1] == 0.0) | (v[:, 1] == 1.0)
    frame = np.full(nv, INTERIOR)
    frame[on_x] = NORMAL_X
    frame[on_y] = NORMAL_Y
    frame[on_x & on_y] = CORNER
    if np.any(mesh.boundary_vertex != (frame != INTERIOR)):
        raise MeshError("boundary vertices do not lie on the sides of the unit square")

    fixed = np.zeros(n_full, dtype=bool)
    fixed[3 * np.flatnonzero(frame == NORMAL_X) + 1] = True
    fixed[3 * np.flatnonzero(frame == NORMAL_Y) + 2] = True
    corners = np.flatnonzero(frame == CORNER)
    fixed[3 * corners + 1] = True
    fixed[3 * corners + 2] = True
    if k == 3:
        fixed[3 * nv + np.flatnonzero(mesh.boundary_edge)] = True

    free_to_full = np.flatnonzero(~fixed)
    full_to_free = np.full(n_full, -1)
    full_to_free[free_to_full] = np.arange(len(free_to_full))

    cell_full, cell_sign = [], []
    for c, loop in enumerate(mesh.cells):
        idx = (3 * loop[:, None] + np.arange(3)).ravel()
        sign = np.ones(len(idx))
        if k == 3:
            idx = np.concatenate([idx, 3 * nv + mesh.cell_edges[c]])
            sign = np.concatenate([sign, mesh.cell_edge_signs[c].astype(float)])
        cell_full.append(idx)
        cell_sign.append(sign)
    return GlobalDofMap(k, n_full, full_to_free, free_to_full, tuple(cell_full), tuple(cell_sign), frame)


@dataclass
class _Group:
    nd: int
    cells: np.ndarray
    gidx: np.ndarray       # (ne, nd) free index (0 where constrained)
    coef: np.ndarray       # (ne, nd)
    batch: ElementBatch
    inv: np.ndarray        # position in CSR data of every kept matrix entry
    keep: np.ndarray       # mask over the flattened (ne, nd, nd) entries


class Assembler:
    """Sparse assembly on a fixed CSR pattern shared by every matrix it produces.

    Entries are accumulated with ``np.bincount`` in a fixed element order, so
    results are deterministic run to run.
    """

    def __init__(self, mesh: PolyMesh, k: int, spaces: list[LocalSpace] | None = None, order=None):
        self.mesh = mesh
        self.k = k
        self.dofmap = build_global_map(mesh, k)
        if spaces is None:
            spaces = [LocalSpace(mesh, c, k) for c in range(mesh.n_cells)]
        self.spaces = spaces
        n = self.dofmap.n_free
        order = np.arange(mesh.n_cells) if order is None else np.asarray(order)
        nds = np.array([spaces[c].nd for c in order])

        self.groups: list[_Group] = []
        keys_all, w_all = [], []
        for nd in np.unique(nds):
            cells = order[nds == nd]
            maps = [self.dofmap.local_map(c) for c in cells]
            gidx = np.stack([m[0] for m in maps])
            coef = np.stack([m[1] for m in maps])
            keep = ((coef[:, :, None] != 0) & (coef[:, None, :] != 0)).ravel()
            keys = (gidx[:, :, None] * n + gidx[:, None, :]).ravel()[keep]
            keys_all.append(keys)
            self.groups.append(_Group(int(nd), cells, gidx, coef, ElementBatch([spaces[c] for c in cells]), None, keep))
        keys = np.concatenate(keys_all) if keys_all else np.zeros(0, dtype=int)
        ukeys, inv = np.unique(keys, return_inverse=True)
        pos = 0
        for g in self.groups:
            m = int(g.keep.sum())
            g.inv = inv[pos:pos + m]
            pos += m
        self.nnz = len(ukeys)
        self.indices = (ukeys % n).astype(np.int32)
        rows = ukeys // n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int32)
        self.shape = (n, n)
        # moments int Pi0 phi_i, used for the discrete mass
        self.mass_functional = self.vector([g.batch.first_moment() for g in self.groups])

    @property
    def n_free(self) -> int:
        return self.dofmap.n_free

    # ------------------------------------------------------------------
    def stack(self, per_cell) -> list[np.ndarray]:
        """Reorder a per-cell list of local arrays into the group layout."""
        return [np.stack([per_cell[c] for c in g.cells]) for g in self.groups]

    def matrix_data(self, local: list[np.ndarray]) -> np.ndarray:
        data = np.zeros(self.nnz)
        for g, A in zip(self.groups, local):
            scaled = (g.coef[:, :, None] * A * g.coef[:, None, :]).ravel()[g.keep]
            data += np.bincount(g.inv, weights=scaled, minlength=self.nnz)
        return data

    def csr(self, data: np.ndarray) -> sp.csr_matrix:
        A = sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape, copy=False)
        A.has_sorted_indices = True
        return A

    def matrix(self, local: list[np.ndarray]) -> sp.csr_matrix:
        return self.csr(self.matrix_data(local))

    def matrix_from_cells(self, per_cell) -> sp.csr_matrix:
        return self.matrix(self.stack(per_cell))

    def vector(self, local: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.n_free)
        for g, r in zip(self.groups, local):
            out += np.bincount(g.gidx.ravel(), weights=(g.coef * r).ravel(), minlength=self.n_free)
        return out

    def vector_from_cells(self, per_cell) -> np.ndarray:
        return self.vector(self.stack(per_cell))

    def gather(self, free: np.ndarray) -> list[np.ndarray]:
        """Local DoF vectors of a free-DoF state, in group layout."""
        return [g.coef * free[g.gidx] for g in self.groups]

    def reaction(self, free: np.ndarray, jacobian: bool = True):
        """Assembled reaction residual and (CSR data of the) Jacobian."""
        res, jac = [], []
        for g, z in zip(self.groups, self.gather(free)):
            r, J = g.batch.reaction(z, jacobian)
            res.append(r)
            jac.append(J)
        return self.vector(res), (self.matrix_data(jac) if jacobian else None)

    def cell_integrals(self, free: np.ndarray):
        """Per-cell ``(int Pi0 c, int psi(Pi0 c), int |Pi0 grad c|^2)`` in mesh cell order."""
        out = np.zeros((3, self.mesh.n_cells))
        for g, z in zip(self.groups, self.gather(free)):
            out[:, g.cells] = np.stack(g.batch.integrals(z))
        return out


def dump_matrix_market(A, path) -> None:
    """Debug dump of a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
