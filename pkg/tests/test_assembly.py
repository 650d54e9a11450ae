import copy

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from c1vem.assembly import CORNER, INTERIOR, Assembler, AssemblyError, build_global_map, dump_matrix_market
from c1vem.c1space import LocalSpace, interpolate, trace_normal_derivative_on_edge
from c1vem.polymesh import Region, make_cvt_mesh, make_mesh, make_quad_mesh, tag_inpainting_region
from c1vem.scenarios import ProblemConfig, build_ach_problem, build_chi_problem


def test_quad_n2_counts():
    dm = build_global_map(make_quad_mesh(2), 2)
    assert dm.n_full == 27
    assert len(dm.constrained) == 12
    assert dm.n_free == 15
    assert (dm.vertex_frame == CORNER).sum() == 4
    assert (dm.vertex_frame == INTERIOR).sum() == 1


def test_quad128_unconstrained_count():
    assert build_global_map(make_quad_mesh(128), 2).n_full == 49923


def test_k3_constrains_boundary_edges():
    m = make_quad_mesh(3)
    dm = build_global_map(m, 3)
    assert dm.n_full == 3 * m.n_vertices + m.n_edges
    edge_fixed = dm.full_to_free[3 * m.n_vertices:] < 0
    assert np.array_equal(edge_fixed, m.boundary_edge)


def test_shared_dofs_map_to_same_global_index():
    m = make_mesh("cvt", 5, seed=1)
    dm = build_global_map(m, 3)
    owner = {}
    for c, loop in enumerate(m.cells):
        full = dm.cell_full[c]
        for i, v in enumerate(loop):
            for comp in range(3):
                key = ("v", int(v), comp)
                assert owner.setdefault(key, full[3 * i + comp]) == full[3 * i + comp]
        for j, e in enumerate(m.cell_edges[c]):
            key = ("e", int(e))
            assert owner.setdefault(key, full[3 * len(loop) + j]) == full[3 * len(loop) + j]


def test_open_interior_edge_is_rejected():
    m = copy.deepcopy(make_quad_mesh(2))
    e = int(np.flatnonzero(~m.boundary_edge)[0])
    m.edge_cells[e, 1] = -1
    with pytest.raises(AssemblyError, match=f"interior edge {e}"):
        build_global_map(m, 2)


@pytest.mark.parametrize("k", [2, 3])
def test_neumann_condition_holds_on_boundary_edges(k):
    # any free vector gives a discrete function with zero normal derivative on the boundary
    m = make_mesh("cvt", 4, seed=2)
    asm = Assembler(m, k)
    rng = np.random.default_rng(0)
    c = rng.uniform(-1, 1, asm.n_free)
    for e in np.flatnonzero(m.boundary_edge):
        cell = int(m.edge_cells[e, 0])
        s = asm.spaces[cell]
        i = int(np.flatnonzero(m.cell_edges[cell] == e)[0])
        dn = trace_normal_derivative_on_edge(s, asm.dofmap.local_values(c, cell), i)
        assert np.abs(dn.coef).max() <= 1e-12


def _ach(mesh, k=2, **kw):
    cfg = ProblemConfig(variant="ACH", n=2, k=k, **kw)
    asm = Assembler(mesh, k)
    return asm, build_ach_problem(cfg, asm)


def _fd_check(problem, n, seed):
    rng = np.random.default_rng(seed)
    c_old = rng.uniform(-1, 1, n)
    c = rng.uniform(-1, 1, n)
    _, J = problem.residual(c, c_old)
    J = J.toarray()
    e = 1e-6
    fd = np.empty_like(J)
    for j in range(n):
        d = np.zeros(n)
        d[j] = e
        fd[:, j] = (problem.residual(c + d, c_old, False)[0] - problem.residual(c - d, c_old, False)[0]) / (2 * e)
    return np.abs(J - fd).max() / max(1.0, np.abs(J).max())


@pytest.mark.parametrize("mesh_kind,k", [("quad2", 2), ("quad2", 3), ("cvt20", 2), ("cvt20", 3)])
def test_global_jacobian_by_finite_differences(mesh_kind, k):
    mesh = make_quad_mesh(2) if mesh_kind == "quad2" else make_cvt_mesh(20, seed=4)
    asm, prob = _ach(mesh, k)
    assert _fd_check(prob, asm.n_free, k) <= 1e-5


def test_chi_jacobian_by_finite_differences():
    mesh = tag_inpainting_region(make_quad_mesh(4), lambda p: (p[:, 0] <= 0.5 + 1e-12) & (p[:, 1] <= 0.5 + 1e-12))
    assert (mesh.tags == Region.INSIDE_D).sum() == 4
    cfg = ProblemConfig(variant="CHI", Pe=None, lambda0=50.0, n=4)
    asm = Assembler(mesh, 2)
    f = np.where(mesh.centroid[:, 0] > 0.5, 1.0, -1.0)
    assert _fd_check(build_chi_problem(cfg, asm, f), asm.n_free, 7) <= 1e-5


def test_assembled_matrices_are_symmetric():
    asm, prob = _ach(make_cvt_mesh(20, seed=4), convection=False)
    for A in (prob.M, prob.L):
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    # the pattern is structurally symmetric
    P = prob.K.copy()
    P.data[:] = 1
    assert (P != P.T).nnz == 0


def test_element_order_does_not_change_the_result():
    mesh = make_cvt_mesh(20, seed=4)
    spaces = [LocalSpace(mesh, c, 2) for c in range(mesh.n_cells)]
    a = Assembler(mesh, 2, spaces=spaces)
    b = Assembler(mesh, 2, spaces=spaces, order=np.random.default_rng(1).permutation(mesh.n_cells))
    cfg = ProblemConfig(variant="ACH", n=2)
    pa, pb = build_ach_problem(cfg, a), build_ach_problem(cfg, b)
    assert abs(pa.K - pb.K).max() <= 1e-10 * abs(pa.K).max()
    c = np.random.default_rng(2).uniform(-1, 1, a.n_free)
    assert np.allclose(pa.residual(c, 0 * c, False)[0], pb.residual(c, 0 * c, False)[0], atol=1e-10)


def test_zero_state_has_zero_residual():
    asm, prob = _ach(make_quad_mesh(3))
    z = np.zeros(asm.n_free)
    R, _ = prob.residual(z, z)
    assert np.all(R == 0)


def test_constant_state_is_a_steady_state():
    mesh = make_quad_mesh(3)
    asm, prob = _ach(mesh)
    one = asm.dofmap.restrict(interpolate(lambda p: (np.ones(len(p)), np.zeros((len(p), 2))), mesh, 2))
    R, _ = prob.residual(0.3 * one, 0.3 * one)
    assert np.abs(R).max() <= 1e-12


def test_mass_functional_integrates_interpolated_constants():
    mesh = make_mesh("cvt", 5, seed=3)
    asm = Assembler(mesh, 2)
    one = asm.dofmap.restrict(interpolate(lambda p: (np.ones(len(p)), np.zeros((len(p), 2))), mesh, 2))
    assert asm.mass_functional @ one == pytest.approx(1.0, rel=1e-12)


def test_matrix_market_dump(tmp_path):
    asm, prob = _ach(make_quad_mesh(2))
    path = tmp_path / "K.mtx"
    dump_matrix_market(prob.K, path)
    back = sp.csr_matrix(scipy.io.mmread(str(path)))
    assert abs(back - prob.K).max() <= 1e-15 * abs(prob.K).max()


def test_pattern_is_shared_between_matrices():
    asm, prob = _ach(make_quad_mesh(3))
    J = prob.residual(np.ones(asm.n_free), np.zeros(asm.n_free))[1]
    for A in (prob.M, prob.L, prob.K, J):
        assert A.indices is asm.indices or np.array_equal(A.indices, asm.indices)
        assert np.array_equal(A.indptr, asm.indptr)
