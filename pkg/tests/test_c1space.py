import numpy as np
import pytest

from c1vem.c1space import (
    DofKind,
    DofLayout,
    ElementError,
    LocalSpace,
    UnsupportedOrder,
    _solve_refined,
    build_dof_layout,
    global_dof_count,
    interpolate,
    local_dofs,
    trace_normal_derivative_on_edge,
    trace_value_on_edge,
)
from c1vem.polymesh import PolyMesh, make_mesh, make_quad_mesh
from c1vem.polyquad import element_quadrature, gauss_legendre_01

PENTAGON = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.6], [0.4, 1.0], [0.0, 0.7]])


def pentagon_mesh():
    # the pentagon plus the two triangles closing the unit square
    v = np.vstack([PENTAGON, [1.0, 1.0], [0.0, 1.0]])
    return PolyMesh.from_cells(v, [[0, 1, 2, 3, 4], [2, 5, 3], [4, 3, 6]])


@pytest.fixture(scope="module")
def spaces():
    out = []
    for fam, n in (("quad", 3), ("tri", 3), ("cvt", 5)):
        m = make_mesh(fam, n, seed=5)
        for k in (2, 3):
            out += [LocalSpace(m, c, k) for c in range(min(m.n_cells, 12))]
    m = pentagon_mesh()
    out += [LocalSpace(m, 0, k) for k in (2, 3)]
    return out


def test_layout_counts():
    sq = make_quad_mesh(2)
    assert build_dof_layout(sq, 0, 2).n_dofs == 12
    tri = make_mesh("tri", 2)
    assert build_dof_layout(tri, 0, 3).n_dofs == 12
    assert DofLayout.local_count(2, 4) == 12
    assert DofLayout.local_count(3, 3) == 12
    kinds = [d.kind for d in build_dof_layout(tri, 0, 3).descriptors]
    assert kinds[:3] == [DofKind.VERTEX_VALUE, DofKind.VERTEX_GRAD_X1, DofKind.VERTEX_GRAD_X2]
    assert kinds[-1] == DofKind.EDGE_NORMAL_DERIV


def test_global_count_quad128():
    m = make_quad_mesh(128)
    assert global_dof_count(m.n_vertices, m.n_edges, m.n_cells, 2) == 49923


@pytest.mark.parametrize("k", [1, 4, 5])
def test_unsupported_orders(k):
    with pytest.raises(UnsupportedOrder):
        LocalSpace(make_quad_mesh(2), 0, k)


def test_singular_local_system_names_cell():
    with pytest.raises(ElementError, match="cell 7"):
        _solve_refined(np.zeros((3, 3)), np.eye(3), 7, "test")


# --------------------------------------------------------------------------
# traces

def _space(k=2):
    return LocalSpace(pentagon_mesh(), 0, k)


def test_constant_trace():
    S = _space()
    d = S.poly_dofs(np.eye(S.np_)[0])
    for i in range(S.nv):
        assert np.allclose(trace_value_on_edge(S, d, i).coef, [1, 0, 0, 0], atol=1e-14)


def test_linear_trace_on_horizontal_edge():
    S = _space()
    coef = np.zeros(S.np_)
    coef[1] = S.h  # m_(1,0) * h = x - x_E
    d = S.poly_dofs(coef)
    p = trace_value_on_edge(S, d, 0)  # edge 0 runs along y = 0 in +x direction
    assert p.deriv()(0.3) == pytest.approx(1.0)
    assert p.deriv(2)(0.3) == pytest.approx(0.0, abs=1e-12)


def test_hermite_trace_against_dense_cubic_fit():
    S = _space()
    rng = np.random.default_rng(1)
    d = rng.standard_normal(S.nd)
    for i in range(S.nv):
        j = (i + 1) % S.nv
        L = S.edge_len[i]
        t = S.tangent[i]
        va, vb = d[3 * i], d[3 * j]
        sa = t @ d[3 * i + 1:3 * i + 3] / S.vertex_h[i]
        sb = t @ d[3 * j + 1:3 * j + 3] / S.vertex_h[j]
        V = np.array([[1, 0, 0, 0], [1, L, L ** 2, L ** 3], [0, 1, 0, 0], [0, 1, 2 * L, 3 * L ** 2]])
        coef = np.linalg.solve(V, [va, vb, sa, sb])
        p = trace_value_on_edge(S, d, i)
        s = np.linspace(0, L, 4)
        assert np.allclose(p(s), np.polyval(coef[::-1], s), atol=1e-13)


def test_normal_trace_of_linear_function():
    S = _space()
    coef = np.zeros(S.np_)
    coef[1] = S.h
    d = S.poly_dofs(coef)
    # edge 1 is the vertical side x = 1 with outward normal (1, 0)
    assert np.allclose(trace_normal_derivative_on_edge(S, d, 1).coef, [1, 0], atol=1e-13)
    assert np.allclose(trace_normal_derivative_on_edge(S, d, 0).coef, [0, 0], atol=1e-13)


def test_k3_normal_trace_against_quadratic_fit():
    S = _space(3)
    rng = np.random.default_rng(2)
    d = rng.standard_normal(S.nd)
    for i in range(S.nv):
        j = (i + 1) % S.nv
        L = S.edge_len[i]
        n = S.normal[i]
        vals = [n @ d[3 * i + 1:3 * i + 3] / S.vertex_h[i], d[3 * S.nv + i] / L, n @ d[3 * j + 1:3 * j + 3] / S.vertex_h[j]]
        fit = np.polyfit([0, L / 2, L], vals, 2)
        s = np.linspace(0, L, 5)
        assert np.allclose(trace_normal_derivative_on_edge(S, d, i)(s), np.polyval(fit, s), atol=1e-12)


# --------------------------------------------------------------------------
# projectors

def _poly_values(S, coef, points, order):
    return np.tensordot(S.basis.evaluate(points, order), coef, axes=(1, 0))


def test_polynomial_reproduction(spaces):
    for S in spaces:
        I = np.eye(S.np_)
        scale = max(1.0, np.abs(S.D).max())
        assert np.abs(S.P_D2 @ S.D - I).max() < 1e-11 * scale
        assert S.P_0 is S.P_D2
        for a in range(S.np_):
            d = S.D[:, a]
            g = S.projected_gradient(d)
            assert np.allclose(g, _poly_values(S, I[a], S.quad.points, 1), atol=1e-11 / S.h)
            H = S.projected_hessian(d)
            ex = _poly_values(S, I[a], S.quad.points, 2)
            psi = S.phi_q[:, :S.nh]
            for c, (r, s) in enumerate(((0, 0), (0, 1), (1, 1))):
                assert np.allclose(psi @ H[c], ex[:, r, s], atol=1e-11 / S.h ** 2)


def test_projector_idempotence(spaces):
    for S in spaces:
        assert np.allclose(S.P_D2 @ S.D @ S.P_D2, S.P_D2, atol=1e-12 * max(1, np.abs(S.P_D2).max()))


def test_constant_projects_to_constant():
    S = _space()
    d = np.zeros(S.nd)
    d[0:3 * S.nv:3] = 1.0
    assert np.allclose(S.P_D2 @ d, np.eye(S.np_)[0], atol=1e-13)
    assert np.allclose(S.G_0 @ d, 0.0, atol=1e-12)


def test_gradient_of_m10():
    S = _space()
    G = S.G_0 @ S.D[:, 1]
    assert np.allclose(G[0], np.eye(S.ng)[0] / S.h, atol=1e-12)
    assert np.allclose(G[1], 0.0, atol=1e-12)


def test_hessian_of_m20():
    S = LocalSpace(make_quad_mesh(2), 0, 2)
    H = S.projected_hessian(S.D[:, 3])
    assert np.allclose(H[:, 0], [2 / S.h ** 2, 0, 0], atol=1e-12)
    lin = S.D @ np.array([0.3, -1.2, 0.7, 0, 0, 0])
    assert np.allclose(S.projected_hessian(lin), 0.0, atol=1e-12)


def _edge_data(S, d, npts=12):
    """Independent boundary samples from the trace polynomials."""
    s01, w01 = gauss_legendre_01(npts)
    for i in range(S.nv):
        L = S.edge_len[i]
        s = s01 * L
        a = S.xy[i]
        pts = a + np.outer(s01, S.xy[(i + 1) % S.nv] - a)
        v = trace_value_on_edge(S, d, i)
        dn = trace_normal_derivative_on_edge(S, d, i)
        grad = np.outer(v.deriv()(s), S.tangent[i]) + np.outer(dn(s), S.normal[i])
        yield pts, w01 * L, v(s), grad, S.normal[i]


@pytest.mark.parametrize("k", [2, 3])
def test_pi_d2_matches_kkt_oracle(k):
    S = _space(k)
    rng = np.random.default_rng(3)
    d = rng.standard_normal(S.nd)
    q = element_quadrature(S.xy, 20)
    Hq = S.basis.evaluate(q.points, 2)
    G = np.einsum("q,qaij,qbij->ab", q.weights, Hq, Hq)
    b = np.zeros(S.np_)
    C = np.zeros((3, S.np_))
    e = np.zeros(3)
    for pts, w, v, grad, n in _edge_data(S, d):
        Hn = S.basis.evaluate(pts, 2) @ n
        b += np.einsum("q,qai,qi->a", w, Hn, grad)
        b -= np.einsum("q,qa,q->a", w, S.basis.grad_laplacian(pts) @ n, v)
        C[0] += w @ S.basis.evaluate(pts, 0)
        C[1:] += np.einsum("q,qac->ca", w, S.basis.evaluate(pts, 1))
        e[0] += w @ v
        e[1:] += w @ grad
    # minimise 1/2 p'Gp - b'p subject to C p = e
    K = np.block([[G, C.T], [C, np.zeros((3, 3))]])
    sol = np.linalg.solve(K, np.concatenate([b, e]))
    assert np.allclose(S.P_D2 @ d, sol[:S.np_], atol=1e-10 * np.abs(sol).max())


@pytest.mark.parametrize("k", [2, 3])
def test_pi0_moments_match_boundary_oracle(k):
    S = _space(k)
    d = np.random.default_rng(4).standard_normal(S.nd)
    q = element_quadrature(S.xy, 20, center=S.center)
    phi = S.basis.evaluate(q.points, 0)
    lhs = q.integrate(phi * (phi @ (S.P_0 @ d))[:, None])
    ref = q.integrate(phi * (phi @ (S.P_D2 @ d))[:, None])
    assert np.allclose(lhs, ref, atol=1e-13)


@pytest.mark.parametrize("k", [2, 3])
def test_pi0_grad_against_high_order_quadrature(k):
    S = _space(k)
    d = np.random.default_rng(5).standard_normal(S.nd)
    q = element_quadrature(S.xy, 20, center=S.center)
    phi = S.basis.evaluate(q.points, 0)
    dphi = S.basis.evaluate(q.points, 1)
    Mg = q.integrate(phi[:, :S.ng, None] * phi[:, None, :S.ng])
    pv = phi @ (S.P_0 @ d)
    for c in range(2):
        rhs = -q.integrate(dphi[:, :S.ng, c] * pv[:, None])
        for pts, w, v, grad, n in _edge_data(S, d):
            rhs += n[c] * (w * v) @ S.basis.evaluate(pts, 0)[:, :S.ng]
        assert np.allclose(S.G_0[c] @ d, np.linalg.solve(Mg, rhs), atol=1e-11)


def test_pi0_hess_against_boundary_quadrature_k2_square():
    m = make_quad_mesh(2)
    S = LocalSpace(m, 0, 2)
    d = np.random.default_rng(6).standard_normal(S.nd)
    H = S.projected_hessian(d)
    area = S.area
    ref = np.zeros(3)
    for pts, w, v, grad, n in _edge_data(S, d):
        ref[0] += n[0] * w @ grad[:, 0]
        ref[2] += n[1] * w @ grad[:, 1]
        ref[1] += 0.5 * w @ (n[1] * grad[:, 0] + n[0] * grad[:, 1])
    assert np.allclose(H[:, 0], ref / area, atol=1e-12)


# --------------------------------------------------------------------------
# interpolation and conformity

def test_interpolate_constant():
    m = make_mesh("cvt", 4, seed=1)
    for k in (2, 3):
        u = interpolate(lambda p: (np.ones(len(p)), np.zeros((len(p), 2))), m, k)
        assert np.all(u[0:3 * m.n_vertices:3] == 1)
        mask = np.ones(len(u), dtype=bool)
        mask[0:3 * m.n_vertices:3] = False
        assert np.all(u[mask] == 0)


@pytest.mark.parametrize("k", [2, 3])
def test_interpolated_polynomials_are_recovered(k):
    m = make_mesh("cvt", 4, seed=8)
    def f(p):
        x, y = p.T
        val = 1 + x - 2 * y + x * y + 0.5 * x ** 2 + (0.3 * x ** 3 - y ** 2 * x if k == 3 else 0)
        gx = 1 + y + x + (0.9 * x ** 2 - y ** 2 if k == 3 else 0)
        gy = -2 + x + (-2 * x * y if k == 3 else 0)
        return val, np.column_stack([gx, gy])
    full = interpolate(f, m, k)
    for c in range(m.n_cells):
        S = LocalSpace(m, c, k)
        vals = S.phi_q @ (S.P_D2 @ local_dofs(m, c, k, full))
        assert np.allclose(vals, f(S.quad.points)[0], atol=1e-12)


def _l2_and_h2_errors(n):
    m = make_quad_mesh(n)
    pi = np.pi
    def f(p):
        x, y = p.T
        return np.cos(pi * x) * np.cos(pi * y), np.column_stack(
            [-pi * np.sin(pi * x) * np.cos(pi * y), -pi * np.cos(pi * x) * np.sin(pi * y)])
    full = interpolate(f, m, 2)
    e0 = e2 = 0.0
    for c in range(m.n_cells):
        S = LocalSpace(m, c, 2)
        q = element_quadrature(S.xy, 12, center=S.center)
        phi = S.basis.evaluate(q.points, 0)
        d = local_dofs(m, c, 2, full)
        x, y = q.points.T
        e0 += q.integrate((phi @ (S.P_0 @ d) - np.cos(pi * x) * np.cos(pi * y)) ** 2)
        H = S.projected_hessian(d)[:, 0]
        hxx = -pi ** 2 * np.cos(pi * x) * np.cos(pi * y)
        hxy = pi ** 2 * np.sin(pi * x) * np.sin(pi * y)
        e2 += q.integrate((H[0] - hxx) ** 2 + 2 * (H[1] - hxy) ** 2 + (H[2] - hxx) ** 2)
    return np.sqrt(e0), np.sqrt(e2)


def test_interpolation_convergence_rates():
    errs = np.array([_l2_and_h2_errors(n) for n in (8, 16, 32)])
    rates = np.log2(errs[:-1] / errs[1:])
    assert np.all(rates[:, 0] >= 2.8)
    assert np.all(rates[:, 1] >= 0.9)


@pytest.mark.parametrize("k", [2, 3])
def test_shared_edges_have_identical_traces(k):
    m = make_mesh("cvt", 5, seed=9)
    full = np.random.default_rng(7).standard_normal(global_dof_count(m.n_vertices, m.n_edges, m.n_cells, k))
    spaces = [LocalSpace(m, c, k) for c in range(m.n_cells)]
    s01 = np.linspace(0, 1, 5)
    for e in np.flatnonzero(m.edge_cells[:, 1] >= 0):
        samples = []
        for c in m.edge_cells[e]:
            S = spaces[c]
            i = int(np.flatnonzero(m.cell_edges[c] == e)[0])
            d = local_dofs(m, c, k, full)
            L = S.edge_len[i]
            s = s01 * L
            # orient every sample from edges[e, 0] to edges[e, 1]
            forward = m.cells[c][i] == m.edges[e, 0]
            s = s if forward else L - s
            v = trace_value_on_edge(S, d, i)
            dn = trace_normal_derivative_on_edge(S, d, i)
            sign = 1.0 if forward else -1.0
            # the normal derivative is also measured against the reference normal
            samples.append((v(s), sign * v.deriv()(s), sign * dn(s)))
        a, b = samples
        assert np.allclose(a[0], b[0], atol=1e-12)
        assert np.allclose(a[1], b[1], atol=1e-10)
        assert np.allclose(a[2], b[2], atol=1e-10)
