import numpy as np
import pytest
import scipy.sparse as sp

from c1vem.assembly import Assembler
from c1vem.c1space import interpolate
from c1vem.polymesh import make_quad_mesh
from c1vem.scenarios import ProblemConfig, build_ach_problem, make_initial_datum
from c1vem.timesolver import (
    BlockJacobi,
    FactorizationError,
    NonconvergenceError,
    SemilinearProblem,
    SolverOptions,
    State,
    advance,
    direct_solve,
    linear_solve,
    make_preconditioner,
    newton_solve,
    ownership_blocks,
    run_time_loop,
)


def _smooth(amp=0.5, base=0.0):
    def fn(p):
        x, y = p.T
        v = base + amp * np.cos(np.pi * x) * np.cos(np.pi * y)
        g = np.column_stack([-amp * np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
                             -amp * np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)])
        return v, g
    return fn


def _pure_ch(n, **kw):
    cfg = ProblemConfig(variant="ACH", convection=False, n=n, **kw)
    mesh = make_quad_mesh(n)
    asm = Assembler(mesh, cfg.k)
    return cfg, mesh, asm, build_ach_problem(cfg, asm)


@pytest.fixture(scope="module")
def small():
    return _pure_ch(8)


@pytest.fixture(scope="module")
def cross32():
    cfg, mesh, asm, prob = _pure_ch(32)
    return prob, asm.dofmap.restrict(make_initial_datum(cfg, mesh))


# --------------------------------------------------------------------------
# linear algebra

def test_identity_solve():
    b = np.arange(5.0)
    assert np.array_equal(direct_solve(sp.identity(5, format="csr"), b), b)
    x, its = linear_solve(sp.identity(5, format="csr"), b, "gmres")
    assert np.allclose(x, b)


def test_zero_row_is_reported():
    A = sp.csr_matrix(np.array([[1.0, 0, 0], [0, 0, 0], [0, 1.0, 2.0]]))
    with pytest.raises(FactorizationError, match="row 1") as info:
        direct_solve(A, np.ones(3))
    assert info.value.row == 1


def test_unknown_linear_method():
    with pytest.raises(ValueError):
        linear_solve(sp.identity(2, format="csr"), np.ones(2), "cg")


@pytest.mark.parametrize("kind", ["bjacobi", "ilu", "none"])
def test_gmres_agrees_with_direct(small, kind):
    _, _, asm, prob = small
    K = prob.K
    b = np.random.default_rng(0).standard_normal(asm.n_free)
    xd = direct_solve(K, b)
    P = make_preconditioner(K, kind, asm)
    xg, its = linear_solve(K, b, "gmres", 1e-10, preconditioner=P, fallback_direct=False)
    assert np.linalg.norm(xg - xd) <= 1e-7 * np.linalg.norm(xd)
    assert its >= 1


def test_ownership_blocks_partition_the_unknowns(small):
    _, _, asm, prob = small
    blocks = ownership_blocks(asm)
    allidx = np.sort(np.concatenate(blocks))
    assert np.array_equal(allidx, np.arange(asm.n_free))
    P = BlockJacobi(prob.K, blocks)
    # exact on a block diagonal matrix
    D = sp.block_diag([prob.K[b][:, b] for b in blocks]).tocsr()
    perm = np.concatenate(blocks)
    x = np.random.default_rng(1).standard_normal(asm.n_free)
    y = np.empty_like(x)
    y[perm] = D @ x[perm]
    assert np.allclose(P.matvec(y), x)


# --------------------------------------------------------------------------
# Newton

def test_linear_problem_converges_in_one_iteration(small):
    _, mesh, asm, prob = small
    lin = SemilinearProblem(asm, prob.M, prob.L, np.ones(asm.n_free), 0.0, prob.tau)
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    _, its, _, rel = newton_solve(lin, c0)
    assert its == 1 and rel <= 1e-6


def test_converged_guess_takes_no_iterations(small):
    _, mesh, asm, prob = small
    c = 0.7 * asm.dofmap.restrict(interpolate(_smooth(0.0, 1.0), mesh, 2))
    out, its, _, _ = newton_solve(prob, c)
    assert its == 0 and np.array_equal(out, c)


def test_nonconvergence_carries_history(small):
    _, mesh, asm, prob = small
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    with pytest.raises(NonconvergenceError) as info:
        newton_solve(prob, c0, options=SolverOptions(max_iters=1, tol_rel=1e-30))
    assert len(info.value.history) == 2


def test_failed_step_is_bisected():
    _, mesh, asm, prob = _pure_ch(8, gamma=0.1, Pe=1.0)
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    opt = SolverOptions(max_iters=3)
    big = prob.with_tau(0.05)
    with pytest.raises(NonconvergenceError):
        advance(big, c0, SolverOptions(max_iters=3, max_bisections=0))
    c, its, _, _, substeps = advance(big, c0, opt)
    assert substeps > 1
    # the bisected step matches the same substeps taken explicitly
    h = big.with_tau(big.tau / substeps)
    ref = c0
    for _ in range(substeps):
        ref, *_ = newton_solve(h, ref, options=SolverOptions(tol_rel=1e-12))
    assert np.linalg.norm(c - ref) <= 1e-4 * np.linalg.norm(ref)


def test_first_cross_step_is_cheap(cross32):
    prob, c0 = cross32
    _, its, _, _ = newton_solve(prob, c0)
    assert its <= 5


# --------------------------------------------------------------------------
# time loop

def test_zero_steps_returns_initial_state(small):
    _, mesh, asm, prob = small
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    st, rows, rep = run_time_loop(prob, State(c0), 0)
    assert np.array_equal(st.c, c0) and st.n == 0
    assert len(rows) == 1 and rep.newton_its == []


def test_pure_ch_conserves_mass(cross32):
    prob, c0 = cross32
    _, rows, rep = run_time_loop(prob, State(c0), 10)
    m0 = rows[0].mass
    assert all(abs(r.mass - m0) <= 1e-9 * abs(m0) for r in rows)
    assert rows[-1].step == 10 and rows[-1].time == pytest.approx(10 * prob.tau)


def test_energy_does_not_increase():
    _, mesh, asm, prob = _pure_ch(16)
    c0 = asm.dofmap.restrict(interpolate(_smooth(0.05, 0.1), mesh, 2))
    _, rows, _ = run_time_loop(prob, State(c0), 50)
    e = np.array([r.energy for r in rows])
    assert np.all(np.diff(e) <= 1e-12 * abs(e[0]))
    assert e[-1] < e[0]


def test_callbacks_see_every_row(small):
    _, mesh, asm, prob = small
    seen = []
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    run_time_loop(prob, State(c0), 3, callbacks=[lambda s, r: seen.append((s.n, r.step))])
    assert seen == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_first_order_in_time():
    cfg = ProblemConfig(variant="ACH", gamma=0.1, Pe=1.0, convection=False, n=8)
    mesh = make_quad_mesh(8)
    asm = Assembler(mesh, 2)
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    T = 0.02

    def final(n):
        prob = build_ach_problem(cfg.replace(tau=T / n), asm)
        return run_time_loop(prob, State(c0), n)[0].c

    ref = final(256)
    e4, e8 = (np.linalg.norm(final(n) - ref) for n in (4, 8))
    assert 1.7 <= e4 / e8 <= 2.3


def test_gmres_time_loop_matches_direct(small):
    _, mesh, asm, prob = small
    c0 = asm.dofmap.restrict(interpolate(_smooth(), mesh, 2))
    a = run_time_loop(prob, State(c0), 3)[0].c
    b = run_time_loop(prob, State(c0), 3, SolverOptions(linear="gmres"))[0].c
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_state_rejects_nan():
    with pytest.raises(ValueError):
        State(np.array([0.0, np.nan]))
