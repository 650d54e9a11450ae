"""Backward Euler in time, Newton for the nonlinear systems, and diagnostics.

Every step solves ``R(c) = M (c - c_old) / tau + L c + a r(c) - F = 0`` where
``M`` is the mass matrix, ``L`` the constant linear operator of the scenario,
``r`` the reaction form and ``F`` a constant source. The constant part of the
Jacobian, ``M / tau + L``, is assembled once; each Newton iteration only adds
the reaction Jacobian on the shared sparsity pattern.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import Assembler

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class NonconvergenceError(SolverError):
    def __init__(self, message: str, history, step: int | None = None):
        super().__init__(message)
        self.history = list(history)
        self.step = step


class DivergenceError(SolverError):
    pass


class FactorizationError(SolverError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


@dataclass
class State:
    c: np.ndarray
    t: float = 0.0
    n: int = 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if not np.all(np.isfinite(self.c)):
            raise ValueError("state has non-finite entries")


@dataclass
class SolveReport:
    newton_its: list = field(default_factory=list)       # per step
    linear_its: list = field(default_factory=list)       # per step, list per Newton iteration
    residual_final: list = field(default_factory=list)   # per step, relative
    substeps: list = field(default_factory=list)         # per step, 1 unless bisected
    wall_time: float = 0.0

    @property
    def average_newton(self) -> float:
        return float(np.mean(self.newton_its)) if self.newton_its else 0.0

    @property
    def total_linear(self) -> int:
        return int(sum(sum(x) for x in self.linear_its))


@dataclass
class SolverOptions:
    tol_rel: float = 1e-6
    abs_floor: float = 1e-14
    max_iters: int = 25
    linear: str = "direct"            # direct | gmres
    preconditioner: str = "bjacobi"   # bjacobi | ilu
    linear_tol: float = 1e-8
    restart: int = 200
    max_linear_iters: int = 2000
    fallback_direct: bool = True
    line_search: bool = False
    # an update this small relative to the state ends the iteration; it
    # catches residuals stuck at the round-off level of large fidelity terms
    step_tol: float = 1e-10
    # a step whose Newton iteration fails is retried as two half steps,
    # recursively up to this depth; 0 disables the retry
    max_bisections: int = 4


@dataclass
class SemilinearProblem:
    """Time-discrete problem on the free DoFs of ``assembler``.

    ``energy_weights = (a, b)`` defines the diagnostic energy
    ``sum_E int a psi(Pi0 c) + (b / 2) |Pi0 grad c|^2``.
    """

    assembler: Assembler
    M: sp.csr_matrix
    L: sp.csr_matrix
    F: np.ndarray
    reaction_coef: float
    tau: float
    energy_weights: tuple = (1.0, 0.0)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        self._K = self.assembler.csr(self.M.data / self.tau + self.L.data)

    @property
    def K(self) -> sp.csr_matrix:
        """Constant part ``M / tau + L`` of the Jacobian."""
        return self._K

    def with_tau(self, tau: float) -> "SemilinearProblem":
        return SemilinearProblem(self.assembler, self.M, self.L, self.F, self.reaction_coef, tau,
                                 self.energy_weights)

    def residual(self, c, c_old, jacobian: bool = True):
        r, jdata = self.assembler.reaction(c, jacobian)
        R = self.M @ (c - c_old) / self.tau + self.L @ c + self.reaction_coef * r - self.F
        if not jacobian:
            return R, None
        J = self.assembler.csr(self._K.data + self.reaction_coef * jdata)
        return R, J

    def mass(self, c) -> float:
        return float(self.assembler.mass_functional @ c)

    def energy(self, c) -> float:
        a, b = self.energy_weights
        _, psi, grad2 = self.assembler.cell_integrals(c)
        return float(a * psi.sum() + 0.5 * b * grad2.sum())


# --------------------------------------------------------------------------
# linear solvers

def _check_zero_rows(A: sp.csr_matrix):
    nnz_row = np.diff(A.indptr)
    absrow = np.bincount(np.repeat(np.arange(A.shape[0]), nnz_row), weights=np.abs(A.data), minlength=A.shape[0])
    zero = np.flatnonzero(absrow == 0.0)
    if len(zero):
        raise FactorizationError(f"matrix is singular: row {zero[0]} is identically zero", int(zero[0]))


def direct_solve(A, b) -> np.ndarray:
    A = sp.csc_matrix(A)
    _check_zero_rows(sp.csr_matrix(A))
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise FactorizationError(f"sparse LU failed: {exc}") from exc
    return lu.solve(np.asarray(b, dtype=float))


class BlockJacobi(spla.LinearOperator):
    """Inverse of the diagonal blocks of ``A`` on a partition of the unknowns.

    Each cell owns the DoFs it touches first (lowest cell index); the blocks
    are the principal submatrices on those sets.
    """

    def __init__(self, A: sp.csr_matrix, blocks: list[np.ndarray]):
        super().__init__(dtype=float, shape=A.shape)
        A = sp.csr_matrix(A)
        self.blocks = blocks
        self.inv = []
        for idx in blocks:
            B = A[idx][:, idx].toarray()
            try:
                self.inv.append(np.linalg.inv(B))
            except np.linalg.LinAlgError:
                self.inv.append(np.linalg.pinv(B))

    def _matvec(self, x):
        x = np.ravel(x)
        y = np.empty_like(x)
        for idx, Binv in zip(self.blocks, self.inv):
            y[idx] = Binv @ x[idx]
        return y


def ownership_blocks(assembler: Assembler) -> list[np.ndarray]:
    owner = np.full(assembler.n_free, -1)
    for c in range(assembler.mesh.n_cells):
        g, coef = assembler.dofmap.local_map(c)
        g = g[coef != 0]
        new = g[owner[g] < 0]
        owner[new] = c
    order = np.argsort(owner, kind="stable")
    splits = np.flatnonzero(np.diff(owner[order])) + 1
    return [b for b in np.split(order, splits) if len(b)]


def linear_solve(A, b, method: str = "direct", tol_rel: float = 1e-8, restart: int = 200,
                 maxiter: int = 2000, preconditioner=None, fallback_direct: bool = True):
    """Solve ``A x = b``; returns ``(x, iterations)``.

    ``method`` is ``direct`` (sparse LU) or ``gmres``. For GMRES,
    ``preconditioner`` is a LinearOperator approximating ``A^{-1}``.
    """
    if method == "direct":
        return direct_solve(A, b), 1
    if method != "gmres":
        raise ValueError(f"unknown linear solver {method!r}")
    its = [0]

    def count(_):
        its[0] += 1

    x, info = spla.gmres(A, b, rtol=tol_rel, atol=0.0, restart=restart, maxiter=max(1, maxiter // restart),
                         M=preconditioner, callback=count, callback_type="pr_norm")
    if info != 0:
        if not fallback_direct:
            raise SolverError(f"GMRES did not reach rtol={tol_rel} within {its[0]} iterations")
        log.warning("GMRES stagnated after %d iterations, falling back to direct solve", its[0])
        return direct_solve(A, b), its[0]
    return x, its[0]


def make_preconditioner(A, kind: str, assembler: Assembler | None = None, blocks=None):
    if kind == "bjacobi":
        if blocks is None:
            blocks = ownership_blocks(assembler)
        return BlockJacobi(A, blocks)
    if kind == "ilu":
        ilu = spla.spilu(sp.csc_matrix(A), drop_tol=0.0, fill_factor=1.0)
        return spla.LinearOperator(A.shape, matvec=ilu.solve, dtype=float)
    if kind == "none":
        return None
    raise ValueError(f"unknown preconditioner {kind!r}")


# --------------------------------------------------------------------------
# Newton

def newton_solve(problem: SemilinearProblem, c_old: np.ndarray, guess: np.ndarray | None = None,
                 options: SolverOptions | None = None, blocks=None):
    """Newton iteration on one backward Euler step.

    Returns ``(c, its, linear_its, relative_residual)``. Stops at the first
    iterate with ``|R| <= tol_rel * |R_0|`` or with an update below
    ``step_tol * |c|``, and immediately if ``|R_0| < abs_floor``.
    """
    opt = options or SolverOptions()
    c = np.array(c_old if guess is None else guess, dtype=float)
    R, J = problem.residual(c, c_old)
    r0 = float(np.linalg.norm(R))
    if not np.isfinite(r0):
        raise DivergenceError("initial residual is not finite")
    history = [r0]
    lin_its = []
    if r0 < opt.abs_floor:
        return c, 0, lin_its, 0.0
    for it in range(1, opt.max_iters + 1):
        if J is None:
            _, J = problem.residual(c, c_old)
        if opt.linear == "direct":
            dc, li = linear_solve(J, -R)
        else:
            P = make_preconditioner(J, opt.preconditioner, problem.assembler, blocks)
            dc, li = linear_solve(J, -R, "gmres", opt.linear_tol, opt.restart, opt.max_linear_iters, P,
                                  opt.fallback_direct)
        lin_its.append(li)
        step = 1.0
        c_new = c + dc
        R, _ = problem.residual(c_new, c_old, jacobian=False)
        rn = float(np.linalg.norm(R))
        if opt.line_search:
            halvings = 0
            while (not np.isfinite(rn) or rn > history[-1]) and halvings < 8:
                step *= 0.5
                halvings += 1
                c_new = c + step * dc
                R, _ = problem.residual(c_new, c_old, jacobian=False)
                rn = float(np.linalg.norm(R))
        c = c_new
        J = None
        history.append(rn)
        if not np.isfinite(rn):
            raise DivergenceError(f"residual became non-finite at Newton iteration {it}")
        if rn <= opt.tol_rel * r0 or rn < opt.abs_floor:
            return c, it, lin_its, rn / r0
        if step * np.linalg.norm(dc) <= opt.step_tol * max(1.0, np.linalg.norm(c)):
            return c, it, lin_its, rn / r0
    raise NonconvergenceError(
        f"Newton did not converge in {opt.max_iters} iterations (relative residual {history[-1] / r0:.3e})",
        history,
    )


@dataclass
class DiagnosticsRow:
    step: int
    time: float
    mass: float
    energy: float
    newton_its: int
    linear_its_total: int
    residual_final: float


def advance(problem: SemilinearProblem, c_old: np.ndarray, options: SolverOptions, blocks=None, depth: int = 0):
    """One backward Euler step of size ``problem.tau``.

    If Newton fails, the step is replaced by two steps of half size (at most
    ``options.max_bisections`` levels deep). Returns
    ``(c, newton_its, linear_its, relative_residual, substeps)``.
    """
    try:
        c, its, lin, rel = newton_solve(problem, c_old, options=options, blocks=blocks)
        return c, its, lin, rel, 1
    except (NonconvergenceError, DivergenceError):
        if depth >= options.max_bisections:
            raise
    half = problem.with_tau(0.5 * problem.tau)
    log.info("Newton failed with tau=%.3e, retrying as two steps of %.3e", problem.tau, half.tau)
    c1, i1, l1, _, s1 = advance(half, c_old, options, blocks, depth + 1)
    c2, i2, l2, r2, s2 = advance(half, c1, options, blocks, depth + 1)
    return c2, i1 + i2, l1 + l2, r2, s1 + s2


def run_time_loop(problem: SemilinearProblem, initial: State, n_steps: int,
                  options: SolverOptions | None = None,
                  callbacks: list[Callable[[State, DiagnosticsRow], None]] = ()):
    """March ``n_steps`` backward Euler steps from ``initial``.

    Returns ``(final_state, rows, report)``; ``rows[0]`` describes the
    initial state. Each callback is invoked after every row is produced,
    including the initial one.
    """
    opt = options or SolverOptions()
    t0 = time.perf_counter()
    state = State(initial.c.copy(), initial.t, initial.n)
    report = SolveReport()
    rows = [DiagnosticsRow(state.n, state.t, problem.mass(state.c), problem.energy(state.c), 0, 0, 0.0)]
    for cb in callbacks:
        cb(state, rows[-1])
    blocks = ownership_blocks(problem.assembler) if opt.linear == "gmres" and opt.preconditioner == "bjacobi" else None
    for _ in range(n_steps):
        step = state.n + 1
        try:
            c, its, lin, rel, nsub = advance(problem, state.c, opt, blocks)
        except NonconvergenceError as exc:
            raise NonconvergenceError(f"step {step}: {exc}", exc.history, step) from exc
        except SolverError as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        state = State(c, initial.t + problem.tau * (step - initial.n), step)
        report.newton_its.append(its)
        report.linear_its.append(lin)
        report.residual_final.append(rel)
        report.substeps.append(nsub)
        rows.append(DiagnosticsRow(state.n, state.t, problem.mass(c), problem.energy(c), its, int(sum(lin)), rel))
        for cb in callbacks:
            cb(state, rows[-1])
    report.wall_time = time.perf_counter() - t0
    return state, rows, report
