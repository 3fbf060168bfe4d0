"""Sparse nonlinear programming: problem seam, derivatives and an SQP solver.

The :class:`NlpProblem` container is the bridge contract between transcribed
optimal control problems and any NLP solver, built-in or third-party.  An
adapter needs nothing beyond the fields documented there: batched callbacks
for cost and constraints, box bounds, declared Jacobian sparsity, and the
:func:`derive` provider for exact first derivatives.

Derivatives are exact, not finite-differenced: callbacks are evaluated with
imaginary-seeded inputs, which propagates forward-mode directional
derivatives through the very same code paths that compute the values
(imaginary parts act as the dual part of a dual number for these analytic
kernels).  Seeds are grouped by a greedy distance-2 coloring of the declared
sparsity pattern so one batched evaluation yields many Jacobian columns.

The built-in solver is a line-search SQP: quadratic subproblems with the
exact constraint linearization, an l1 merit function, Powell-damped BFGS
curvature (or the problem's exact cost Hessian when it declares one), bounds
handled by a primal active-set loop, and an elastic relaxation that keeps
the step computation well posed when the linearized constraints degenerate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, EvaluationFailure

__all__ = [
    "DerivativeProvider",
    "JacobianNonzeros",
    "NlpProblem",
    "SolveOptions",
    "SolveReport",
    "count_nonzeros",
    "derive",
    "kkt_residual",
    "solve",
]

_CS_STEP = 1e-150


@dataclass
class NlpProblem:
    """A smooth NLP: min cost(x) s.t. eq(x) = 0, ineq(x) <= 0, lb <= x <= ub.

    All callbacks are batched: they take (B, n) arrays and return (B,) for
    the cost or (B, m) for constraints.  They must be dtype-generic so that
    complex-seeded evaluation yields exact directional derivatives, and may
    raise :class:`EvaluationFailure` at points where they cannot be
    evaluated (the solver backs off rather than aborting).

    Attributes:
        n: Number of decision variables.
        cost: Batched objective callback.
        eq: Batched equality-constraint callback, or None.
        ineq: Batched inequality-constraint callback (<= 0 convention), or None.
        n_eq, n_ineq: Row counts of the two constraint blocks.
        lb, ub: Bounds, (n,) arrays; infinities allowed.
        x0: Default starting point.
        eq_pattern: (rows, cols) integer arrays declaring every position the
            equality Jacobian can touch.
        ineq_pattern: Same for the inequality Jacobian.
        cost_hessian: Optional exact, constant cost Hessian (sparse) used as
            the curvature model instead of quasi-Newton updates.
        curvature_blocks: Optional tuple of integer index arrays declaring a
            partially separable structure: the constraint-curvature part of
            the Lagrangian Hessian is block-diagonal over these variable
            groups (groups may overlap).  When present the solver layers
            partitioned quasi-Newton corrections over the exact cost Hessian,
            which keeps the curvature model sparse on large problems.
        name: Identifier used in reports.
    """

    n: int
    cost: Callable
    eq: Callable | None = None
    ineq: Callable | None = None
    n_eq: int = 0
    n_ineq: int = 0
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    x0: np.ndarray | None = None
    eq_pattern: tuple[np.ndarray, np.ndarray] | None = None
    ineq_pattern: tuple[np.ndarray, np.ndarray] | None = None
    cost_hessian: sp.spmatrix | None = None
    curvature_blocks: tuple[np.ndarray, ...] | None = None
    name: str = "nlp"

    def __post_init__(self):
        if self.lb is None:
            self.lb = np.full(self.n, -np.inf)
        if self.ub is None:
            self.ub = np.full(self.n, np.inf)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise DimensionMismatch("bounds must have shape (n,)")
        if self.x0 is None:
            self.x0 = np.clip(np.zeros(self.n), self.lb, self.ub)
        if self.eq is not None and self.eq_pattern is None:
            r, c = np.meshgrid(np.arange(self.n_eq), np.arange(self.n), indexing="ij")
            self.eq_pattern = (r.ravel(), c.ravel())
        if self.ineq is not None and self.ineq_pattern is None:
            r, c = np.meshgrid(np.arange(self.n_ineq), np.arange(self.n), indexing="ij")
            self.ineq_pattern = (r.ravel(), c.ravel())


class JacobianNonzeros(NamedTuple):
    """Nonzero counts of the declared derivative patterns."""

    equality: int
    inequality: int
    hessian: int


def count_nonzeros(problem: NlpProblem) -> JacobianNonzeros:
    """Count declared Jacobian and Hessian-pattern nonzeros.

    Returns:
        (equality, inequality, hessian) nonzero counts; blocks the problem
        does not declare count as zero.
    """
    n_eq = len(problem.eq_pattern[0]) if problem.eq_pattern is not None and problem.eq is not None else 0
    n_in = len(problem.ineq_pattern[0]) if problem.ineq_pattern is not None and problem.ineq is not None else 0
    n_h = problem.cost_hessian.nnz if problem.cost_hessian is not None else 0
    return JacobianNonzeros(equality=n_eq, inequality=n_in, hessian=n_h)


# ---------------------------------------------------------------------------
# coloring and the forward-mode derivative provider
# ---------------------------------------------------------------------------

def _greedy_coloring(rows, cols, n_cols):
    """Distance-2 greedy coloring: columns sharing a row get distinct colors.

    Returns:
        (colors, n_colors): color index per column; columns never touched by
        any row keep color 0 (they produce no Jacobian entries anyway).
    """
    order = np.argsort(np.bincount(cols, minlength=n_cols))[::-1]
    by_row: dict[int, list[int]] = {}
    by_col: dict[int, list[int]] = {}
    for r, c in zip(rows.tolist(), cols.tolist()):
        by_row.setdefault(r, []).append(c)
        by_col.setdefault(c, []).append(r)
    colors = np.zeros(n_cols, dtype=int)
    assigned = np.zeros(n_cols, dtype=bool)
    for c in order:
        c = int(c)
        if c not in by_col:
            assigned[c] = True
            continue
        used = set()
        for r in by_col[c]:
            for c2 in by_row[r]:
                if assigned[c2]:
                    used.add(int(colors[c2]))
        color = 0
        while color in used:
            color += 1
        colors[c] = color
        assigned[c] = True
    return colors, int(colors.max()) + 1 if n_cols else 0


class _ColoredJacobian:
    """Evaluates a sparse Jacobian by color-grouped imaginary seeding."""

    def __init__(self, fn, n, m, pattern):
        self.fn = fn
        self.n = n
        self.m = m
        rows, cols = np.asarray(pattern[0]), np.asarray(pattern[1])
        if rows.size and (rows.max() >= m or cols.max() >= n):
            raise DimensionMismatch("sparsity pattern exceeds the declared shape")
        self.rows, self.cols = rows, cols
        self.colors, self.n_colors = _greedy_coloring(rows, cols, n)
        # per-column row lists for extraction
        order = np.lexsort((rows, cols))
        self._rows_sorted = rows[order]
        self._cols_sorted = cols[order]
        self._col_start = np.searchsorted(self._cols_sorted, np.arange(n + 1))
        self.seed_matrix = np.zeros((max(self.n_colors, 1), n))
        self.seed_matrix[self.colors, np.arange(n)] = 1.0

    def __call__(self, x):
        if self.rows.size == 0:
            return sp.csr_matrix((self.m, self.n))
        X = x[None, :] + 1j * _CS_STEP * self.seed_matrix
        R = np.asarray(self.fn(X))
        if R.shape != (self.seed_matrix.shape[0], self.m):
            raise DimensionMismatch(
                f"constraint callback returned shape {R.shape}, expected ({self.seed_matrix.shape[0]}, {self.m})"
            )
        D = R.imag / _CS_STEP  # (colors, m)
        data = D[self.colors[self._cols_sorted], self._rows_sorted]
        if not np.all(np.isfinite(data)):
            raise EvaluationFailure("constraint Jacobian contains non-finite entries")
        return sp.csr_matrix(
            (data, (self._rows_sorted, self._cols_sorted)), shape=(self.m, self.n)
        )


class DerivativeProvider:
    """Exact first derivatives of an :class:`NlpProblem`.

    Gradients and Jacobians are obtained by forward-mode directional
    differentiation (imaginary seeding) of the problem's own callbacks,
    grouped by a distance-2 coloring of the declared sparsity patterns.
    """

    def __init__(self, problem: NlpProblem):
        self.problem = problem
        self._jac_eq = (
            _ColoredJacobian(problem.eq, problem.n, problem.n_eq, problem.eq_pattern)
            if problem.eq is not None else None
        )
        self._jac_ineq = (
            _ColoredJacobian(problem.ineq, problem.n, problem.n_ineq, problem.ineq_pattern)
            if problem.ineq is not None else None
        )

    @property
    def jacobian_colors(self) -> int:
        """Number of seed groups one equality-Jacobian evaluation needs."""
        return self._jac_eq.n_colors if self._jac_eq is not None else 0

    def gradient(self, x) -> np.ndarray:
        """Exact cost gradient at ``x``."""
        n = self.problem.n
        X = x[None, :] + 1j * _CS_STEP * np.eye(n)
        vals = np.asarray(self.problem.cost(X))
        g = vals.imag / _CS_STEP
        if not np.all(np.isfinite(g)):
            raise EvaluationFailure("cost gradient contains non-finite entries")
        return g

    def jacobian_eq(self, x) -> sp.csr_matrix:
        """Exact equality-constraint Jacobian at ``x`` (sparse CSR)."""
        if self._jac_eq is None:
            return sp.csr_matrix((0, self.problem.n))
        return self._jac_eq(x)

    def jacobian_ineq(self, x) -> sp.csr_matrix:
        """Exact inequality-constraint Jacobian at ``x`` (sparse CSR)."""
        if self._jac_ineq is None:
            return sp.csr_matrix((0, self.problem.n))
        return self._jac_ineq(x)


def derive(problem: NlpProblem) -> DerivativeProvider:
    """Build the exact-first-derivative provider for a problem."""
    return DerivativeProvider(problem)


class _RowScaledDeriv:
    """Derivative provider with equality rows divided by fixed scales."""

    def __init__(self, deriv, inv_scale):
        self._deriv = deriv
        self._D = sp.diags(inv_scale)

    def gradient(self, x):
        return self._deriv.gradient(x)

    def jacobian_eq(self, x):
        return (self._D @ self._deriv.jacobian_eq(x)).tocsr()


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class SolveOptions:
    """Tuning knobs of the built-in SQP solver.

    Attributes:
        tol: First-order stationarity tolerance (infinity norm).
        ctol: Constraint violation tolerance (infinity norm).
        max_iters: Outer iteration cap.
        max_halvings: Line-search step halvings before giving up on a step.
        curvature: 'auto' picks the problem's exact cost Hessian when it
            declares one and quasi-Newton otherwise; 'bfgs' and 'exact_cost'
            force one model.
        max_qp_pivots: Active-set changes allowed per quadratic subproblem.
        verbose: Print a one-line trace per iteration.
    """

    tol: float = 1e-6
    ctol: float = 1e-4
    max_iters: int = 3000
    max_halvings: int = 30
    curvature: str = "auto"
    max_qp_pivots: int = 250
    verbose: bool = False


@dataclass
class SolveReport:
    """Outcome of one NLP solve.

    Attributes:
        status: 'converged', 'max_iters', 'evaluation_failure' or
            'infeasible_stall'.
        iterations: Outer SQP iterations performed.
        wall_time_s: Wall-clock solve time.
        cost: Final objective value.
        max_violation: Final constraint violation (infinity norm over
            equalities, inequality excess and bound excess).
        stationarity: Final first-order stationarity residual.
        x: Final iterate.
        nu: Final equality multipliers (slack-extended problems report the
            internal multipliers).
        message: Human-readable detail on non-converged statuses.
    """

    status: str
    iterations: int
    wall_time_s: float
    cost: float
    max_violation: float
    stationarity: float
    x: np.ndarray
    nu: np.ndarray
    message: str = ""
    n_cost_evals: int = 0
    n_constraint_evals: int = 0
    n_jacobian_evals: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _with_slacks(problem: NlpProblem) -> tuple[NlpProblem, int]:
    """Rewrite inequalities g(x) <= 0 as g(x) + s = 0 with slack bounds s >= 0."""
    if problem.ineq is None:
        return problem, 0
    n, ns = problem.n, problem.n_ineq
    eq0, ineq = problem.eq, problem.ineq
    m0 = problem.n_eq

    def eq_ext(X):
        xs, ss = X[:, :n], X[:, n:]
        parts = []
        if eq0 is not None:
            parts.append(np.asarray(eq0(xs)))
        parts.append(np.asarray(ineq(xs)) + ss)
        return np.concatenate(parts, axis=1)

    def cost_ext(X):
        return problem.cost(X[:, :n])

    er = [problem.eq_pattern[0]] if eq0 is not None else []
    ec = [problem.eq_pattern[1]] if eq0 is not None else []
    ir, ic = problem.ineq_pattern
    er.append(np.asarray(ir) + m0)
    ec.append(np.asarray(ic))
    er.append(np.arange(ns) + m0)
    ec.append(np.arange(ns) + n)
    hess = problem.cost_hessian
    if hess is not None:
        hess = sp.block_diag([hess, sp.csr_matrix((ns, ns))], format="csr")
    ext = NlpProblem(
        n=n + ns,
        cost=cost_ext,
        eq=eq_ext,
        n_eq=m0 + ns,
        lb=np.concatenate([problem.lb, np.zeros(ns)]),
        ub=np.concatenate([problem.ub, np.full(ns, np.inf)]),
        x0=np.concatenate([problem.x0, np.zeros(ns)]),
        eq_pattern=(np.concatenate(er), np.concatenate(ec)),
        cost_hessian=hess,
        curvature_blocks=problem.curvature_blocks,
        name=problem.name,
    )
    return ext, ns


class _PartitionedCurvature:
    """Exact partitioned curvature model ``B = H_cost + sum_b P_b^T C_b P_b``.

    Constraint curvature in transcribed optimal control problems is exactly
    block-separable: every constraint row depends nonlinearly on one small
    variable group (the rest enters linearly), so the ``nu^T c`` part of the
    Lagrangian Hessian is block diagonal.  Blocks are measured by finite
    differences over exact complex-step Jacobians (one extra Jacobian per
    block column, all blocks sharing each seed) and projected onto the
    positive semidefinite cone so the quadratic subproblems stay convex.
    """

    def __init__(self, blocks, n, hess):
        self.blocks = [np.asarray(b, dtype=np.intp) for b in blocks]
        self.n = n
        if hess is not None:
            self.hess = sp.csr_matrix(hess)
        else:
            self.hess = sp.csr_matrix((n, n))
        self._rows = np.concatenate([np.repeat(b, b.size) for b in self.blocks])
        self._cols = np.concatenate([np.tile(b, b.size) for b in self.blocks])
        self.width = max(b.size for b in self.blocks)
        self.reset()

    def reset(self):
        self.C = [np.zeros((b.size, b.size)) for b in self.blocks]

    def matrix(self):
        data = np.concatenate([C.ravel() for C in self.C])
        corr = sp.coo_matrix((data, (self._rows, self._cols)), shape=(self.n, self.n))
        return (self.hess + corr.tocsr()).tocsr()

    def refresh(self, deriv, x, nu, J0, eps=1e-6):
        """Measure every block of the nu^T c Hessian at (x, nu).

        Column ``i`` of every block comes from one differenced Jacobian: the
        seed perturbs local coordinate ``i`` of all blocks at once, and the
        cross-block contamination is exactly zero by separability.

        Raises:
            EvaluationFailure: If a shifted Jacobian cannot be evaluated.
        """
        g0 = J0.T @ nu
        cols = [np.zeros((b.size, b.size)) for b in self.blocks]
        for i in range(self.width):
            v = np.zeros(self.n)
            live = [k for k, b in enumerate(self.blocks) if i < b.size]
            for k in live:
                v[self.blocks[k][i]] = 1.0
            Ji = deriv.jacobian_eq(x + eps * v)
            dg = np.asarray((Ji.T @ nu - g0)).ravel() / eps
            for k in live:
                cols[k][:, i] = dg[self.blocks[k]]
        for k, Hb in enumerate(cols):
            Hb = 0.5 * (Hb + Hb.T)
            w, V = np.linalg.eigh(Hb)
            self.C[k] = (V * np.maximum(w, 0.0)) @ V.T


class _KktSolver:
    """Factorizes and solves the regularized reduced KKT system.

    Free variables F (not pinned by the working set) and equality rows are
    assembled into::

        [ B_FF + delta I   J_F^T ] [ p_F ]   [ -g_F ]
        [ J_F             -eps I ] [ nu  ] = [ -r   ]

    which is symmetric quasi-definite, hence nonsingular for any working set
    even when constraint rows degenerate.
    """

    def __init__(self, B, J, free, delta, eps, sparse_mode):
        self.free = free
        nf = int(free.sum())
        m = J.shape[0]
        self.nf, self.m = nf, m
        if sparse_mode:
            Bff = B[free][:, free] if sp.issparse(B) else sp.csc_matrix(B[np.ix_(free, free)])
            Jf = J[:, free]
            K = sp.bmat(
                [
                    [Bff + delta * sp.eye(nf), Jf.T],
                    [Jf, -eps * sp.eye(m)],
                ],
                format="csc",
            )
            self._lu = spla.splu(K)
            self._solve = self._lu.solve
        else:
            Bd = B.toarray() if sp.issparse(B) else B
            K = np.zeros((nf + m, nf + m))
            K[:nf, :nf] = Bd[np.ix_(free, free)] + delta * np.eye(nf)
            Jf = J[:, free].toarray() if sp.issparse(J) else J[:, free]
            K[:nf, nf:] = Jf.T
            K[nf:, :nf] = Jf
            K[nf:, nf:] = -eps * np.eye(m)
            lu = scipy.linalg.lu_factor(K)
            self._solve = lambda rhs: scipy.linalg.lu_solve(lu, rhs)

    def solve(self, g_f, r):
        rhs = np.concatenate([-g_f, -r])
        sol = self._solve(rhs)
        return sol[: self.nf], sol[self.nf:]


def _solve_qp(B, g, J, c, dlb, dub, warm_set, opts, delta, sparse_mode, fixed=None):
    """Primal active-set solve of the box-constrained equality QP.

    min 1/2 d^T B d + g^T d   s.t.  J d = -c,   dlb <= d <= dub

    Variables flagged in ``fixed`` are held at a zero step: they never enter
    the free set and take no part in the ratio or release tests.

    Returns:
        (d, nu, working, pivots): step, equality multipliers, final working
        set (+1 upper / -1 lower / 0 free), active-set changes performed.
    """
    n = len(g)
    # dual regularization scaled with the current infeasibility so the
    # endgame does not floor the achievable constraint residual
    eps = min(1e-10, max(1e-13, 1e-7 * float(np.max(np.abs(c), initial=0.0))))
    working = np.zeros(n, dtype=np.int8)
    # warm start, but only where the bound is still plausible
    working[(warm_set == -1) & np.isfinite(dlb)] = -1
    working[(warm_set == 1) & np.isfinite(dub)] = 1
    if fixed is not None:
        working[fixed] = 0
    d = np.where(working == -1, dlb, 0.0)
    d = np.where(working == 1, dub, d)

    nu = np.zeros(J.shape[0])
    for pivot in range(opts.max_qp_pivots + 1):
        free = working == 0
        if fixed is not None:
            free &= ~fixed
        if not free.any():
            break
        Bd_fixed = (B @ d) if working.any() else np.zeros(n)
        g_eff = g[free] + (Bd_fixed[free] if working.any() else 0.0)
        r = c + (J @ d if working.any() else 0.0)
        for bump in range(4):
            try:
                kkt = _KktSolver(B, J, free, delta * (10.0 ** bump), eps * (100.0 ** bump), sparse_mode)
                p_f, nu = kkt.solve(g_eff, r)
                if np.all(np.isfinite(p_f)) and np.all(np.isfinite(nu)):
                    break
            except (RuntimeError, np.linalg.LinAlgError, ValueError):
                continue
        else:
            raise EvaluationFailure("KKT system could not be factorized")

        step = np.zeros(n)
        step[free] = p_f  # target free components (QP solution with this set)
        move = step - d
        move[~free] = 0.0
        # ratio test toward the candidate
        alpha = 1.0
        blocker = -1
        side = 0
        for idx in np.flatnonzero(free):
            m_i = move[idx]
            if m_i > 1e-14 and np.isfinite(dub[idx]):
                a = (dub[idx] - d[idx]) / m_i
                if a < alpha:
                    alpha, blocker, side = a, idx, 1
            elif m_i < -1e-14 and np.isfinite(dlb[idx]):
                a = (dlb[idx] - d[idx]) / m_i
                if a < alpha:
                    alpha, blocker, side = a, idx, -1
        d = d + max(alpha, 0.0) * move
        if blocker >= 0 and pivot < opts.max_qp_pivots:
            working[blocker] = side
            d[blocker] = dub[blocker] if side == 1 else dlb[blocker]
            continue
        # full step taken: check multiplier signs on the working set
        grad_qp = g + B @ d + J.T @ nu
        release = -1
        worst = 1e-8
        for idx in np.flatnonzero(working != 0):
            z = grad_qp[idx]
            wrong = -z if working[idx] == -1 else z
            # at a lower bound the QP gradient must push downward (z >= 0)
            if wrong > worst:
                worst = wrong
                release = idx
        if release >= 0 and pivot < opts.max_qp_pivots:
            working[release] = 0
            continue
        break
    return d, nu, working, pivot


def kkt_residual(problem: NlpProblem, deriv: DerivativeProvider, x, nu):
    """Independent first-order optimality check at (x, nu).

    Returns:
        (stationarity, violation): infinity norms of the projected Lagrangian
        gradient (bound multipliers eliminated by sign conditions) and of the
        constraint violation including bound excess.
    """
    g = deriv.gradient(x)
    J = deriv.jacobian_eq(x)
    c = np.asarray(problem.eq(x[None, :]))[0] if problem.eq is not None else np.zeros(0)
    r = g + (J.T @ nu if J.shape[0] else 0.0)
    at_lb = x <= problem.lb + 1e-9
    at_ub = x >= problem.ub - 1e-9
    stat = np.abs(np.where(at_lb, np.minimum(r, 0.0), np.where(at_ub, np.maximum(r, 0.0), r)))
    viol = np.max(np.abs(c)) if c.size else 0.0
    viol = max(viol, float(np.max(problem.lb - x, initial=0.0)), float(np.max(x - problem.ub, initial=0.0)))
    return float(np.max(stat, initial=0.0)), viol


def solve(problem: NlpProblem, x0=None, options: SolveOptions | None = None) -> SolveReport:
    """Minimize an :class:`NlpProblem` with the built-in line-search SQP.

    Args:
        problem: The problem; inequalities are handled by slack variables.
        x0: Starting point; defaults to ``problem.x0``; projected onto the
            bound box before the first evaluation.
        options: Solver options.

    Returns:
        A :class:`SolveReport`; ``status == 'converged'`` guarantees the
        reported point satisfies the KKT conditions to the requested
        tolerances (re-verifiable via :func:`kkt_residual`).
    """
    opts = options or SolveOptions()
    t_start = time.perf_counter()
    orig = problem
    problem, n_slacks = _with_slacks(problem)
    n = problem.n

    x = np.array(problem.x0 if x0 is None else np.asarray(x0, dtype=float), dtype=float)
    if x.shape != (orig.n,) and x.shape != (n,):
        raise DimensionMismatch(f"x0 must have shape ({orig.n},)")
    if x.shape == (orig.n,) and n_slacks:
        # consistent slack start: s = max(0, -g(x))
        gx = np.asarray(orig.ineq(np.clip(x, orig.lb, orig.ub)[None, :]))[0]
        x = np.concatenate([x, np.maximum(-gx, 0.0)])
    x = np.clip(x, problem.lb, problem.ub)

    deriv = derive(problem)
    has_eq = problem.eq is not None and problem.n_eq > 0
    m = problem.n_eq if has_eq else 0

    counters = {"cost": 0, "cons": 0, "jac": 0}
    # row scales: equality rows of very different natural magnitude (position
    # boundary rows vs acceleration-level defect rows) are divided by a fixed
    # per-row scale measured from the starting Jacobian, so that one merit
    # weight prices all rows comparably; reports restore problem scale
    rs = np.ones(m)
    inv_rs = None

    def eval_fc(xv):
        counters["cost"] += 1
        f = float(np.asarray(problem.cost(xv[None, :]))[0])
        if has_eq:
            counters["cons"] += 1
            c = np.asarray(problem.eq(xv[None, :]), dtype=float)[0]
            if inv_rs is not None:
                c = c * inv_rs
        else:
            c = np.zeros(0)
        if not (np.isfinite(f) and np.all(np.isfinite(c))):
            raise EvaluationFailure("objective or constraints non-finite")
        return f, c

    def finish(status, it, f, c, stat, nu, msg=""):
        viol = float(np.max(np.abs(rs * c), initial=0.0))
        return SolveReport(
            status=status, iterations=it, wall_time_s=time.perf_counter() - t_start,
            cost=f, max_violation=viol, stationarity=stat,
            x=x[: orig.n].copy(), nu=nu * (inv_rs if inv_rs is not None else 1.0),
            message=msg,
            n_cost_evals=counters["cost"], n_constraint_evals=counters["cons"],
            n_jacobian_evals=counters["jac"],
        )

    try:
        f, c = eval_fc(x)
    except EvaluationFailure as exc:
        return SolveReport(
            status="evaluation_failure", iterations=0,
            wall_time_s=time.perf_counter() - t_start, cost=np.nan,
            max_violation=np.nan, stationarity=np.nan, x=x[: orig.n].copy(),
            nu=np.zeros(m), message=f"initial point: {exc}",
        )

    g0 = J0s = None
    if has_eq:
        try:
            counters["jac"] += 1
            J_raw = deriv.jacobian_eq(x)
            g0 = deriv.gradient(x)
        except EvaluationFailure as exc:
            return SolveReport(
                status="evaluation_failure", iterations=0,
                wall_time_s=time.perf_counter() - t_start, cost=f,
                max_violation=float(np.max(np.abs(c), initial=0.0)),
                stationarity=np.nan, x=x[: orig.n].copy(),
                nu=np.zeros(m), message=f"initial derivatives: {exc}",
            )
        row_mag = np.asarray(abs(J_raw).max(axis=1).todense()).ravel()
        rs = np.clip(row_mag, 1.0, 1e6)
        inv_rs = 1.0 / rs
        deriv = _RowScaledDeriv(deriv, inv_rs)
        c = c * inv_rs
        J0s = (sp.diags(inv_rs) @ J_raw).tocsr()

    # curvature model
    mode = opts.curvature
    if mode == "auto":
        if problem.curvature_blocks:
            mode = "partitioned"
        elif problem.cost_hessian is not None:
            mode = "exact_cost"
        else:
            mode = "bfgs"
    if mode == "partitioned" and not problem.curvature_blocks:
        mode = "exact_cost"
    if mode == "exact_cost" and problem.cost_hessian is None:
        mode = "bfgs"
    part = None
    if mode == "partitioned":
        part = _PartitionedCurvature(problem.curvature_blocks, n, problem.cost_hessian)
        sparse_mode = (n + m) > 900
        B = part.matrix() if sparse_mode else part.matrix().toarray()
        hmax = abs(part.hess).max() if part.hess.nnz else 0.0
        delta = 1e-4 * max(1.0, hmax)
    elif mode == "exact_cost":
        H = sp.csr_matrix(problem.cost_hessian)
        sparse_mode = (n + m) > 900
        B = H if sparse_mode else H.toarray()
        delta = 1e-6 * max(1.0, abs(H).max())
    else:
        B = np.eye(n)
        sparse_mode = False
        delta = 1e-8
    part_ready = False
    accepted_since_refresh = 0

    mu = 1.0
    nu = np.zeros(m)
    # damping of the normal (feasibility-restoring) step component: far from
    # the constraint manifold the full Newton step on c overshoots badly, and
    # scaling the target down beats scalpeling the whole step with alpha
    # because the tangential component survives at full length
    beta = 1.0
    working = np.zeros(n, dtype=np.int8)
    g = None
    J = None
    g_cache = None
    J_cache = None
    if g0 is not None:
        g_cache, J_cache = g0, J0s
    bfgs_fresh = True
    stall = 0
    best_viol = np.inf
    since_improve = 0
    kicks = 0
    window_resets = 0
    # variables a restoration kick moved are held fixed for a while so the
    # rest of the trajectory re-forms around the new branch instead of
    # dragging the kicked coordinates straight back into the trap
    pinned = np.zeros(n, dtype=bool)
    pin_left = 0
    status, msg = "max_iters", ""

    bounded = np.isfinite(problem.lb) & np.isfinite(problem.ub)

    def _patch_solve(rows, cols, x_base):
        """Multi-start damped Gauss-Newton on rows of c over the cols of x.

        All other coordinates stay frozen at ``x_base``.  Returns the best
        point found as ``(x, f, c, max |c[rows]|)``; the start list is fixed,
        so the outcome is a pure function of the inputs.
        """
        lo, hi = problem.lb[cols], problem.ub[cols]
        span = hi - lo
        ctr = 0.5 * (lo + hi)

        def block_jac(xv):
            # one batched imaginary-seeded evaluation gives the rows-by-cols
            # Jacobian block without touching the full matrix
            counters["cons"] += 1
            Xb = np.repeat(xv[None, :], cols.size, axis=0).astype(complex)
            Xb[np.arange(cols.size), cols] += 1j * _CS_STEP
            Cb = np.asarray(problem.eq(Xb)).imag / _CS_STEP
            if inv_rs is not None:
                Cb = Cb * inv_rs
            return Cb[:, rows].T

        def descend(y0):
            xs = x_base.copy()
            xs[cols] = np.clip(y0, lo, hi)
            fs, cs = eval_fc(xs)
            rbest = float(np.max(np.abs(cs[rows])))
            for _ in range(8):
                if rbest <= 10.0 * opts.ctol:
                    break
                A = block_jac(xs)
                dy, *_ = np.linalg.lstsq(
                    A.T @ A + 1e-10 * np.eye(cols.size), -(A.T @ cs[rows]),
                    rcond=None,
                )
                step = 1.0
                for _ in range(8):
                    x_try = xs.copy()
                    x_try[cols] = np.clip(xs[cols] + step * dy, lo, hi)
                    f_try, c_try = eval_fc(x_try)
                    r_try = float(np.max(np.abs(c_try[rows])))
                    if r_try < rbest:
                        xs, fs, cs, rbest = x_try, f_try, c_try, r_try
                        break
                    step *= 0.5
                else:
                    break
            return xs, fs, cs, rbest

        # the subsystem has fold traps of its own, so a single descent may
        # wedge; a short deterministic start list makes finding the actual
        # root (the other branch) all but certain for a few variables
        alt = np.where(np.arange(cols.size) % 2 == 0, 1.0, -1.0)
        y_starts = [
            x_base[cols], ctr, ctr + 0.31 * span * alt, ctr - 0.31 * span * alt,
            ctr + 0.31 * span, ctr - 0.31 * span,
            x_base[cols] + 0.43 * span * alt, x[cols] + 0.5 * span,
        ]
        y_starts = y_starts[kicks:] + y_starts[:kicks]
        out = None
        r_best = np.inf
        for y0 in y_starts:
            try:
                cand = descend(y0)
            except EvaluationFailure:
                continue
            if cand[3] < r_best:
                out, r_best = cand, cand[3]
            if r_best <= 10.0 * opts.ctol:
                break
        return out

    def restoration_kick(J_now, c_now):
        """Deterministic restart applied when restoration is stuck locally.

        The stuck rows sit at a stationary residual with no root on their
        side of a kinematic fold, so plain damping never escapes.  The rows'
        support variables are reflected through the box center and the small
        subsystem is re-solved over them by multi-start Gauss-Newton; if it
        has no root over its own support, the patch grows once to pull in the
        adjacent rows and their variables.  Restarting from the best root
        keeps the iterate sequence a pure function of (problem, x0, options).
        """
        nonlocal x, f, c, mu, beta, working, part_ready, stall
        nonlocal best_viol, since_improve, delta, B, bfgs_fresh
        nonlocal pin_left
        J_now = sp.csr_matrix(J_now)
        stuck = np.abs(c_now) > 10.0 * opts.ctol
        rows = np.flatnonzero(stuck)
        support = np.zeros(n, dtype=bool)
        support[np.unique(J_now[rows].indices)] = True
        support &= bounded
        if not support.any():
            if opts.verbose:
                print(f"    restoration kick skipped: no bounded support "
                      f"({rows.size} stuck rows)")
            return False
        center = 0.5 * (problem.lb + problem.ub)
        x_k = x.copy()
        x_k[support] = 2.0 * center[support] - x[support]
        x_k = np.clip(x_k, problem.lb, problem.ub)
        cols = np.flatnonzero(support)
        r_now = float(np.max(np.abs(c_now[rows])))
        best = _patch_solve(rows, cols, x_k)
        if best is None or best[3] > 10.0 * opts.ctol:
            # no root over the rows' own support: the subsystem needs its
            # neighbours to move too, so grow the patch one ring outward
            touched = np.unique(sp.csc_matrix(J_now)[:, cols].indices)
            if touched.size <= max(6, m // 5):
                rows2 = touched
                support2 = np.zeros(n, dtype=bool)
                support2[np.unique(J_now[rows2].indices)] = True
                support2 &= bounded
                cols2 = np.flatnonzero(support2)
                cand = _patch_solve(rows2, cols2, x_k)
                if cand is not None:
                    r_cand = float(np.max(np.abs(cand[2][rows])))
                    if best is None or r_cand < best[3]:
                        best = (cand[0], cand[1], cand[2], r_cand)
                        cols = cols2
        if best is None or best[3] > 0.8 * r_now:
            if opts.verbose:
                print(f"    restoration kick skipped: stuck residual "
                      f"{r_now:.2e} not reducible over its support "
                      f"(best {np.inf if best is None else best[3]:.2e})")
            return False
        x_k, f_k, c_k, r_best = best
        if opts.verbose:
            print(f"    restoration kick #{kicks + 1}: {rows.size} stuck "
                  f"rows, {cols.size} vars moved, residual "
                  f"{r_now:.2e} -> {r_best:.2e}, "
                  f"viol {np.max(np.abs(c_now)):.2e} -> {np.max(np.abs(c_k)):.2e}")
        x, f, c = x_k, f_k, c_k
        mu, beta = 1.0, 1.0
        working = np.zeros(n, dtype=np.int8)
        pinned[:] = False
        pinned[cols] = True
        pin_left = 40
        part_ready = False
        stall = 0
        best_viol, since_improve = np.inf, 0
        delta = 1e-4
        if mode == "partitioned":
            part.reset()
            B = part.matrix() if sparse_mode else part.matrix().toarray()
        elif mode == "bfgs":
            B = np.eye(n)
            bfgs_fresh = True
        return True

    it = 0
    for it in range(1, opts.max_iters + 1):
        try:
            if g_cache is not None:
                # derivatives at x were already computed for the curvature update
                g, J = g_cache, J_cache
                g_cache = J_cache = None
            else:
                counters["jac"] += 1
                g = deriv.gradient(x)
                J = deriv.jacobian_eq(x) if has_eq else sp.csr_matrix((0, n))
        except EvaluationFailure as exc:
            status, msg = "evaluation_failure", f"derivatives: {exc}"
            break

        # multiplier estimate for the convergence test (refreshed by each QP)
        if it == 1 and has_eq:
            JJt = (J @ J.T + 1e-10 * sp.eye(m)).tocsc()
            try:
                nu = spla.spsolve(JJt, -(J @ g))
            except RuntimeError:
                nu = np.zeros(m)

        r = g + (J.T @ nu if has_eq else 0.0)
        at_lb = x <= problem.lb + 1e-9
        at_ub = x >= problem.ub - 1e-9
        stat = float(np.max(np.abs(
            np.where(at_lb, np.minimum(r, 0.0), np.where(at_ub, np.maximum(r, 0.0), r))
        ), initial=0.0))
        cviol = float(np.max(np.abs(c), initial=0.0))
        cviol_true = float(np.max(np.abs(rs * c), initial=0.0))
        if pin_left > 0:
            pin_left -= 1
            if pin_left == 0 or cviol <= 1e-2:
                pin_left = 0
                pinned[:] = False
        if opts.verbose:
            print(f"  [{problem.name}] it {it:4d} f {f: .6e} viol {cviol:.2e} stat {stat:.2e} mu {mu:.1e}")
        if stat <= opts.tol and cviol_true <= opts.ctol:
            status = "converged"
            break
        if cviol < 0.999 * best_viol:
            best_viol, since_improve = cviol, 0
        else:
            since_improve += 1
        stationary_trap = stat <= max(10.0 * opts.tol, 1e-3) and since_improve >= 8
        if cviol > opts.ctol and (since_improve >= 30 or stationary_trap):
            # distinguish a localized trap (a handful of rows pinned while the
            # rest of the residual is satisfied -- the signature of a
            # wrong-branch boundary configuration) from a plain slow grind
            # over a large residual, which kicks only make worse
            n_stuck = int(np.sum(np.abs(c) > 10.0 * opts.ctol))
            if n_stuck <= max(6, m // 5):
                if kicks < 6 and restoration_kick(J, c):
                    kicks += 1
                    continue
                status, msg = "infeasible_stall", f"constraint violation stuck at {cviol:.2e}"
                break
            if window_resets < 12:
                window_resets += 1
                since_improve = 0
            else:
                status, msg = "infeasible_stall", f"constraint violation stuck at {cviol:.2e}"
                break

        # measure constraint curvature immediately whenever the model is cold
        # (fresh solve, or reset after a stall or restoration kick); once warm,
        # refresh every few accepted steps but only near the feasible manifold,
        # where the multiplier estimates are trustworthy
        if (
            mode == "partitioned"
            and has_eq
            and (not part_ready or (cviol <= 1e-2 and accepted_since_refresh >= 16))
        ):
            try:
                part.refresh(deriv, x, nu, J)
                counters["jac"] += part.width
                B = part.matrix() if sparse_mode else part.matrix().toarray()
                part_ready = True
                accepted_since_refresh = 0
            except EvaluationFailure:
                pass

        damped = cviol > 1e-3 and beta < 1.0
        c_qp = beta * c if damped else c
        dlb = problem.lb - x
        dub = problem.ub - x
        fix_mask = pinned if pin_left > 0 else None
        try:
            d, nu_qp, working, _ = _solve_qp(
                B, g, J, c_qp, dlb, dub, working, opts, delta, sparse_mode, fix_mask
            )
        except EvaluationFailure as exc:
            status, msg = "evaluation_failure", f"QP: {exc}"
            break
        nu = nu_qp if has_eq else nu

        # re-test optimality with the multipliers matched to this point; the
        # loop-top test uses the previous iteration's estimate, which can lag
        # behind on problems where the active set keeps alternating
        if has_eq and cviol_true <= opts.ctol:
            r2 = g + J.T @ nu
            stat2 = float(np.max(np.abs(
                np.where(at_lb, np.minimum(r2, 0.0), np.where(at_ub, np.maximum(r2, 0.0), r2))
            ), initial=0.0))
            if stat2 <= opts.tol:
                status = "converged"
                break

        # l1 merit with a penalty that dominates the multipliers; the target
        # is made robust against the astronomical estimates a fold-degenerate
        # linearization produces on a few rows (those rows are unpriceable
        # anyway, and a pegged penalty stalls all other progress)
        if has_eq and m:
            nu_abs = np.abs(nu)
            nu_scale = min(float(np.max(nu_abs)), 10.0 * float(np.quantile(nu_abs, 0.9)))
            mu_req = min(1.1 * nu_scale + 1e-4, 1e4)
            if mu < mu_req:
                mu = 1.5 * mu_req
            elif mu > 50.0 * mu_req:
                mu = 10.0 * mu_req
        phi0 = f + mu * np.sum(np.abs(c))
        dphi = float(g @ d) - mu * (beta if damped else 1.0) * np.sum(np.abs(c))
        scale_x = 1.0 + float(np.max(np.abs(x)))
        if dphi > -1e-16:
            if float(np.max(np.abs(d), initial=0.0)) <= 1e-10 * scale_x:
                if pin_left > 0:
                    # stationary only because of the pins: release and resume
                    pin_left = 0
                    pinned[:] = False
                    continue
                # the subproblem is stationary at zero: nothing left to exploit
                status = "converged" if (stat <= opts.tol and cviol_true <= opts.ctol) else "infeasible_stall"
                msg = "" if status == "converged" else f"stalled at stationarity {stat:.1e}"
                break
            delta = min(delta * 10.0, 1e6)
            stall += 1
            if mode == "bfgs" and stall == 4:
                B = max(1.0, float(np.linalg.norm(g))) * np.eye(n)
                bfgs_fresh = True
            if mode == "partitioned" and stall == 4:
                part.reset()
                part_ready = False
                B = part.matrix() if sparse_mode else part.matrix().toarray()
            if stall > 8:
                if cviol > opts.ctol and kicks < 6 and restoration_kick(J, c):
                    kicks += 1
                    continue
                status, msg = "infeasible_stall", "merit descent lost repeatedly"
                break
            continue
        stall = 0

        # line search on the l1 merit: quadratic interpolation on rejection
        # (instead of plain halving), one second-order correction attempt at
        # the unit step, and a fitted extension beyond it -- in flat valleys
        # the merit minimizer along d routinely sits at 5-30 unit steps
        alpha0 = 1.0
        alpha = 1.0
        accepted = False
        soc_tried = False
        f_new = c_new = None
        phi_new = None
        for _ in range(opts.max_halvings + 1):
            try:
                x_try = np.clip(x + alpha * d, problem.lb, problem.ub)
                f_try, c_try = eval_fc(x_try)
                phi_try = f_try + mu * np.sum(np.abs(c_try))
                if phi_try <= phi0 + 1e-4 * alpha * dphi:
                    x_new, f_new, c_new, phi_new = x_try, f_try, c_try, phi_try
                    accepted = True
                    break
                if alpha == alpha0 and not soc_tried and has_eq:
                    soc_tried = True
                    try:
                        d_soc, _, _, _ = _solve_qp(
                            B, np.zeros(n), J, c_try,
                            dlb - alpha * d, dub - alpha * d, working, opts, delta,
                            sparse_mode, fix_mask
                        )
                        x_soc = np.clip(x + alpha * d + d_soc, problem.lb, problem.ub)
                        f_soc, c_soc = eval_fc(x_soc)
                        phi_soc = f_soc + mu * np.sum(np.abs(c_soc))
                        if phi_soc <= phi0 + 1e-4 * alpha * dphi:
                            x_new, f_new, c_new, phi_new = x_soc, f_soc, c_soc, phi_soc
                            accepted = True
                            break
                    except EvaluationFailure:
                        pass
                # quadratic through phi(0), phi'(0), phi(alpha) places the
                # 1-D minimizer; clamp to keep the search well behaved
                denom = 2.0 * (phi_try - phi0 - alpha * dphi)
                a_min = -dphi * alpha * alpha / denom if denom > 0.0 else 0.5 * alpha
                alpha = min(max(a_min, 0.1 * alpha), 0.5 * alpha)
            except EvaluationFailure:
                alpha *= 0.5
        if not accepted:
            delta = min(delta * 10.0, 1e6)
            if cviol > 1e-3:
                beta = max(beta * 0.25, 0.02)
            stall += 1
            if mode == "bfgs" and stall == 4:
                B = max(1.0, float(np.linalg.norm(g))) * np.eye(n)
                bfgs_fresh = True
            if mode == "partitioned" and stall == 4:
                part.reset()
                part_ready = False
                B = part.matrix() if sparse_mode else part.matrix().toarray()
            if stall > 8:
                if stat <= opts.tol and cviol_true <= opts.ctol:
                    status = "converged"
                    break
                if cviol > opts.ctol and kicks < 6 and restoration_kick(J, c):
                    kicks += 1
                    continue
                status, msg = "infeasible_stall", "line search failed repeatedly"
                break
            continue

        if accepted and alpha == 1.0 and has_eq:
            # fitted extension: the quadratic through phi(0), phi'(0), phi(1)
            # places the 1-D merit minimizer, frequently far beyond the unit
            # step; jump there and keep doubling while it pays off
            kappa_m = 2.0 * (phi_new - phi0 - dphi)
            a = min(-dphi / kappa_m if kappa_m > 0.0 else 64.0, 64.0)
            if a >= 2.0:
                try:
                    x_t = np.clip(x + a * d, problem.lb, problem.ub)
                    f_t, c_t = eval_fc(x_t)
                    phi_t = f_t + mu * np.sum(np.abs(c_t))
                    if phi_t < phi_new:
                        x_new, f_new, c_new, phi_new, alpha = x_t, f_t, c_t, phi_t, a
                        while a < 64.0:
                            a = min(2.0 * a, 64.0)
                            x_t = np.clip(x + a * d, problem.lb, problem.ub)
                            f_t, c_t = eval_fc(x_t)
                            phi_t = f_t + mu * np.sum(np.abs(c_t))
                            if phi_t >= phi_new:
                                break
                            x_new, f_new, c_new, phi_new, alpha = x_t, f_t, c_t, phi_t, a
                except EvaluationFailure:
                    pass

        if opts.verbose:
            print(
                f"      step |d| {float(np.max(np.abs(d), initial=0.0)):.2e}"
                f" alpha0 {alpha0:.2f} alpha {alpha:.3f} delta {delta:.1e}"
            )
        # Levenberg-style trust in the quadratic model: relax the primal
        # regularization after clean full steps, stiffen it when the line
        # search had to cut deep (flat valleys otherwise provoke huge
        # tangential steps that crawl at microscopic alpha)
        if alpha >= alpha0:
            delta = max(delta / 3.0, 1e-10)
            if alpha >= 0.5:
                beta = min(beta * 2.0, 1.0)
        elif alpha <= 0.125 * alpha0:
            delta = min(delta * 5.0, 1e6)
            if cviol > 1e-3:
                beta = max(beta * 0.5, 0.02)

        accepted_since_refresh += 1
        if mode == "bfgs":
            try:
                g_new = deriv.gradient(x_new)
                J_new = deriv.jacobian_eq(x_new) if has_eq else J
                counters["jac"] += 1
            except EvaluationFailure:
                g_new, J_new = None, None
            if g_new is not None:
                g_cache, J_cache = g_new, J_new
                s = x_new - x
                y = (g_new + (J_new.T @ nu if has_eq else 0.0)) - (g + (J.T @ nu if has_eq else 0.0))
                sy = float(s @ y)
                if bfgs_fresh and sy > 1e-16:
                    # Shanno-Phua scaling of the initial metric
                    tau = float(y @ y) / sy
                    if np.isfinite(tau) and tau > 1e-12:
                        B = tau * np.eye(n)
                    bfgs_fresh = False
                sBs = float(s @ (B @ s))
                if sBs > 1e-16 and float(s @ s) > 1e-30:
                    if sy < 0.2 * sBs:  # Powell damping keeps B positive definite
                        theta = 0.8 * sBs / (sBs - sy)
                        y = theta * y + (1.0 - theta) * (B @ s)
                        sy = float(s @ y)
                    if sy > 1e-16:
                        Bs = B @ s
                        B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy

        x, f, c = x_new, f_new, c_new

    else:
        it = opts.max_iters

    if status == "max_iters":
        msg = "iteration limit reached"
    # final stationarity for the report
    try:
        stat_final, _ = kkt_residual(problem, deriv, x, nu) if has_eq else kkt_residual(problem, deriv, x, np.zeros(0))
    except EvaluationFailure:
        stat_final = np.nan
    return finish(status, it, f, c, stat_final, nu, msg)
