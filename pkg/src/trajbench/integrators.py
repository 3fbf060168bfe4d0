"""Fixed-step integrators and the adaptive verification integrator.

Two fixed-step families drive the transcriptions: a classic explicit
fourth-order Runge-Kutta step subdivided into equal substeps, and an implicit
step that solves the collocation conditions of a Lagrange interpolation basis
by Newton iteration with exact Jacobians.

The adaptive integrator is deliberately independent: it delegates to a mature
variable-step Runge-Kutta 8(5,3) implementation and shares nothing with the
fixed-step code paths except the right-hand side, so it can serve as the
verification oracle for dynamic consistency.

The implicit stepper accepts complex inputs: the Newton solve runs on the real
parts and the imaginary parts are propagated through the converged solution by
one extra linear solve (implicit-function differentiation), which makes the
step exactly forward-mode differentiable for the derivative layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DimensionMismatch, IntegrationBlowUp, StepFailure
from .polybasis import LagrangeBasis

__all__ = [
    "CollocationStepper",
    "OdeProblem",
    "adaptive_verify_integrate",
    "erk4_step",
    "irk_step",
]

_CS_STEP = 1e-150  # imaginary seed for forward-mode directional derivatives


@dataclass(frozen=True)
class OdeProblem:
    """A controlled ordinary differential equation ``xdot = rhs(x, u)``.

    Attributes:
        n_x: State dimension.
        n_u: Control dimension.
        rhs: Batched right-hand side mapping (B, n_x), (B, n_u) -> (B, n_x).
            Must be dtype-generic so complex inputs propagate imaginary parts.
    """

    n_x: int
    n_u: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _canon_xu(problem, x0, u):
    x0 = np.asarray(x0)
    u = np.asarray(u)
    squeeze = x0.ndim == 1
    if x0.ndim == 1:
        x0 = x0[None, :]
    if u.ndim == 1:
        u = u[None, :]
    if x0.shape[-1] != problem.n_x:
        raise DimensionMismatch(f"expected state dimension {problem.n_x}, got {x0.shape[-1]}")
    if u.shape[-1] != problem.n_u:
        raise DimensionMismatch(f"expected control dimension {problem.n_u}, got {u.shape[-1]}")
    B = max(x0.shape[0], u.shape[0])
    x0 = np.broadcast_to(x0, (B, problem.n_x))
    u = np.broadcast_to(u, (B, problem.n_u))
    return x0, u, squeeze


def erk4_step(problem: OdeProblem, x0, u, h: float, substeps: int = 5):
    """Classic fourth-order Runge-Kutta step with zero-order-hold control.

    The step ``h`` is subdivided into ``substeps`` equal pieces; the control
    is held constant across the whole step.

    Args:
        problem: The ODE.
        x0: Initial state, (n_x,) or (B, n_x).
        u: Control, (n_u,) or (B, n_u).
        h: Step length.
        substeps: Number of equal subdivisions (default five).

    Returns:
        End state with the same leading shape as ``x0``.

    Raises:
        IntegrationBlowUp: If the state leaves the finite range; the error
            carries the substep index where it happened.
    """
    if substeps < 1:
        raise DimensionMismatch(f"substeps must be >= 1, got {substeps}")
    x, uu, squeeze = _canon_xu(problem, x0, u)
    hs = h / substeps
    f = problem.rhs
    for k in range(substeps):
        k1 = f(x, uu)
        k2 = f(x + 0.5 * hs * k1, uu)
        k3 = f(x + 0.5 * hs * k2, uu)
        k4 = f(x + hs * k3, uu)
        x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x.real)):
            raise IntegrationBlowUp(
                f"state became non-finite during substep {k + 1}/{substeps}",
                step_index=k,
                time=(k + 1) * hs,
            )
    return x[0] if squeeze else x


class CollocationStepper:
    """Solves one implicit interval defined by collocation residuals.

    The unknowns are the states at the M interior grid nodes; the node-0
    state is pinned to the interval start.  A ``residual`` callback defines
    the M per-node defect equations; Newton iteration with exact Jacobians
    (forward-mode differentiation of the residual itself) drives them to
    zero, warm-started by copying the start state to every interior node.

    Args:
        basis: Interpolation basis of degree M over {0} U interior nodes.
        residual: Callback ``residual(Z, x0, u, h) -> (B, M, n_x)`` where
            ``Z`` is (B, M, n_x).  Must be dtype-generic (complex-safe).
        n_x: State dimension.
        n_u: Control dimension.
        newton_tol: Convergence threshold on the residual infinity norm.
        max_iters: Newton iteration cap.
    """

    def __init__(self, basis: LagrangeBasis, residual, n_x: int, n_u: int,
                 newton_tol: float = 1e-10, max_iters: int = 50):
        self.basis = basis
        self.residual = residual
        self.n_x = n_x
        self.n_u = n_u
        self.newton_tol = newton_tol
        self.max_iters = max_iters

    def _jacobian(self, Z, x0, u, h):
        """Exact Newton matrix d residual / d Z, shape (B, M*n, M*n)."""
        B, M, n = Z.shape
        k = M * n
        Zf = Z.reshape(B, k)
        seeds = np.eye(k)
        Zs = (Zf[:, None, :] + 1j * _CS_STEP * seeds[None, :, :]).reshape(B * k, M, n)
        x0s = np.repeat(x0, k, axis=0)
        us = np.repeat(u, k, axis=0)
        R = self.residual(Zs, x0s, us, h)
        cols = (R.imag / _CS_STEP).reshape(B, k, k)  # [b, col, row-flat]
        return np.swapaxes(cols, 1, 2)

    def step(self, x0, u, h: float):
        """Advance one interval.

        Args:
            x0: Start state, (n_x,) or (B, n_x); may be complex.
            u: Interval control, (n_u,) or (B, n_u); may be complex.
            h: Interval length.

        Returns:
            (x1, states): end state (via the interpolant at t=1) and all node
            states, shape (..., M+1, n_x) with node 0 equal to ``x0``.

        Raises:
            StepFailure: If Newton does not reach the tolerance; carries the
                final residual norm and iteration count.
        """
        x0a = np.asarray(x0)
        squeeze = x0a.ndim == 1
        x0b, ub, _ = _canon_xu(
            OdeProblem(self.n_x, self.n_u, None), x0a, np.asarray(u)
        )
        is_complex = np.iscomplexobj(x0b) or np.iscomplexobj(ub)
        x0r = np.ascontiguousarray(x0b.real) if is_complex else x0b
        ur = np.ascontiguousarray(ub.real) if is_complex else ub

        B = x0r.shape[0]
        M, n = self.basis.degree, self.n_x
        # derivative-seeded batches repeat the same real interval many times;
        # run the Newton only once per distinct (x0, u) row
        key = np.concatenate([x0r, ur], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        x0u, uu = uniq[:, :n], uniq[:, n:]
        K = x0u.shape[0]

        Z = np.repeat(x0u[:, None, :], M, axis=1)  # warm start: copy x0
        J = None
        for it in range(self.max_iters):
            R = self.residual(Z, x0u, uu, h)
            res = np.max(np.abs(R))
            if not np.isfinite(res):
                raise StepFailure(
                    f"collocation residual became non-finite at iteration {it}",
                    residual=float("inf"), iterations=it,
                )
            if res < self.newton_tol:
                break
            J = self._jacobian(Z, x0u, uu, h)
            try:
                dZ = np.linalg.solve(J, -R.reshape(K, M * n, 1))[..., 0]
            except np.linalg.LinAlgError as exc:
                raise StepFailure(
                    f"singular collocation Jacobian: {exc}",
                    residual=float(res), iterations=it,
                ) from exc
            Z = Z + dZ.reshape(K, M, n)
        else:
            R = self.residual(Z, x0u, uu, h)
            res = np.max(np.abs(R))
            if res >= self.newton_tol:
                raise StepFailure(
                    f"collocation Newton did not converge within {self.max_iters} iterations "
                    f"(residual {res:.3e})",
                    residual=float(res), iterations=self.max_iters,
                )

        Z_full = Z[inv]
        if is_complex:
            # propagate imaginary parts through the converged implicit map,
            # reusing one factorization per distinct interval
            Rc = self.residual(Z_full.astype(complex), x0b, ub, h)
            if J is None:
                J = self._jacobian(Z, x0u, uu, h)
            rhs = -Rc.imag.reshape(B, M * n)
            Zi = np.empty((B, M * n))
            for k in range(K):
                rows = np.flatnonzero(inv == k)
                try:
                    Zi[rows] = np.linalg.solve(J[k], rhs[rows].T).T
                except np.linalg.LinAlgError as exc:
                    raise StepFailure(
                        f"singular collocation Jacobian: {exc}",
                        residual=0.0, iterations=0,
                    ) from exc
            Z_full = Z_full + 1j * Zi.reshape(B, M, n)
            states = np.concatenate([x0b[:, None, :], Z_full], axis=1)
        else:
            states = np.concatenate([x0r[:, None, :], Z_full], axis=1)
        x1 = np.einsum("m,bmn->bn", self.basis.end_weights, states)
        return (x1[0], states[0]) if squeeze else (x1, states)


def _ode_residual(problem: OdeProblem, basis: LagrangeBasis):
    """Standard collocation residual: f(x at node) - interpolant slope."""
    D_int = basis.diff_matrix[1:, :]  # rows at interior nodes

    def residual(Z, x0, u, h):
        B, M, n = Z.shape
        states = np.concatenate([x0[:, None, :], Z], axis=1)  # (B, M+1, n)
        slope = np.einsum("jm,bmn->bjn", D_int, states) / h
        f = problem.rhs(Z.reshape(B * M, n), np.repeat(u, M, axis=0)).reshape(B, M, n)
        return f - slope

    return residual


def irk_step(problem: OdeProblem, basis: LagrangeBasis, x0, u, h: float,
             newton_tol: float = 1e-10, max_iters: int = 50):
    """Implicit Runge-Kutta step in collocation form.

    Enforces ``pdot(t_j) = f(p(t_j), u)`` at the interior Gauss nodes of the
    basis, with the interpolating polynomial pinned to ``x0`` at node 0, and
    returns the polynomial value at the interval end.

    Args:
        problem: The ODE.
        basis: Collocation basis (degree M).
        x0: Start state, (n_x,) or (B, n_x).
        u: Control, zero-order hold over the interval.
        h: Interval length.
        newton_tol: Newton residual tolerance (infinity norm).
        max_iters: Newton iteration cap.

    Returns:
        (x1, interval_states) as in :meth:`CollocationStepper.step`.
    """
    stepper = CollocationStepper(
        basis, _ode_residual(problem, basis), problem.n_x, problem.n_u,
        newton_tol=newton_tol, max_iters=max_iters,
    )
    return stepper.step(x0, u, h)


def adaptive_verify_integrate(problem: OdeProblem, x0, controls, knot_times,
                              rtol: float = 1e-3, atol: float = 1e-6) -> np.ndarray:
    """Re-integrate a control trajectory with an adaptive 8(5,3) Runge-Kutta.

    Integrates interval by interval (zero-order-hold controls) so control
    discontinuities at the knots never sit inside an adaptive step.  This is
    the verification oracle: apart from the right-hand side it shares no code
    with the fixed-step integrators.

    Args:
        problem: The ODE.
        x0: Initial state, (n_x,).
        controls: (N, n_u) knot controls.
        knot_times: (N+1,) strictly increasing knot times.
        rtol: Relative tolerance of the embedded error control.
        atol: Absolute tolerance of the embedded error control.

    Returns:
        (N+1, n_x) states at the knot times, starting with ``x0``.

    Raises:
        IntegrationBlowUp: If the adaptive integrator fails (for instance by
            step-size underflow); the error reports the failure time.
    """
    x0 = np.asarray(x0, dtype=float)
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    times = np.asarray(knot_times, dtype=float)
    if x0.shape != (problem.n_x,):
        raise DimensionMismatch(f"expected initial state of shape ({problem.n_x},)")
    if controls.shape != (len(times) - 1, problem.n_u):
        raise DimensionMismatch(
            f"expected controls of shape ({len(times) - 1}, {problem.n_u}), got {controls.shape}"
        )
    if np.any(np.diff(times) <= 0):
        raise DimensionMismatch("knot times must be strictly increasing")

    out = np.empty((len(times), problem.n_x))
    out[0] = x0
    x = x0
    for k in range(len(times) - 1):
        u = controls[k]

        def rhs(t, y, u=u):
            return problem.rhs(y[None, :], u[None, :])[0]

        sol = solve_ivp(
            rhs, (times[k], times[k + 1]), x, method="DOP853",
            rtol=rtol, atol=atol, dense_output=False,
        )
        if not sol.success:
            raise IntegrationBlowUp(
                f"adaptive integration failed on interval {k}: {sol.message}",
                step_index=k,
                time=float(sol.t[-1]),
            )
        x = sol.y[:, -1]
        out[k + 1] = x
    return out
