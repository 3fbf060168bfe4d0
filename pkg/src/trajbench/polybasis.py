"""Collocation grids and Lagrange interpolation bases on the unit interval.

A degree-M grid consists of the interval start ``t = 0`` plus the M
Gauss-Legendre points shifted into (0, 1).  States live on all M+1 nodes;
collocation conditions are imposed at the M interior points only, and the
interval end state is obtained by evaluating the interpolating polynomial at
``t = 1``, which is what stitches adjacent intervals together.

Basis values use the second barycentric form for numerical stability; the
plain product form is kept in the test suite as an independent cross-check,
not here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionMismatch

__all__ = [
    "CollocationGrid",
    "LagrangeBasis",
    "eval_basis",
    "eval_basis_derivative",
    "interval_end_state",
    "make_grid",
]

MAX_DEGREE = 9


def _gauss_legendre_unit(m: int, tol: float = 1e-14) -> np.ndarray:
    """Roots of the degree-m Legendre polynomial, shifted to (0, 1).

    Newton iteration on the three-term recurrence; converges quadratically
    from the classical cosine initial guesses.
    """
    k = np.arange(1, m + 1)
    x = np.cos(np.pi * (4 * k - 1) / (4 * m + 2))  # on (-1, 1), descending
    for _ in range(100):
        # evaluate P_m and P'_m by the recurrence
        p0 = np.ones_like(x)
        p1 = x.copy()
        for j in range(2, m + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        if m == 1:
            pm, dpm = p1, np.ones_like(x)
        else:
            pm = p1
            dpm = m * (x * p1 - p0) / (x * x - 1.0)
        dx = pm / dpm
        x -= dx
        if np.max(np.abs(dx)) < tol:
            break
    else:  # pragma: no cover - Newton always converges for these guesses
        raise ArithmeticError("Legendre node iteration did not converge")
    return np.sort((x + 1.0) / 2.0)


@dataclass(frozen=True)
class CollocationGrid:
    """Node set of one collocation interval.

    Attributes:
        degree: Polynomial degree M.
        nodes: All M+1 nodes in increasing order; ``nodes[0] == 0``.
        interior: The M collocation points (Gauss-Legendre, shifted).
    """

    degree: int
    nodes: np.ndarray
    interior: np.ndarray


def make_grid(degree: int) -> CollocationGrid:
    """Build the degree-M collocation grid {0} U Gauss-Legendre(0, 1).

    Args:
        degree: Polynomial degree, between 1 and 9.

    Raises:
        ConfigError: If the degree is outside the supported range.
    """
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= MAX_DEGREE:
        raise ConfigError(f"collocation degree must be an integer in [1, {MAX_DEGREE}], got {degree!r}")
    interior = _gauss_legendre_unit(int(degree))
    nodes = np.concatenate([[0.0], interior])
    nodes.flags.writeable = False
    interior.flags.writeable = False
    return CollocationGrid(degree=int(degree), nodes=nodes, interior=interior)


class LagrangeBasis:
    """Lagrange interpolation basis over a collocation grid.

    Attributes:
        grid: The underlying node set.
        nodes: Alias of ``grid.nodes``.
        weights: Barycentric weights of the nodes.
        diff_matrix: ``D[j, m] = dl_m/dt (nodes[j])``, shape (M+1, M+1);
            row j differentiates the interpolant at node j.
        end_weights: Basis values at ``t = 1``; combining node states with
            these weights evaluates the interpolant at the interval end.
    """

    def __init__(self, grid: CollocationGrid):
        self.grid = grid
        self.nodes = grid.nodes
        n = grid.nodes
        diff = n[:, None] - n[None, :]
        np.fill_diagonal(diff, 1.0)
        self.weights = 1.0 / np.prod(diff, axis=1)
        # classical differentiation matrix from barycentric weights
        m = len(n)
        D = np.zeros((m, m))
        for j in range(m):
            for k in range(m):
                if j != k:
                    D[j, k] = (self.weights[k] / self.weights[j]) / (n[j] - n[k])
            D[j, j] = -np.sum(D[j])
        D.flags.writeable = False
        self.diff_matrix = D
        self.end_weights = eval_basis(self, 1.0)
        self.end_weights.flags.writeable = False

    @property
    def degree(self) -> int:
        return self.grid.degree


def _check_unit_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > 1.0 + 1e-12):
        raise ContractViolation(
            f"basis evaluation time must lie in [0, 1], got {t!r}; "
            "interval end extrapolation goes through interval_end_state"
        )
    return t


def eval_basis(basis: LagrangeBasis, t) -> np.ndarray:
    """Values of all basis polynomials at time(s) ``t`` in [0, 1].

    Args:
        basis: Interpolation basis.
        t: Scalar or (T,) array of evaluation times.

    Returns:
        (M+1,) for scalar ``t``, else (T, M+1); rows sum to one.
    """
    t = _check_unit_time(t)
    scalar = t.ndim == 0
    tv = np.atleast_1d(t)[:, None]
    diff = tv - basis.nodes[None, :]
    out = np.empty((tv.shape[0], len(basis.nodes)))
    hit = np.abs(diff) < 1e-14
    any_hit = hit.any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = basis.weights[None, :] / diff
        out = terms / terms.sum(axis=1, keepdims=True)
    out[any_hit] = hit[any_hit].astype(float)
    return out[0] if scalar else out


def eval_basis_derivative(basis: LagrangeBasis, t) -> np.ndarray:
    """Time derivatives of all basis polynomials at ``t`` in [0, 1].

    Uses the product-rule expansion, which is exact at the nodes as well;
    rows sum to zero.

    Args:
        basis: Interpolation basis.
        t: Scalar or (T,) array of evaluation times.

    Returns:
        (M+1,) for scalar ``t``, else (T, M+1).
    """
    t = _check_unit_time(t)
    scalar = t.ndim == 0
    tv = np.atleast_1d(t)
    nodes = basis.nodes
    m = len(nodes)
    diff = tv[:, None] - nodes[None, :]  # (T, m)
    out = np.zeros((tv.shape[0], m))
    for k in range(m):
        others = [i for i in range(m) if i != k]
        acc = np.zeros(tv.shape[0])
        for j in others:
            prod = np.ones(tv.shape[0])
            for i in others:
                if i != j:
                    prod *= diff[:, i]
            acc += prod
        out[:, k] = basis.weights[k] * acc
    return out[0] if scalar else out


def interval_end_state(basis: LagrangeBasis, states) -> np.ndarray:
    """Interpolant value at the interval end ``t = 1``.

    Args:
        basis: Interpolation basis of degree M.
        states: Node states, shape (M+1, n) or (B, M+1, n).

    Returns:
        End state, shape (n,) or (B, n).
    """
    states = np.asarray(states)
    if states.shape[-2] != len(basis.nodes):
        raise DimensionMismatch(
            f"expected {len(basis.nodes)} node states, got {states.shape[-2]}"
        )
    return np.einsum("m,...mn->...n", basis.end_weights, states)
