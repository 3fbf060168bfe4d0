"""Transcription of continuous optimal control problems into sparse NLPs.

Five schemes turn an :class:`OcpDefinition` into a :class:`TranscribedNlp`:

* ``MSE``    — multiple shooting, explicit RK4 integration per interval.
* ``MSI-FD`` — multiple shooting, implicit collocation step whose inner
  Newton enforces acceleration defects (forward dynamics).
* ``MSI-ID`` — same, but the inner defects match torques (inverse dynamics).
* ``DC-FD``  — direct collocation, acceleration defects as NLP rows.
* ``DC-ID``  — direct collocation, torque defects as NLP rows.

All schemes share the decision layout ``[knot states | interval collocation
states (DC only) | controls]``, the same knot-based forward-Euler cost
quadrature, the same boundary-condition rows, and box bounds applied at the
knots (collocation states get the state box).  Constraint callbacks are
batched and dtype-generic so the derivative layer can push imaginary seeds
through them unchanged.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import (
    ConfigError,
    DimensionMismatch,
    EvaluationFailure,
    IntegrationBlowUp,
    StepFailure,
)
from .integrators import CollocationStepper, OdeProblem, erk4_step, _ode_residual
from .nlpsolver import NlpProblem
from .polybasis import LagrangeBasis, make_grid
from .rigidbody import (
    MultibodyModel,
    aba,
    bundled_path,
    load_model,
    load_yaml_tagged,
    point_position,
    point_velocity,
    rnea,
)

__all__ = [
    "FORWARD_DYNAMICS",
    "INVERSE_DYNAMICS",
    "SCHEMES",
    "BoundaryCondition",
    "DecisionLayout",
    "LayoutSizes",
    "OcpDefinition",
    "RowTag",
    "TranscribedNlp",
    "Trajectory",
    "build",
    "build_dc",
    "build_mse",
    "build_msi",
    "cost_value",
    "layout_sizes",
    "load_ocp",
]

OCP_FORMAT = "trajbench-ocp/1"
SCHEMES = ("MSE", "MSI-FD", "MSI-ID", "DC-FD", "DC-ID")

FORWARD_DYNAMICS = "forward_dynamics"
INVERSE_DYNAMICS = "inverse_dynamics"
_DEFECT_MODES = (FORWARD_DYNAMICS, INVERSE_DYNAMICS)

_BUNDLED_OCPS = ("ocp1_leg", "ocp2_arm")

_BC_KINDS = (
    "point_position",
    "point_velocity",
    "joint_velocity",
    "static_torque",
    "point_pair_offset",
)


@dataclass(frozen=True)
class BoundaryCondition:
    """One equality block tied to the first or last knot.

    Kinds:
        point_position: world position of a body-fixed point equals target (3 rows).
        point_velocity: world velocity of a body-fixed point equals target (3 rows).
        joint_velocity: generalized velocities equal target (n_q rows).
        static_torque: rnea(q, 0, 0) - S u equals target, i.e. the knot's
            torques balance gravity so the accelerations vanish (n_q rows).
        point_pair_offset: position(point) - position(point_b) equals target
            (3 rows); expresses orientation facts like a rod standing upright.

    Attributes:
        kind: One of the kinds above.
        at: 't0' or 'tf'.
        target: Right-hand side vector.
        body: Body name for the point kinds.
        point: Body-frame point, (3,).
        point_b: Second body-frame point for point_pair_offset.
    """

    kind: str
    at: str
    target: tuple
    body: str | None = None
    point: tuple | None = None
    point_b: tuple | None = None

    def __post_init__(self):
        if self.kind not in _BC_KINDS:
            raise ConfigError(f"unknown boundary condition kind {self.kind!r}")
        if self.at not in ("t0", "tf"):
            raise ConfigError(f"boundary condition 'at' must be 't0' or 'tf', got {self.at!r}")
        if self.kind in ("point_position", "point_velocity", "point_pair_offset"):
            if self.body is None or self.point is None:
                raise ConfigError(f"{self.kind} requires 'body' and 'point'")
        if self.kind == "point_pair_offset" and self.point_b is None:
            raise ConfigError("point_pair_offset requires 'point_b'")
        tgt = () if self.target is None else tuple(np.atleast_1d(self.target).tolist())
        object.__setattr__(self, "target", tgt)

    def target_vector(self, model: MultibodyModel) -> np.ndarray:
        """Right-hand side as a full vector (empty target means zeros)."""
        n = self.n_rows(model)
        if not self.target:
            return np.zeros(n)
        return np.asarray(self.target, dtype=float)

    def n_rows(self, model: MultibodyModel) -> int:
        if self.kind in ("joint_velocity", "static_torque"):
            return model.n_q
        return 3


@dataclass
class OcpDefinition:
    """A fixed-horizon optimal control problem on a multibody model.

    The cost is the quadratic Lagrange integral
    ``int w_eff |tau|^2 + w_rate |taudot|^2 + w_vel |qdot|^2 dt``; boundary
    conditions are equality blocks at the first/last knot; all path
    constraints are box bounds on q, qdot and tau.

    Attributes:
        name: Identifier.
        model: The multibody model.
        n_intervals: Number of shooting/collocation intervals N.
        horizon: Final time T in seconds (fixed).
        degree: Collocation degree for the implicit/collocation schemes.
        effort_weight, effort_rate_weight, velocity_weight: Cost weights.
        q_lower, q_upper, qd_lower, qd_upper: State bounds, (n_q,).
        tau_lower, tau_upper: Control bounds, (n_u,).
        fixed_initial_velocity: If given, qdot at the first knot is pinned to
            this value through the bound box instead of constraint rows.
        boundary: Boundary-condition blocks.
        noise: Initial-guess noise magnitudes in percent per group
            ('q', 'qd', 'tau').
        start_count: Default multi-start count.
    """

    name: str
    model: MultibodyModel
    n_intervals: int
    horizon: float
    degree: int = 4
    effort_weight: float = 0.0
    effort_rate_weight: float = 0.0
    velocity_weight: float = 0.0
    q_lower: np.ndarray | None = None
    q_upper: np.ndarray | None = None
    qd_lower: np.ndarray | None = None
    qd_upper: np.ndarray | None = None
    tau_lower: np.ndarray | None = None
    tau_upper: np.ndarray | None = None
    fixed_initial_velocity: np.ndarray | None = None
    boundary: tuple = ()
    noise: dict = field(default_factory=dict)
    start_count: int = 100

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ConfigError(f"n_intervals must be >= 1, got {self.n_intervals}")
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        for wname in ("effort_weight", "effort_rate_weight", "velocity_weight"):
            if getattr(self, wname) < 0:
                raise ConfigError(f"{wname} must be >= 0")
        n_q, n_u = self.model.n_q, self.model.n_act

        def canon(value, default, size, label):
            if value is None:
                value = default
            arr = np.broadcast_to(np.asarray(value, dtype=float), (size,)).copy()
            return arr

        self.q_lower = canon(self.q_lower, -np.inf, n_q, "q_lower")
        self.q_upper = canon(self.q_upper, np.inf, n_q, "q_upper")
        self.qd_lower = canon(self.qd_lower, -np.inf, n_q, "qd_lower")
        self.qd_upper = canon(self.qd_upper, np.inf, n_q, "qd_upper")
        self.tau_lower = canon(self.tau_lower, -np.inf, n_u, "tau_lower")
        self.tau_upper = canon(self.tau_upper, np.inf, n_u, "tau_upper")
        for lo, hi, label in (
            (self.q_lower, self.q_upper, "q"),
            (self.qd_lower, self.qd_upper, "qd"),
            (self.tau_lower, self.tau_upper, "tau"),
        ):
            if np.any(lo > hi):
                raise ConfigError(f"{label} bounds have lower > upper")
        if self.fixed_initial_velocity is not None:
            self.fixed_initial_velocity = np.broadcast_to(
                np.asarray(self.fixed_initial_velocity, dtype=float), (n_q,)
            ).copy()
        self.boundary = tuple(self.boundary)
        for k, bc in enumerate(self.boundary):
            if bc.kind in ("point_position", "point_velocity", "point_pair_offset"):
                self.model.body_primitive(bc.body)  # validates the body name
            if bc.target and len(bc.target) != bc.n_rows(self.model):
                raise ConfigError(
                    f"boundary condition {k} ({bc.kind}) target needs "
                    f"{bc.n_rows(self.model)} entries, got {len(bc.target)}"
                )

    @property
    def n_q(self) -> int:
        return self.model.n_q

    @property
    def n_x(self) -> int:
        return 2 * self.model.n_q

    @property
    def n_u(self) -> int:
        return self.model.n_act

    @property
    def h(self) -> float:
        """Interval length T / N."""
        return self.horizon / self.n_intervals

    def boundary_rows(self) -> int:
        return int(sum(bc.n_rows(self.model) for bc in self.boundary))


class LayoutSizes(NamedTuple):
    """NLP size report: state variables, control variables, equality rows."""

    states: int
    controls: int
    equalities: int


@dataclass(frozen=True)
class DecisionLayout:
    """Named slices into the decision vector.

    Ordering: knot states x_0..x_N, then (DC only) interval collocation
    states x~_{n,m} for n = 0..N-1, m = 1..M, then controls u_0..u_{N-1}.
    """

    n_q: int
    n_u: int
    N: int
    M: int  # 0 for the shooting schemes

    @property
    def n_x(self) -> int:
        return 2 * self.n_q

    @property
    def n_states(self) -> int:
        return (self.N + 1) * self.n_x + self.N * self.M * self.n_x

    @property
    def n_controls(self) -> int:
        return self.N * self.n_u

    @property
    def n_dec(self) -> int:
        return self.n_states + self.n_controls

    def knot_state(self, n: int) -> slice:
        """Slice of knot state x_n (q then qdot)."""
        if not 0 <= n <= self.N:
            raise DimensionMismatch(f"knot index {n} outside 0..{self.N}")
        return slice(n * self.n_x, (n + 1) * self.n_x)

    def collocation_state(self, n: int, m: int) -> slice:
        """Slice of collocation state x~_{n,m}; m counts 1..M."""
        if self.M == 0:
            raise DimensionMismatch("shooting layouts have no collocation states")
        if not (0 <= n < self.N and 1 <= m <= self.M):
            raise DimensionMismatch(f"collocation index ({n},{m}) out of range")
        base = (self.N + 1) * self.n_x
        return slice(
            base + (n * self.M + m - 1) * self.n_x,
            base + (n * self.M + m) * self.n_x,
        )

    def control(self, n: int) -> slice:
        """Slice of interval control u_n."""
        if not 0 <= n < self.N:
            raise DimensionMismatch(f"control index {n} outside 0..{self.N - 1}")
        base = self.n_states
        return slice(base + n * self.n_u, base + (n + 1) * self.n_u)

    def views(self, X: np.ndarray):
        """Split a batched decision matrix (B, n_dec) into component views.

        Returns:
            (knots, colloc, controls): (B, N+1, n_x), (B, N, M, n_x) or None,
            (B, N, n_u).
        """
        B = X.shape[0]
        k_end = (self.N + 1) * self.n_x
        knots = X[:, :k_end].reshape(B, self.N + 1, self.n_x)
        colloc = None
        if self.M:
            z_end = k_end + self.N * self.M * self.n_x
            colloc = X[:, k_end:z_end].reshape(B, self.N, self.M, self.n_x)
        controls = X[:, self.n_states:].reshape(B, self.N, self.n_u)
        return knots, colloc, controls


@dataclass(frozen=True)
class RowTag:
    """Provenance of one constraint row.

    kind is 'continuity', 'consistency', 'defect' or 'boundary'; boundary
    rows use `interval` as the index into ocp.boundary and node None.
    """

    kind: str
    interval: int | None
    node: int | None
    coord: int


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed content of a decision vector.

    Attributes:
        times: Knot times, (N+1,).
        states: Knot states, (N+1, n_x).
        controls: Interval controls, (N, n_u).
        collocation_states: (N, M, n_x) interior states for DC schemes, else None.
        scheme: Transcription tag the vector came from.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    collocation_states: np.ndarray | None
    scheme: str


class TranscribedNlp:
    """A transcribed OCP: NLP problem plus layout and row bookkeeping.

    Attributes:
        ocp: The source definition.
        scheme: Transcription tag.
        layout: Decision-vector layout.
        problem: The :class:`NlpProblem` handed to solvers.
        provenance: One :class:`RowTag` per equality row.
    """

    def __init__(self, ocp, scheme, layout, problem, provenance, row_base):
        self.ocp = ocp
        self.scheme = scheme
        self.layout = layout
        self.problem = problem
        self.provenance = tuple(provenance)
        self._row_base = row_base

    @property
    def sizes(self) -> LayoutSizes:
        return LayoutSizes(
            states=self.layout.n_states,
            controls=self.layout.n_controls,
            equalities=self.problem.n_eq,
        )

    def row_index(self, kind: str, interval=None, node=None) -> int:
        """First row of the tagged block; inverse of the provenance tags."""
        try:
            return self._row_base[(kind, interval, node)]
        except KeyError:
            raise KeyError(f"no constraint block ({kind!r}, {interval}, {node})") from None

    def trajectory(self, x: np.ndarray) -> Trajectory:
        """Unpack a decision vector into knot/interval arrays."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.layout.n_dec,):
            raise DimensionMismatch(
                f"decision vector must have shape ({self.layout.n_dec},), got {x.shape}"
            )
        knots, colloc, controls = self.layout.views(x[None, :])
        times = self.ocp.h * np.arange(self.layout.N + 1)
        return Trajectory(
            times=times,
            states=knots[0].copy(),
            controls=controls[0].copy(),
            collocation_states=None if colloc is None else colloc[0].copy(),
            scheme=self.scheme,
        )

    def pack(self, trajectory: Trajectory) -> np.ndarray:
        """Assemble a decision vector from knot/interval arrays.

        Collocation entries are filled from ``trajectory.collocation_states``
        when present and compatible, otherwise seeded with the interval's
        start knot (so condensing between schemes is a pack of an unpack).
        """
        lay = self.layout
        states = np.asarray(trajectory.states, dtype=float)
        controls = np.asarray(trajectory.controls, dtype=float)
        if states.shape != (lay.N + 1, lay.n_x) or controls.shape != (lay.N, lay.n_u):
            raise DimensionMismatch("trajectory arrays do not match this layout")
        x = np.empty(lay.n_dec)
        k_end = (lay.N + 1) * lay.n_x
        x[:k_end] = states.ravel()
        if lay.M:
            z = trajectory.collocation_states
            if z is not None and np.shape(z) == (lay.N, lay.M, lay.n_x):
                x[k_end:lay.n_states] = np.asarray(z, dtype=float).ravel()
            else:
                seeded = np.repeat(states[:-1, None, :], lay.M, axis=1)
                x[k_end:lay.n_states] = seeded.ravel()
        x[lay.n_states:] = controls.ravel()
        return x


def cost_value(tnlp: TranscribedNlp, x: np.ndarray) -> float:
    """Objective value of a decision vector.

    Raises:
        DimensionMismatch: If the vector length does not match the layout.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (tnlp.layout.n_dec,):
        raise DimensionMismatch(
            f"decision vector must have shape ({tnlp.layout.n_dec},), got {x.shape}"
        )
    return float(np.asarray(tnlp.problem.cost(x[None, :]))[0])


# ---------------------------------------------------------------------------
# shared assembly pieces
# ---------------------------------------------------------------------------

def _ode_problem(model: MultibodyModel) -> OdeProblem:
    """The model's controlled dynamics xdot = [qdot; fd(q, qdot, S u)]."""
    n_q = model.n_q

    def rhs(x, u):
        q, qd = x[:, :n_q], x[:, n_q:]
        qdd = aba(model, q, qd, model.scatter_controls(u))
        return np.concatenate([qd, qdd], axis=-1)

    return OdeProblem(n_x=2 * n_q, n_u=model.n_act, rhs=rhs)


def _boundary_eval(ocp: OcpDefinition, knots, controls):
    """Evaluate all boundary blocks; (B, n_boundary)."""
    model, N, n_q = ocp.model, ocp.n_intervals, ocp.n_q
    B = knots.shape[0]
    out = []
    for bc in ocp.boundary:
        k = 0 if bc.at == "t0" else N
        q = knots[:, k, :n_q]
        qd = knots[:, k, n_q:]
        target = bc.target_vector(model)
        if bc.kind == "point_position":
            out.append(point_position(model, q, bc.body, np.asarray(bc.point)) - target)
        elif bc.kind == "point_velocity":
            out.append(point_velocity(model, q, qd, bc.body, np.asarray(bc.point)) - target)
        elif bc.kind == "joint_velocity":
            out.append(qd - target)
        elif bc.kind == "static_torque":
            zero = np.zeros_like(qd)
            hold = rnea(model, q, zero, zero)
            u_idx = 0 if bc.at == "t0" else N - 1
            out.append(hold - model.scatter_controls(controls[:, u_idx]) - target)
        elif bc.kind == "point_pair_offset":
            pa = point_position(model, q, bc.body, np.asarray(bc.point))
            pb = point_position(model, q, bc.body, np.asarray(bc.point_b))
            out.append(pa - pb - target)
    if not out:
        return np.zeros((B, 0))
    return np.concatenate(out, axis=1)


def _boundary_pattern(ocp: OcpDefinition, layout: DecisionLayout, row0: int):
    """Sparsity of the boundary blocks: (rows, cols) starting at row0."""
    rows, cols = [], []
    r = row0
    for bc in ocp.boundary:
        k = 0 if bc.at == "t0" else layout.N
        ks = layout.knot_state(k)
        q_cols = np.arange(ks.start, ks.start + layout.n_q)
        qd_cols = np.arange(ks.start + layout.n_q, ks.stop)
        if bc.kind == "point_position" or bc.kind == "point_pair_offset":
            block_cols = q_cols
        elif bc.kind == "point_velocity":
            block_cols = np.concatenate([q_cols, qd_cols])
        elif bc.kind == "joint_velocity":
            block_cols = qd_cols
        elif bc.kind == "static_torque":
            us = layout.control(0 if bc.at == "t0" else layout.N - 1)
            block_cols = np.concatenate([q_cols, np.arange(us.start, us.stop)])
        nr = bc.n_rows(ocp.model)
        rows.append(np.repeat(np.arange(r, r + nr), len(block_cols)))
        cols.append(np.tile(block_cols, nr))
        r += nr
    if not rows:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(rows), np.concatenate(cols)


def _bounds(ocp: OcpDefinition, layout: DecisionLayout):
    """Box bounds over the whole decision vector."""
    lb = np.empty(layout.n_dec)
    ub = np.empty(layout.n_dec)
    state_lb = np.concatenate([ocp.q_lower, ocp.qd_lower])
    state_ub = np.concatenate([ocp.q_upper, ocp.qd_upper])
    n_state_rows = (layout.N + 1) + layout.N * layout.M
    lb[: layout.n_states] = np.tile(state_lb, n_state_rows)
    ub[: layout.n_states] = np.tile(state_ub, n_state_rows)
    lb[layout.n_states:] = np.tile(ocp.tau_lower, layout.N)
    ub[layout.n_states:] = np.tile(ocp.tau_upper, layout.N)
    if ocp.fixed_initial_velocity is not None:
        ks = layout.knot_state(0)
        lb[ks.start + layout.n_q: ks.stop] = ocp.fixed_initial_velocity
        ub[ks.start + layout.n_q: ks.stop] = ocp.fixed_initial_velocity
    return lb, ub


def _cost_pieces(ocp: OcpDefinition, layout: DecisionLayout):
    """Quadratic knot-Euler cost: batched callback and its exact Hessian.

    The Lagrange integral is approximated by the forward Euler sum over
    the knots n = 0..N-1 (identical for every scheme); the torque-rate term
    uses first differences of consecutive interval controls.
    """
    h = ocp.h
    N, n_q, n_u = layout.N, layout.n_q, layout.n_u
    w_eff, w_rate, w_vel = ocp.effort_weight, ocp.effort_rate_weight, ocp.velocity_weight

    def cost(X):
        knots, _, U = layout.views(np.asarray(X))
        qd = knots[:, :N, n_q:]
        val = w_eff * np.einsum("bni,bni->b", U, U)
        val = val + w_vel * np.einsum("bni,bni->b", qd, qd)
        val = val * h
        if w_rate:
            dU = U[:, 1:] - U[:, :-1]
            val = val + (w_rate / h) * np.einsum("bni,bni->b", dU, dU)
        return val

    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    for n in range(N):
        ks = layout.knot_state(n)
        for i in range(n_q):
            j = ks.start + n_q + i
            add(j, j, 2.0 * w_vel * h)
        us = layout.control(n)
        for i in range(n_u):
            add(us.start + i, us.start + i, 2.0 * w_eff * h)
    if w_rate:
        f = 2.0 * w_rate / h
        for n in range(N - 1):
            a = layout.control(n).start
            b = layout.control(n + 1).start
            for i in range(n_u):
                add(a + i, a + i, f)
                add(b + i, b + i, f)
                add(a + i, b + i, -f)
                add(b + i, a + i, -f)
    H = sp.csr_matrix(
        (np.array(vals), (np.array(rows), np.array(cols))),
        shape=(layout.n_dec, layout.n_dec),
    )
    H.sum_duplicates()
    return cost, H


def _cross(row0, n_rows, cols):
    """All (row, col) pairs of a dense block."""
    cols = np.asarray(cols, dtype=int)
    return (
        np.repeat(np.arange(row0, row0 + n_rows), len(cols)),
        np.tile(cols, n_rows),
    )


def _knot_cols(layout, n):
    s = layout.knot_state(n)
    return np.arange(s.start, s.stop)


def _control_cols(layout, n):
    s = layout.control(n)
    return np.arange(s.start, s.stop)


def _interval_cols(layout, n):
    """Knot n, its collocation states, and control n."""
    parts = [_knot_cols(layout, n)]
    for m in range(1, layout.M + 1):
        s = layout.collocation_state(n, m)
        parts.append(np.arange(s.start, s.stop))
    parts.append(_control_cols(layout, n))
    return np.concatenate(parts)


def _finish(ocp, scheme, layout, eq, n_eq, pattern, provenance, row_base):
    cost, H = _cost_pieces(ocp, layout)
    lb, ub = _bounds(ocp, layout)
    # constraint curvature is separable over per-interval variable groups
    # (the trailing knot only ever enters rows nonlinearly via the boundary)
    blocks = tuple(_interval_cols(layout, n) for n in range(layout.N))
    blocks += (_knot_cols(layout, layout.N),)
    problem = NlpProblem(
        n=layout.n_dec,
        cost=cost,
        eq=eq,
        n_eq=n_eq,
        lb=lb,
        ub=ub,
        x0=np.clip(np.zeros(layout.n_dec), lb, ub),
        eq_pattern=pattern,
        cost_hessian=H,
        curvature_blocks=blocks,
        name=f"{ocp.name}:{scheme}",
    )
    return TranscribedNlp(ocp, scheme, layout, problem, provenance, row_base)


# ---------------------------------------------------------------------------
# scheme builders
# ---------------------------------------------------------------------------

def layout_sizes(ocp: OcpDefinition, scheme: str, degree: int | None = None) -> LayoutSizes:
    """Size report (state vars, control vars, equality rows) of a scheme.

    Shooting schemes count (N+1) knot states; collocation schemes add the
    N*M interval states.  Equalities count the continuity rows, the DC
    defect/consistency rows, and the problem's boundary blocks.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    M = (degree if degree is not None else ocp.degree) if scheme.startswith("DC") else 0
    layout = DecisionLayout(n_q=ocp.n_q, n_u=ocp.n_u, N=ocp.n_intervals, M=M)
    n_eq = ocp.n_intervals * layout.n_x + ocp.boundary_rows()
    if scheme.startswith("DC"):
        n_eq += ocp.n_intervals * M * layout.n_x
    return LayoutSizes(layout.n_states, layout.n_controls, n_eq)


def _shooting_common(ocp, scheme, step_fn):
    """Continuity-row assembly shared by MSE and MSI."""
    layout = DecisionLayout(n_q=ocp.n_q, n_u=ocp.n_u, N=ocp.n_intervals, M=0)
    N, n_x, n_u = layout.N, layout.n_x, layout.n_u
    h = ocp.h

    def eq(X):
        X = np.asarray(X)
        B = X.shape[0]
        knots, _, U = layout.views(X)
        x0s = knots[:, :-1].reshape(B * N, n_x)
        us = U.reshape(B * N, n_u)
        try:
            x1 = step_fn(x0s, us, h)
        except (StepFailure, IntegrationBlowUp) as exc:
            raise EvaluationFailure(f"interval integration failed: {exc}") from exc
        cont = knots[:, 1:].reshape(B * N, n_x) - x1
        bnd = _boundary_eval(ocp, knots, U)
        return np.concatenate([cont.reshape(B, N * n_x), bnd], axis=1)

    rows, cols = [], []
    provenance, row_base = [], {}
    for n in range(N):
        block_cols = np.concatenate(
            [_knot_cols(layout, n), _knot_cols(layout, n + 1), _control_cols(layout, n)]
        )
        r, c = _cross(n * n_x, n_x, block_cols)
        rows.append(r)
        cols.append(c)
        row_base[("continuity", n, None)] = n * n_x
        provenance.extend(RowTag("continuity", n, None, i) for i in range(n_x))
    bnd_row0 = N * n_x
    br, bc_cols = _boundary_pattern(ocp, layout, bnd_row0)
    rows.append(br)
    cols.append(bc_cols)
    r = bnd_row0
    for k, bc in enumerate(ocp.boundary):
        row_base[("boundary", k, None)] = r
        nr = bc.n_rows(ocp.model)
        provenance.extend(RowTag("boundary", k, None, i) for i in range(nr))
        r += nr
    pattern = (np.concatenate(rows), np.concatenate(cols))
    return _finish(ocp, scheme, layout, eq, r, pattern, provenance, row_base)


def build_mse(ocp: OcpDefinition) -> TranscribedNlp:
    """Multiple shooting with the explicit RK4 integrator (five substeps)."""
    ode = _ode_problem(ocp.model)

    def step(x0, u, h):
        return erk4_step(ode, x0, u, h, substeps=5)

    return _shooting_common(ocp, "MSE", step)


def _id_residual(model: MultibodyModel, basis: LagrangeBasis):
    """Inner torque-matching residual for the implicit shooting step.

    Per interior node: the coordinate polynomial's slope must equal the
    velocity states, and the torques reconstructed from the polynomial's
    acceleration must equal the applied controls.
    """
    D_int = basis.diff_matrix[1:, :]
    n_q = model.n_q

    def residual(Z, x0, u, h):
        B, M, n = Z.shape
        states = np.concatenate([x0[:, None, :], Z], axis=1)
        slope = np.einsum("jm,bmn->bjn", D_int, states) / h
        q = Z[..., :n_q].reshape(B * M, n_q)
        qd = Z[..., n_q:].reshape(B * M, n_q)
        qdd = slope[..., n_q:].reshape(B * M, n_q)
        tau = model.scatter_controls(np.repeat(u, M, axis=0))
        torque = (rnea(model, q, qd, qdd) - tau).reshape(B, M, n_q)
        vel = slope[..., :n_q] - Z[..., n_q:]
        return np.concatenate([vel, torque], axis=-1)

    return residual


def build_msi(ocp: OcpDefinition, mode: str) -> TranscribedNlp:
    """Multiple shooting with the implicit collocation step.

    The interval states never appear in the NLP: the step's inner Newton
    eliminates them against defects chosen by ``mode`` (acceleration
    matching via forward dynamics, or torque matching via inverse dynamics).
    Inner Newton failures surface as evaluation failures so the outer solver
    treats the trial point as rejected.
    """
    if mode not in _DEFECT_MODES:
        raise ConfigError(f"unknown defect mode {mode!r}; expected one of {_DEFECT_MODES}")
    basis = LagrangeBasis(make_grid(ocp.degree))
    if mode == FORWARD_DYNAMICS:
        residual = _ode_residual(_ode_problem(ocp.model), basis)
        tag = "MSI-FD"
    else:
        residual = _id_residual(ocp.model, basis)
        tag = "MSI-ID"
    stepper = CollocationStepper(basis, residual, n_x=ocp.n_x, n_u=ocp.n_u)

    def step(x0, u, h):
        x1, _ = stepper.step(x0, u, h)
        return x1

    return _shooting_common(ocp, tag, step)


def build_dc(ocp: OcpDefinition, mode: str, degree: int | None = None) -> TranscribedNlp:
    """Direct collocation: interval states are variables, defects are rows.

    Per collocation node the scheme emits the coordinate-consistency rows
    (coordinate polynomial slope equals the velocity states) followed by the
    defect rows (acceleration matching under ``forward_dynamics``, torque
    matching under ``inverse_dynamics``); interval continuity then pins each
    next knot to the interpolant's end value.
    """
    if mode not in _DEFECT_MODES:
        raise ConfigError(f"unknown defect mode {mode!r}; expected one of {_DEFECT_MODES}")
    M = degree if degree is not None else ocp.degree
    basis = LagrangeBasis(make_grid(M))
    layout = DecisionLayout(n_q=ocp.n_q, n_u=ocp.n_u, N=ocp.n_intervals, M=M)
    model = ocp.model
    N, n_q, n_x, n_u = layout.N, layout.n_q, layout.n_x, layout.n_u
    h = ocp.h
    D_int = basis.diff_matrix[1:, :]
    end_w = basis.end_weights
    fd = mode == FORWARD_DYNAMICS
    scheme = "DC-FD" if fd else "DC-ID"

    def eq(X):
        X = np.asarray(X)
        B = X.shape[0]
        knots, Z, U = layout.views(X)
        states = np.concatenate([knots[:, :-1, None, :], Z], axis=2)  # (B,N,M+1,n_x)
        slope = np.einsum("jm,bnmx->bnjx", D_int, states) / h
        q = Z[..., :n_q].reshape(-1, n_q)
        qd = Z[..., n_q:].reshape(-1, n_q)
        tau = model.scatter_controls(
            np.broadcast_to(U[:, :, None, :], (B, N, M, n_u)).reshape(-1, n_u)
        )
        consistency = slope[..., :n_q] - Z[..., n_q:]
        if fd:
            qdd = aba(model, q, qd, tau).reshape(B, N, M, n_q)
            defect = slope[..., n_q:] - qdd
        else:
            qdd_poly = slope[..., n_q:].reshape(-1, n_q)
            defect = (rnea(model, q, qd, qdd_poly) - tau).reshape(B, N, M, n_q)
        node_rows = np.concatenate([consistency, defect], axis=-1)  # (B,N,M,n_x)
        cont = knots[:, 1:] - np.einsum("m,bnmx->bnx", end_w, states)
        bnd = _boundary_eval(ocp, knots, U)
        return np.concatenate(
            [node_rows.reshape(B, -1), cont.reshape(B, -1), bnd], axis=1
        )

    rows, cols = [], []
    provenance, row_base = [], {}
    for n in range(N):
        icols = _interval_cols(layout, n)
        for m in range(1, M + 1):
            r0 = (n * M + (m - 1)) * n_x
            r, c = _cross(r0, n_x, icols)
            rows.append(r)
            cols.append(c)
            row_base[("consistency", n, m)] = r0
            row_base[("defect", n, m)] = r0 + n_q
            provenance.extend(RowTag("consistency", n, m, i) for i in range(n_q))
            provenance.extend(RowTag("defect", n, m, i) for i in range(n_q))
    cont_row0 = N * M * n_x
    for n in range(N):
        block_cols = np.concatenate(
            [_interval_cols(layout, n)[:-n_u], _knot_cols(layout, n + 1)]
        )
        r, c = _cross(cont_row0 + n * n_x, n_x, block_cols)
        rows.append(r)
        cols.append(c)
        row_base[("continuity", n, None)] = cont_row0 + n * n_x
        provenance.extend(RowTag("continuity", n, None, i) for i in range(n_x))
    bnd_row0 = cont_row0 + N * n_x
    br, bc_cols = _boundary_pattern(ocp, layout, bnd_row0)
    rows.append(br)
    cols.append(bc_cols)
    r = bnd_row0
    for k, bc in enumerate(ocp.boundary):
        row_base[("boundary", k, None)] = r
        nr = bc.n_rows(ocp.model)
        provenance.extend(RowTag("boundary", k, None, i) for i in range(nr))
        r += nr
    pattern = (np.concatenate(rows), np.concatenate(cols))
    return _finish(ocp, scheme, layout, eq, r, pattern, provenance, row_base)


def build(ocp: OcpDefinition, scheme: str, degree: int | None = None) -> TranscribedNlp:
    """Dispatch on a transcription tag from :data:`SCHEMES`."""
    if scheme == "MSE":
        return build_mse(ocp)
    if scheme == "MSI-FD":
        return build_msi(ocp, FORWARD_DYNAMICS)
    if scheme == "MSI-ID":
        return build_msi(ocp, INVERSE_DYNAMICS)
    if scheme == "DC-FD":
        return build_dc(ocp, FORWARD_DYNAMICS, degree)
    if scheme == "DC-ID":
        return build_dc(ocp, INVERSE_DYNAMICS, degree)
    raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# ---------------------------------------------------------------------------
# definition files
# ---------------------------------------------------------------------------

def _parse_bounds(entry, size, label, path, line):
    """Accept [lo, hi] scalars or {lower: [...], upper: [...]} vectors."""
    if entry is None:
        return None, None
    if isinstance(entry, dict):
        entry = {k: v for k, v in entry.items() if k != "__line__"}
        try:
            lo, hi = entry["lower"], entry["upper"]
        except KeyError as exc:
            raise ConfigError(
                f"bounds for {label} need 'lower' and 'upper'", path=path, line=line
            ) from exc
    else:
        if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
            raise ConfigError(
                f"bounds for {label} must be [lower, upper]", path=path, line=line
            )
        lo, hi = entry
    try:
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (size,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (size,)).copy()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed bounds for {label}: {exc}", path=path, line=line) from exc
    return lo, hi


def load_ocp(source: str) -> OcpDefinition:
    """Load an OCP definition file (or a bundled definition by name).

    The schema mirrors :class:`OcpDefinition`: model reference (bundled name
    or path relative to the file), horizon block {N, T}, cost weights,
    bounds per group, boundary-condition list, noise magnitudes.

    Raises:
        ConfigError: With file/line attribution on any malformed entry.
    """
    path = source
    if not os.path.exists(path) and "/" not in source and source in _BUNDLED_OCPS:
        path = bundled_path(f"{source}.yaml")
    data = load_yaml_tagged(path, OCP_FORMAT)
    top_line = data.get("__line__", 1)

    def need(key, where=data, line=None):
        if key not in where:
            raise ConfigError(
                f"missing required field {key!r}",
                path=path,
                line=line or where.get("__line__", top_line),
            )
        return where[key]

    model_ref = need("model")
    model_path = model_ref
    if not os.path.isabs(model_path) and not os.path.exists(model_path):
        sibling = os.path.join(os.path.dirname(os.path.abspath(path)), model_ref)
        model_path = sibling if os.path.exists(sibling) else model_ref
    model = load_model(model_path)

    horizon = need("horizon")
    if not isinstance(horizon, dict):
        raise ConfigError("'horizon' must be a mapping {N, T}", path=path, line=top_line)
    h_line = horizon.get("__line__", top_line)
    N = need("N", horizon, h_line)
    T = need("T", horizon, h_line)

    cost = data.get("cost", {}) or {}
    c_line = cost.get("__line__", top_line) if isinstance(cost, dict) else top_line

    bounds = data.get("bounds", {}) or {}
    b_line = bounds.get("__line__", top_line) if isinstance(bounds, dict) else top_line
    q_lo, q_hi = _parse_bounds(bounds.get("q"), model.n_q, "q", path, b_line)
    qd_lo, qd_hi = _parse_bounds(bounds.get("qd"), model.n_q, "qd", path, b_line)
    tau_lo, tau_hi = _parse_bounds(bounds.get("tau"), model.n_act, "tau", path, b_line)

    fixed_qd0 = data.get("fixed_initial_velocity")

    bcs = []
    for entry in data.get("boundary", []) or []:
        if not isinstance(entry, dict):
            raise ConfigError("boundary entries must be mappings", path=path, line=top_line)
        e_line = entry.get("__line__", top_line)
        entry = {k: v for k, v in entry.items() if k != "__line__"}
        try:
            bcs.append(
                BoundaryCondition(
                    kind=entry.get("kind"),
                    at=entry.get("at"),
                    target=tuple(np.atleast_1d(entry.get("target", 0.0)).tolist())
                    if entry.get("target") is not None else (),
                    body=entry.get("body"),
                    point=None if entry.get("point") is None else tuple(entry["point"]),
                    point_b=None if entry.get("point_b") is None else tuple(entry["point_b"]),
                )
            )
        except ConfigError as exc:
            raise ConfigError(str(exc), path=path, line=e_line) from None

    noise = {
        k: float(v)
        for k, v in (data.get("noise", {}) or {}).items()
        if k != "__line__"
    }
    for group, mag in noise.items():
        if group not in ("q", "qd", "tau"):
            raise ConfigError(f"unknown noise group {group!r}", path=path, line=top_line)
        if not 0.0 <= mag <= 100.0:
            raise ConfigError(
                f"noise magnitude for {group!r} must be in [0, 100], got {mag}",
                path=path,
                line=top_line,
            )

    try:
        ocp = OcpDefinition(
            name=data.get("name", os.path.splitext(os.path.basename(path))[0]),
            model=model,
            n_intervals=int(N),
            horizon=float(T),
            degree=int(data.get("degree", 4)),
            effort_weight=float(cost.get("effort_weight", 0.0)),
            effort_rate_weight=float(cost.get("effort_rate_weight", 0.0)),
            velocity_weight=float(cost.get("velocity_weight", 0.0)),
            q_lower=q_lo, q_upper=q_hi,
            qd_lower=qd_lo, qd_upper=qd_hi,
            tau_lower=tau_lo, tau_upper=tau_hi,
            fixed_initial_velocity=fixed_qd0,
            boundary=tuple(bcs),
            noise=noise,
            start_count=int(data.get("start_count", 100)),
        )
    except ConfigError as exc:
        if exc.path is None:
            raise ConfigError(str(exc), path=path, line=top_line) from None
        raise
    return ocp
