"""Rigid multibody models and recursive dynamics kernels.

Spatial quantities follow the body-frame 6-vector convention with the angular
part first: a motion vector is ``[omega; v]`` and a force vector ``[torque;
force]``, both expressed in the coordinates of the body they belong to.
Kinematic trees are flattened to a chain of single-degree-of-freedom primitive
joints (revolute or prismatic); multi-axis joints are expanded into stacked
primitives separated by massless phantom bodies, so the configuration and
velocity spaces always have equal dimension and no unit-norm coordinates are
needed.

All kernels accept either a single state ``(n,)`` or a batch ``(B, n)`` and
evaluate the batch in lockstep.  They are written dtype-generically: feeding
complex inputs propagates imaginary parts exactly, which the derivative layer
uses for forward-mode directional differentiation through these exact code
paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import yaml

from .errors import ConfigError, DimensionMismatch, ModelError, NumericalError, SingularConstraintError

__all__ = [
    "ContactPoint",
    "MultibodyModel",
    "aba",
    "constrained_fd",
    "crba",
    "load_model",
    "model_from_dict",
    "nonlinear_effects",
    "point_position",
    "point_velocity",
    "rnea",
]

MODEL_FORMAT = "trajbench-model/1"

_BUNDLED_MODELS = ("leg3dof", "arm6dof_pendulum")


# ---------------------------------------------------------------------------
# small spatial-algebra helpers (internal)
# ---------------------------------------------------------------------------

def _skew(v):
    """3x3 cross-product matrix of a constant 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _rotation_coords(axis, q):
    """Coordinate-transform rotation E for a hinge angle batch.

    E maps vector coordinates from the parent-aligned frame to the child frame
    after the child rotated by ``q`` about ``axis``; this is the transpose of
    the Rodrigues matrix, assembled so complex ``q`` propagates exactly.

    Args:
        axis: Unit 3-vector, constant.
        q: Angles, shape (B,).

    Returns:
        (B, 3, 3) array.
    """
    K = _skew(axis)
    K2 = K @ K
    s = np.sin(q)[:, None, None]
    c1 = (1.0 - np.cos(q))[:, None, None]
    return np.eye(3) - s * K + c1 * K2


_ROLL1 = (1, 2, 0)
_ROLL2 = (2, 0, 1)


def _cross3(a, b):
    """Row-wise cross product for (B, 3) arrays (faster than np.cross here)."""
    return a[:, _ROLL1] * b[:, _ROLL2] - a[:, _ROLL2] * b[:, _ROLL1]


def _cross_motion(v, m):
    """Spatial motion cross product v x m for (B, 6) arrays."""
    w, vl = v[:, :3], v[:, 3:]
    mw, ml = m[:, :3], m[:, 3:]
    out = np.empty(np.broadcast_shapes(v.shape, m.shape), np.result_type(v, m))
    out[:, :3] = _cross3(w, mw)
    out[:, 3:] = _cross3(vl, mw) + _cross3(w, ml)
    return out


def _cross_force(v, f):
    """Spatial force cross product v x* f for (B, 6) arrays."""
    w, vl = v[:, :3], v[:, 3:]
    fw, fl = f[:, :3], f[:, 3:]
    out = np.empty(np.broadcast_shapes(v.shape, f.shape), np.result_type(v, f))
    out[:, :3] = _cross3(w, fw) + _cross3(vl, fl)
    out[:, 3:] = _cross3(w, fl)
    return out


def _mv(X, v):
    """Batched matrix-vector product (B, 6, 6) @ (B, 6)."""
    return (X @ v[:, :, None])[:, :, 0]


def _mtv(X, v):
    """Batched transposed matrix-vector product X^T v."""
    return (v[:, None, :] @ X)[:, 0, :]


def _congruence(X, A):
    """Batched X^T A X for (B, 6, 6) operands."""
    return X.transpose(0, 2, 1) @ A @ X


def _spatial_inertia(mass, com, inertia_com):
    """Spatial inertia about the body frame origin.

    Args:
        mass: Scalar mass.
        com: Centre of mass in body coordinates, (3,).
        inertia_com: Rotational inertia about the centre of mass, (3, 3).

    Returns:
        Symmetric (6, 6) array.
    """
    C = _skew(com)
    I = np.zeros((6, 6))
    I[:3, :3] = inertia_com + mass * (C @ C.T)
    I[:3, 3:] = mass * C
    I[3:, :3] = mass * C.T
    I[3:, 3:] = mass * np.eye(3)
    return I


def _placement_transform(xyz, rpy):
    """Motion transform from parent coordinates into a fixed child frame."""
    cr, sr = np.cos(rpy[0]), np.sin(rpy[0])
    cp, sp = np.cos(rpy[1]), np.sin(rpy[1])
    cy, sy = np.cos(rpy[2]), np.sin(rpy[2])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    E = (Rz @ Ry @ Rx).T
    X = np.zeros((6, 6))
    X[:3, :3] = E
    X[3:, 3:] = E
    X[3:, :3] = -E @ _skew(np.asarray(xyz, dtype=float))
    return X


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Primitive:
    """One single-DoF joint of the expanded tree (internal)."""

    name: str
    parent: int  # index of parent primitive, -1 for the fixed base
    kind: str  # 'revolute' | 'prismatic'
    axis: np.ndarray  # (3,) unit axis in the joint frame
    X_tree: np.ndarray  # (6, 6) placement of the joint frame in the parent frame
    inertia: np.ndarray  # (6, 6) spatial inertia carried by this primitive
    actuated: bool
    body: str | None  # body name if this primitive carries a physical body


@dataclass(frozen=True)
class ContactPoint:
    """A body-fixed point whose world-frame motion is constrained.

    Attributes:
        name: Identifier used in diagnostics.
        body: Body the point is attached to.
        point: Coordinates of the point in the body frame.
        directions: World axes that are blocked, subset of ``xyz``.
    """

    name: str
    body: str
    point: np.ndarray
    directions: str = "xyz"


@dataclass(frozen=True)
class MultibodyModel:
    """A kinematic tree flattened to primitive joints.

    Attributes:
        name: Model identifier.
        gravity: World-frame gravitational acceleration, (3,).
        primitives: Expanded single-DoF joints in topological order.
        contacts: Contact points available to :func:`constrained_fd`.
    """

    name: str
    gravity: np.ndarray
    primitives: tuple[_Primitive, ...]
    contacts: tuple[ContactPoint, ...] = ()
    _body_index: dict = field(default_factory=dict, repr=False)

    @property
    def n_q(self) -> int:
        """Number of configuration coordinates (= number of primitives)."""
        return len(self.primitives)

    @property
    def n_act(self) -> int:
        """Number of actuated degrees of freedom."""
        return int(np.sum(self.actuated_mask))

    @property
    def actuated_mask(self) -> np.ndarray:
        """(n_q,) boolean mask of actuated coordinates."""
        return np.array([p.actuated for p in self.primitives])

    @property
    def angular_mask(self) -> np.ndarray:
        """(n_q,) boolean mask, True where the coordinate is an angle."""
        return np.array([p.kind == "revolute" for p in self.primitives])

    @property
    def dof_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.primitives)

    def body_primitive(self, body: str) -> int:
        """Index of the primitive whose frame is the named body's frame."""
        try:
            return self._body_index[body]
        except KeyError:
            raise ModelError(f"model '{self.name}' has no body named '{body}'") from None

    def scatter_controls(self, u):
        """Map actuated joint forces to the full generalized-force vector.

        Args:
            u: (B, n_act) or (n_act,) actuated efforts.

        Returns:
            (B, n_q) full vector with zeros at unactuated coordinates.
        """
        u = np.atleast_2d(np.asarray(u))
        if u.shape[-1] != self.n_act:
            raise DimensionMismatch(f"expected {self.n_act} controls, got {u.shape[-1]}")
        tau = np.zeros((u.shape[0], self.n_q), dtype=u.dtype)
        tau[:, self.actuated_mask] = u
        return tau

    # -- internal helpers ---------------------------------------------------

    def _canon(self, *arrays):
        """Validate shapes and broadcast states to a common (B, n_q) batch."""
        n = self.n_q
        mats = []
        squeeze = True
        for a in arrays:
            a = np.asarray(a)
            if a.ndim == 1:
                a = a[None, :]
            elif a.ndim == 2:
                squeeze = False
            else:
                raise DimensionMismatch(f"expected (n,) or (B, n) array, got shape {a.shape}")
            if a.shape[1] != n:
                raise DimensionMismatch(f"expected {n} coordinates, got {a.shape[1]}")
            mats.append(a)
        B = max(m.shape[0] for m in mats)
        mats = [np.broadcast_to(m, (B, n)) if m.shape[0] != B else m for m in mats]
        dtype = np.result_type(*mats, np.float64)
        return [m.astype(dtype, copy=False) for m in mats], squeeze, dtype

    def _joint_transforms(self, q):
        """Per-primitive child-from-parent motion transforms, list of (B, 6, 6)."""
        B = q.shape[0]
        out = []
        for i, p in enumerate(self.primitives):
            if p.kind == "revolute":
                E = _rotation_coords(p.axis, q[:, i])
                XJ = np.zeros((B, 6, 6), dtype=q.dtype)
                XJ[:, :3, :3] = E
                XJ[:, 3:, 3:] = E
            else:
                XJ = np.broadcast_to(np.eye(6), (B, 6, 6)).astype(q.dtype).copy()
                r = q[:, i, None] * p.axis
                XJ[:, 3:, :3] = -_skew_batch(r)
            out.append(XJ @ p.X_tree)
        return out


def _skew_batch(r):
    """(B, 3) -> (B, 3, 3) cross-product matrices."""
    B = r.shape[0]
    S = np.zeros((B, 3, 3), dtype=r.dtype)
    S[:, 0, 1] = -r[:, 2]
    S[:, 0, 2] = r[:, 1]
    S[:, 1, 0] = r[:, 2]
    S[:, 1, 2] = -r[:, 0]
    S[:, 2, 0] = -r[:, 1]
    S[:, 2, 1] = r[:, 0]
    return S


# ---------------------------------------------------------------------------
# dynamics kernels
# ---------------------------------------------------------------------------

def _spatial_axis(p):
    S = np.zeros(6)
    if p.kind == "revolute":
        S[:3] = p.axis
    else:
        S[3:] = p.axis
    return S


def rnea(model: MultibodyModel, q, qdot, qddot, *, gravity=None):
    """Inverse dynamics by the recursive Newton-Euler two-pass sweep.

    Args:
        model: Multibody model.
        q, qdot, qddot: Position, velocity and acceleration, (n,) or (B, n).
        gravity: Optional override of the model's gravity vector.

    Returns:
        Generalized forces tau of the same leading shape as the inputs,
        satisfying ``M(q) qddot + N(q, qdot) = tau`` over all coordinates.
    """
    (q, qd, qdd), squeeze, dtype = model._canon(q, qdot, qddot)
    B, n = q.shape
    g = np.asarray(model.gravity if gravity is None else gravity, dtype=float)
    Xup = model._joint_transforms(q)
    a0 = np.zeros(6)
    a0[3:] = -g

    v = [None] * n
    a = [None] * n
    f = [None] * n
    for i, p in enumerate(model.primitives):
        S = _spatial_axis(p)
        vJ = S * qd[:, i, None]
        aJ = S * qdd[:, i, None]
        if p.parent < 0:
            v[i] = vJ
            a[i] = _mv(Xup[i], np.broadcast_to(a0, (B, 6)).astype(dtype)) + aJ
        else:
            v[i] = _mv(Xup[i], v[p.parent]) + vJ
            a[i] = _mv(Xup[i], a[p.parent]) + aJ + _cross_motion(v[i], vJ)
        Iv = v[i] @ p.inertia.T
        f[i] = a[i] @ p.inertia.T + _cross_force(v[i], Iv)

    tau = np.empty((B, n), dtype=dtype)
    for i in range(n - 1, -1, -1):
        p = model.primitives[i]
        tau[:, i] = f[i] @ _spatial_axis(p)
        if p.parent >= 0:
            f[p.parent] = f[p.parent] + _mtv(Xup[i], f[i])
    return tau[0] if squeeze else tau


def nonlinear_effects(model: MultibodyModel, q, qdot, *, gravity=None):
    """Coriolis, centrifugal and gravity forces ``N(q, qdot)``.

    Evaluated as inverse dynamics at zero acceleration.
    """
    q_arr = np.asarray(q)
    zero = np.zeros(q_arr.shape, dtype=q_arr.dtype)
    return rnea(model, q, qdot, zero, gravity=gravity)


def aba(model: MultibodyModel, q, qdot, tau, *, gravity=None):
    """Forward dynamics by the articulated-body three-pass sweep.

    Never forms or inverts the joint-space mass matrix.

    Args:
        model: Multibody model.
        q, qdot: State, (n,) or (B, n).
        tau: Full generalized-force vector (unselected), same shape.
        gravity: Optional override of the model's gravity vector.

    Returns:
        qddot with the same leading shape as the inputs.

    Raises:
        NumericalError: If an articulated inertia is singular along a joint
            axis (can only happen for degenerate mass distributions).
    """
    (q, qd, tau), squeeze, dtype = model._canon(q, qdot, tau)
    B, n = q.shape
    g = np.asarray(model.gravity if gravity is None else gravity, dtype=float)
    Xup = model._joint_transforms(q)

    v = [None] * n
    c = [None] * n
    IA = [None] * n
    pA = [None] * n
    for i, p in enumerate(model.primitives):
        S = _spatial_axis(p)
        vJ = S * qd[:, i, None]
        if p.parent < 0:
            v[i] = vJ
            c[i] = np.zeros((B, 6), dtype=dtype)
        else:
            v[i] = _mv(Xup[i], v[p.parent]) + vJ
            c[i] = _cross_motion(v[i], vJ)
        IA[i] = np.broadcast_to(p.inertia, (B, 6, 6)).astype(dtype).copy()
        Iv = v[i] @ p.inertia.T
        pA[i] = _cross_force(v[i], Iv)

    U = [None] * n
    d = [None] * n
    u = [None] * n
    for i in range(n - 1, -1, -1):
        p = model.primitives[i]
        S = _spatial_axis(p)
        U[i] = IA[i] @ S
        d[i] = U[i] @ S
        if np.any(np.abs(d[i].real) < 1e-14):
            raise NumericalError(
                f"singular articulated inertia along joint '{p.name}' of model '{model.name}'"
            )
        u[i] = tau[:, i] - pA[i] @ S
        if p.parent >= 0:
            Ia = IA[i] - U[i][:, :, None] * (U[i] / d[i][:, None])[:, None, :]
            pa = pA[i] + _mv(Ia, c[i]) + U[i] * (u[i] / d[i])[:, None]
            IA[p.parent] = IA[p.parent] + _congruence(Xup[i], Ia)
            pA[p.parent] = pA[p.parent] + _mtv(Xup[i], pa)

    a0 = np.zeros(6)
    a0[3:] = -g
    qdd = np.empty((B, n), dtype=dtype)
    acc = [None] * n
    for i, p in enumerate(model.primitives):
        S = _spatial_axis(p)
        if p.parent < 0:
            a = _mv(Xup[i], np.broadcast_to(a0, (B, 6)).astype(dtype)) + c[i]
        else:
            a = _mv(Xup[i], acc[p.parent]) + c[i]
        qdd[:, i] = (u[i] - (U[i] * a).sum(axis=1)) / d[i]
        acc[i] = a + S * qdd[:, i, None]
    return qdd[0] if squeeze else qdd


def crba(model: MultibodyModel, q):
    """Joint-space mass matrix by the composite rigid-body algorithm.

    Args:
        model: Multibody model.
        q: Configuration, (n,) or (B, n).

    Returns:
        Symmetric positive (semi)definite mass matrix, (n, n) or (B, n, n).
    """
    (q,), squeeze, dtype = model._canon(q)
    B, n = q.shape
    Xup = model._joint_transforms(q)
    Ic = [np.broadcast_to(p.inertia, (B, 6, 6)).astype(dtype).copy() for p in model.primitives]
    M = np.zeros((B, n, n), dtype=dtype)
    for i in range(n - 1, -1, -1):
        p = model.primitives[i]
        if p.parent >= 0:
            Ic[p.parent] = Ic[p.parent] + _congruence(Xup[i], Ic[i])
        S = _spatial_axis(p)
        F = Ic[i] @ S
        M[:, i, i] = F @ S
        j = i
        while model.primitives[j].parent >= 0:
            F = _mtv(Xup[j], F)
            j = model.primitives[j].parent
            M[:, i, j] = M[:, j, i] = F @ _spatial_axis(model.primitives[j])
    return M[0] if squeeze else M


# ---------------------------------------------------------------------------
# point kinematics
# ---------------------------------------------------------------------------

def _body_pose(model, q, body):
    """World rotation (world-from-body) and origin of a body frame.

    Returns:
        (R, o): R is (B, 3, 3) mapping body coords to world, o is (B, 3).
    """
    (q,), _, dtype = model._canon(q)
    idx = model.body_primitive(body)
    Xup = model._joint_transforms(q)
    B = q.shape[0]
    X = np.broadcast_to(np.eye(6), (B, 6, 6)).astype(dtype)
    chain = []
    j = idx
    while j >= 0:
        chain.append(j)
        j = model.primitives[j].parent
    for j in reversed(chain):
        X = Xup[j] @ X
    E = X[:, :3, :3]
    rx = -(E.transpose(0, 2, 1) @ X[:, 3:, :3])
    o = np.stack([rx[:, 2, 1], rx[:, 0, 2], rx[:, 1, 0]], axis=1)
    R = np.swapaxes(E, -1, -2)
    return R, o


def point_position(model: MultibodyModel, q, body: str, point):
    """World position of a body-fixed point.

    Args:
        model: Multibody model.
        q: Configuration, (n,) or (B, n).
        body: Body name.
        point: Point in body coordinates, (3,).

    Returns:
        World coordinates, (3,) or (B, 3).
    """
    squeeze = np.asarray(q).ndim == 1
    R, o = _body_pose(model, q, body)
    pos = o + R @ np.asarray(point, dtype=float)
    return pos[0] if squeeze else pos


def point_velocity(model: MultibodyModel, q, qdot, body: str, point):
    """World-frame velocity of a body-fixed point.

    Args:
        model: Multibody model.
        q, qdot: State, (n,) or (B, n).
        body: Body name.
        point: Point in body coordinates, (3,).

    Returns:
        World-frame velocity, (3,) or (B, 3).
    """
    (q, qd), squeeze, dtype = model._canon(q, qdot)
    idx = model.body_primitive(body)
    Xup = model._joint_transforms(q)
    B = q.shape[0]
    chain = []
    j = idx
    while j >= 0:
        chain.append(j)
        j = model.primitives[j].parent
    v = np.zeros((B, 6), dtype=dtype)
    for j in reversed(chain):
        p = model.primitives[j]
        v = _mv(Xup[j], v) + _spatial_axis(p) * qd[:, j, None]
    R, _ = _body_pose(model, q, body)
    p_local = np.asarray(point, dtype=float)
    vp_body = v[:, 3:] + _cross3(v[:, :3], np.broadcast_to(p_local, (B, 3)))
    vp = _mv(R, vp_body)
    return vp[0] if squeeze else vp


def _contact_rows(model, q, qdot):
    """Constraint matrix K(q) and bias Kdot qdot for the model's contacts.

    Rows are the blocked world-axis velocity components of each contact point,
    so ``K qdot`` is the blocked velocity and ``K qddot + Kdot qdot`` the
    blocked acceleration.

    Returns:
        (K, gamma, labels): K is (B, nc, n), gamma is (B, nc) containing
        ``Kdot qdot``, labels maps each row to its contact name.
    """
    (q, qd), _, dtype = model._canon(q, qdot)
    B, n = q.shape
    axes = {"x": 0, "y": 1, "z": 2}
    blocks = []
    bias = []
    labels = []
    h = 1e-150
    for ct in model.contacts:
        rows = [axes[c] for c in ct.directions]
        # linear map v_point = P(q) qdot, assembled column by column
        qr = np.repeat(q, n, axis=0)
        qd_cols = np.tile(np.eye(n), (B, 1)).astype(dtype)
        vp = point_velocity(model, qr, qd_cols, ct.body, ct.point)
        P = vp.reshape(B, n, 3).swapaxes(1, 2)
        # bias: directional derivative of v_point along qdot at fixed qdot
        vdot = point_velocity(model, q + 1j * h * qd, qd, ct.body, ct.point).imag / h
        blocks.append(P[:, rows, :])
        bias.append(vdot[:, rows])
        labels.extend([ct.name] * len(rows))
    K = np.concatenate(blocks, axis=1)
    gamma = np.concatenate(bias, axis=1)
    return K, gamma, labels


def _ldl_solve(A, b):
    """Solve a symmetric indefinite system via LDL^T with symmetric pivoting."""
    lu, dblk, perm = scipy.linalg.ldl(A)
    tri = lu[perm]
    bp = b[perm]
    y = scipy.linalg.solve_triangular(tri, bp, lower=True, unit_diagonal=True)
    m = np.linalg.solve(dblk, y)
    w = scipy.linalg.solve_triangular(tri.T, m, lower=False, unit_diagonal=True)
    x = np.empty_like(w)
    x[perm] = w
    return x


def constrained_fd(model: MultibodyModel, q, qdot, tau):
    """Forward dynamics subject to the model's point contact constraints.

    Solves the saddle-point system that couples the free dynamics with the
    contact-consistency condition ``K qddot = -Kdot qdot``::

        [ M(q)  K^T ] [ qddot  ]   [ tau - N(q, qdot) ]
        [ K     0   ] [ lambda ] = [ -Kdot qdot       ]

    via a dense LDL^T factorization with symmetric pivoting.

    Args:
        model: Model with at least one contact point.
        q, qdot: State, (n,) or (B, n); real-valued.
        tau: Full generalized-force vector.

    Returns:
        (qddot, lam): Accelerations and contact-force multipliers; ``lam`` has
        one entry per blocked direction, ordered as in ``model.contacts``.

    Raises:
        SingularConstraintError: If the constraint rows are rank deficient;
            the error names the first contact whose rows add no new rank.
    """
    if not model.contacts:
        raise ModelError(f"model '{model.name}' declares no contact points")
    (q, qd, tau), squeeze, dtype = model._canon(q, qdot, tau)
    if np.iscomplexobj(q) or np.iscomplexobj(qd) or np.iscomplexobj(tau):
        raise DimensionMismatch("constrained_fd supports real-valued input only")
    B, n = q.shape
    K, gamma, labels = _contact_rows(model, q, qd)
    nc = K.shape[1]
    M = crba(model, q)
    N = nonlinear_effects(model, q, qd)

    qdd = np.empty((B, n))
    lam = np.empty((B, nc))
    for b in range(B):
        rank_prev = 0
        for r in range(1, nc + 1):
            rank = np.linalg.matrix_rank(K[b, :r], tol=1e-10)
            if rank == rank_prev:
                raise SingularConstraintError(
                    f"contact constraint rows are rank deficient at row {r} "
                    f"(contact '{labels[r - 1]}')",
                    contact=labels[r - 1],
                )
            rank_prev = rank
        A = np.zeros((n + nc, n + nc))
        A[:n, :n] = M[b]
        A[:n, n:] = K[b].T
        A[n:, :n] = K[b]
        rhs = np.concatenate([tau[b] - N[b], -gamma[b]])
        try:
            sol = _ldl_solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"saddle-point solve failed: {exc}") from exc
        qdd[b] = sol[:n]
        lam[b] = sol[n:]
    return (qdd[0], lam[0]) if squeeze else (qdd, lam)


# ---------------------------------------------------------------------------
# model construction and the model definition file format
# ---------------------------------------------------------------------------

_JOINT_EXPANSIONS = {
    # type -> list of (kind, default axis or None when taken from the entry)
    "revolute": None,  # single axis from the entry
    "prismatic": None,
    "universal": None,  # two axes from the entry
    "spherical": [("revolute", (1, 0, 0)), ("revolute", (0, 1, 0)), ("revolute", (0, 0, 1))],
    # planar base: translation in the world XZ plane plus pitch about Y
    "planar": [("prismatic", (1, 0, 0)), ("prismatic", (0, 0, 1)), ("revolute", (0, 1, 0))],
    # spatial base: XYZ translation then yaw-pitch-roll rotation
    "floating": [
        ("prismatic", (1, 0, 0)),
        ("prismatic", (0, 1, 0)),
        ("prismatic", (0, 0, 1)),
        ("revolute", (0, 0, 1)),
        ("revolute", (0, 1, 0)),
        ("revolute", (1, 0, 0)),
    ],
}


def _unit_axis(axis, ctx):
    a = np.asarray(axis, dtype=float)
    if a.shape != (3,):
        raise ModelError(f"{ctx}: joint axis must be a 3-vector")
    norm = np.linalg.norm(a)
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-9:
        raise ModelError(f"{ctx}: joint axis must have unit norm, got |axis| = {norm:.6g}")
    return a


def _expand_joint(joint, ctx):
    """Expand a model-file joint entry to a list of (kind, axis) primitives."""
    jtype = joint.get("type")
    if jtype in ("revolute", "prismatic"):
        return [(jtype, _unit_axis(joint.get("axis", (0, 0, 1)), ctx))]
    if jtype == "universal":
        axes = joint.get("axes")
        if not isinstance(axes, (list, tuple)) or len(axes) != 2:
            raise ModelError(f"{ctx}: universal joint needs exactly two axes")
        return [("revolute", _unit_axis(ax, ctx)) for ax in axes]
    if jtype in ("spherical", "planar", "floating"):
        return [(kind, np.asarray(ax, dtype=float)) for kind, ax in _JOINT_EXPANSIONS[jtype]]
    raise ModelError(f"{ctx}: unknown joint type '{jtype}'")


def _inertia_matrix(values, ctx):
    v = np.asarray(values, dtype=float)
    if v.shape != (6,):
        raise ModelError(f"{ctx}: inertia must be [ixx, iyy, izz, ixy, ixz, iyz]")
    I = np.array([
        [v[0], v[3], v[4]],
        [v[3], v[1], v[5]],
        [v[4], v[5], v[2]],
    ])
    eig = np.linalg.eigvalsh(I)
    if eig[0] < -1e-12:
        raise ModelError(f"{ctx}: rotational inertia must be positive semidefinite")
    return I


def model_from_dict(spec: dict, *, name: str | None = None) -> MultibodyModel:
    """Build a model from a parsed definition dictionary.

    The dictionary uses the same schema as the model definition file; see
    :func:`load_model`.

    Raises:
        ModelError: On malformed entries, unknown parents, non-unit axes or
            indefinite inertia matrices.
    """
    bodies = spec.get("bodies")
    if not bodies:
        raise ModelError("model definition lists no bodies")
    gravity = np.asarray(spec.get("gravity", (0.0, 0.0, -9.81)), dtype=float)
    if gravity.shape != (3,):
        raise ModelError("gravity must be a 3-vector")

    primitives: list[_Primitive] = []
    body_index: dict[str, int] = {}
    for entry in bodies:
        bname = entry.get("name")
        ctx = f"body '{bname}'"
        if not bname or bname in body_index:
            raise ModelError(f"{ctx}: missing or duplicate body name")
        parent_name = entry.get("parent", "world")
        if parent_name == "world":
            parent = -1
        elif parent_name in body_index:
            parent = body_index[parent_name]
        else:
            raise ModelError(f"{ctx}: unknown parent '{parent_name}' (bodies must be listed parent-first)")
        placement = entry.get("placement", {})
        X_tree = _placement_transform(
            placement.get("xyz", (0.0, 0.0, 0.0)),
            np.asarray(placement.get("rpy", (0.0, 0.0, 0.0)), dtype=float),
        )
        mass = float(entry.get("mass", 0.0))
        if mass < 0:
            raise ModelError(f"{ctx}: negative mass")
        com = np.asarray(entry.get("com", (0.0, 0.0, 0.0)), dtype=float)
        I_com = _inertia_matrix(entry.get("inertia", np.zeros(6)), ctx)
        actuated = bool(entry.get("actuated", True))
        dofs = _expand_joint(entry.get("joint", {}), ctx)

        for k, (kind, axis) in enumerate(dofs):
            last = k == len(dofs) - 1
            primitives.append(
                _Primitive(
                    name=f"{bname}[{k}]" if len(dofs) > 1 else bname,
                    parent=parent,
                    kind=kind,
                    axis=axis,
                    X_tree=X_tree if k == 0 else np.eye(6),
                    inertia=_spatial_inertia(mass, com, I_com) if last else np.zeros((6, 6)),
                    actuated=actuated,
                    body=bname if last else None,
                )
            )
            parent = len(primitives) - 1
        body_index[bname] = len(primitives) - 1

    contacts = []
    for centry in spec.get("contacts", ()) or ():
        cname = centry.get("name") or f"contact{len(contacts)}"
        body = centry.get("body")
        if body not in body_index:
            raise ModelError(f"contact '{cname}': unknown body '{body}'")
        point = np.asarray(centry.get("point", (0.0, 0.0, 0.0)), dtype=float)
        directions = centry.get("directions", "xyz")
        if isinstance(directions, (list, tuple)):
            directions = "".join(directions)
        if not directions or any(c not in "xyz" for c in directions):
            raise ModelError(f"contact '{cname}': directions must be a subset of 'xyz'")
        contacts.append(ContactPoint(name=cname, body=body, point=point, directions=directions))

    return MultibodyModel(
        name=name or spec.get("name", "unnamed"),
        gravity=gravity,
        primitives=tuple(primitives),
        contacts=tuple(contacts),
        _body_index=body_index,
    )


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that records the line number of every mapping it builds."""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping["__line__"] = node.start_mark.line + 1
        return mapping


def _strip_lines(obj):
    if isinstance(obj, dict):
        return {k: _strip_lines(v) for k, v in obj.items() if k != "__line__"}
    if isinstance(obj, list):
        return [_strip_lines(v) for v in obj]
    return obj


def load_yaml_tagged(path: str, expected_format: str) -> dict:
    """Load a versioned YAML definition file with line-number bookkeeping.

    Args:
        path: File to read.
        expected_format: Required value of the top-level ``format`` tag.

    Returns:
        The parsed dictionary with ``__line__`` markers on every mapping.

    Raises:
        ConfigError: On unreadable files, YAML syntax errors (with the line
            from the parser) or a missing/mismatched format tag.
    """
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc}", path=str(path)) from exc
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigError(f"invalid YAML: {exc}", path=str(path), line=line) from exc
    if not isinstance(data, dict):
        raise ConfigError("file does not contain a mapping", path=str(path), line=1)
    tag = data.get("format")
    if tag != expected_format:
        raise ConfigError(
            f"format tag {tag!r} does not match expected {expected_format!r}",
            path=str(path),
            line=data.get("__line__", 1),
        )
    return data


def bundled_path(filename: str) -> str:
    """Absolute path of a definition file shipped inside the package."""
    from importlib import resources

    return str(resources.files("trajbench").joinpath("data", filename))


def load_model(source: str) -> MultibodyModel:
    """Load a model definition file.

    Args:
        source: Path to a definition file, or the name of a bundled model
            (``leg3dof`` or ``arm6dof_pendulum``).

    Returns:
        The expanded model.

    Raises:
        ConfigError: If the file cannot be parsed or fails validation; the
            error carries the file path and, when known, the line number.
    """
    import os

    path = source
    if not os.path.exists(path) and "/" not in source and source in _BUNDLED_MODELS:
        path = bundled_path(f"{source}.yaml")
    data = load_yaml_tagged(path, MODEL_FORMAT)
    try:
        return model_from_dict(_strip_lines(data))
    except ModelError as exc:
        line = _locate_line(data, str(exc))
        raise ConfigError(str(exc), path=str(path), line=line) from exc


def _locate_line(tagged: dict, message: str) -> int:
    """Best-effort line attribution: the body/contact named in the message."""
    for section in ("bodies", "contacts"):
        for entry in tagged.get(section, ()) or ():
            name = entry.get("name")
            if name and f"'{name}'" in message:
                return entry.get("__line__", tagged.get("__line__", 1))
    return tagged.get("__line__", 1)
