"""Planar rigid-body dynamics for forests of articulated chains.

Each segment has exactly one inboard joint: a revolute joint about the
plane normal, or a 3-DOF planar-free joint (x, y, rotation) connecting a
tree root to the world. Dynamics follow

    M(q) qdd + c(q, qd) = Q_applied

with ``M`` assembled by the composite-rigid-body method and ``c`` (gravity,
velocity-product terms and passive joint stiffness/damping) by recursive
Newton-Euler, both carried out with planar spatial vectors
``(omega, v_x, v_y)`` expressed in world axes.

The numerical kernels are compiled with numba and operate on the flat
:class:`ModelArrays` view of a :class:`ModelTopology`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numba import njit

from .errors import (
    InvalidArgumentError,
    NotFoundError,
    NumericalFailureError,
    SimulationDivergedError,
)

REVOLUTE = 0
FREE = 1

# Regularization for point masses on floating bases (kg m^2).
POINT_MASS_INERTIA = 1e-9

DEFAULT_CONTACT_STIFFNESS = 5e4
DEFAULT_CONTACT_DAMPING = 500.0
DEFAULT_TANGENTIAL_DAMPING = 500.0
DEFAULT_FRICTION = 0.9
DEFAULT_LIMIT_STIFFNESS = 200.0


@dataclass(frozen=True)
class SegmentDef:
    """A rigid segment. Lengths in m, mass in kg, inertia about the COM in kg m^2.

    The segment frame has its origin at the inboard joint.
    """

    name: str
    mass: float
    inertia_zz: float
    com_offset: tuple[float, float] = (0.0, 0.0)
    length: float = 0.0
    attached_points: tuple[tuple[str, tuple[float, float]], ...] = ()

    def __post_init__(self):
        if self.mass < 0 or self.inertia_zz < 0 or self.length < 0:
            raise InvalidArgumentError(
                f"segment {self.name!r}: mass, inertia and length must be >= 0"
            )
        names = [p[0] for p in self.attached_points]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"segment {self.name!r}: duplicate point names")
        object.__setattr__(self, "com_offset", tuple(float(v) for v in self.com_offset))
        object.__setattr__(
            self,
            "attached_points",
            tuple((n, (float(p[0]), float(p[1]))) for n, p in self.attached_points),
        )

    def point(self, name: str) -> tuple[float, float]:
        for n, p in self.attached_points:
            if n == name:
                return p
        raise NotFoundError(f"segment {self.name!r} has no point {name!r}")


@dataclass(frozen=True)
class JointDef:
    """Inboard joint of ``child``.

    ``kind`` is ``"revolute"`` or ``"free"``. ``axis`` (+1/-1) sets the sign
    of a revolute coordinate relative to counter-clockwise rotation. For a
    free joint ``anchor`` is a world offset added to the (x, y) coordinates.
    Passive stiffness acts about ``neutral``.
    """

    name: str
    parent: str | None
    child: str
    kind: str = "revolute"
    anchor: tuple[float, float] = (0.0, 0.0)
    limits: tuple[float, float] = (-math.inf, math.inf)
    passive_stiffness: float = 0.0
    passive_damping: float = 0.0
    axis: float = 1.0
    neutral: float = 0.0

    def __post_init__(self):
        if self.kind not in ("revolute", "free"):
            raise InvalidArgumentError(f"joint {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "free" and self.parent is not None:
            raise InvalidArgumentError(f"joint {self.name!r}: free joints must attach to the world")
        if not self.limits[0] <= self.limits[1]:
            raise InvalidArgumentError(f"joint {self.name!r}: limits out of order")
        if self.passive_stiffness < 0 or self.passive_damping < 0:
            raise InvalidArgumentError(f"joint {self.name!r}: negative passive coefficients")
        if self.axis not in (1.0, -1.0):
            raise InvalidArgumentError(f"joint {self.name!r}: axis must be +1 or -1")
        object.__setattr__(self, "anchor", tuple(float(v) for v in self.anchor))
        object.__setattr__(self, "limits", (float(self.limits[0]), float(self.limits[1])))

    @property
    def ndof(self) -> int:
        return 3 if self.kind == "free" else 1


@dataclass(frozen=True)
class ContactPoint:
    segment: str
    point: tuple[float, float]
    stiffness: float = DEFAULT_CONTACT_STIFFNESS
    damping: float = DEFAULT_CONTACT_DAMPING
    friction: float = DEFAULT_FRICTION
    tangential_damping: float = DEFAULT_TANGENTIAL_DAMPING


class ModelArrays(NamedTuple):
    """Flat numeric view of a topology, consumed by the compiled kernels."""

    parent: np.ndarray
    jtype: np.ndarray
    jaxis: np.ndarray
    anchor: np.ndarray
    dof0: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    com: np.ndarray
    gravity: np.ndarray
    k_pass: np.ndarray
    d_pass: np.ndarray
    q_neutral: np.ndarray
    q_low: np.ndarray
    q_high: np.ndarray
    limit_k: float
    c_body: np.ndarray
    c_local: np.ndarray
    c_k: np.ndarray
    c_c: np.ndarray
    c_ct: np.ndarray
    c_mu: np.ndarray


@dataclass(frozen=True)
class ModelTopology:
    """Immutable kinematic forest with gravity and ground-contact points.

    Segments are reordered so that every parent precedes its children;
    generalized coordinates follow that order. ``dof_index`` maps each joint
    name to its coordinate slice.
    """

    segments: tuple[SegmentDef, ...]
    joints: tuple[JointDef, ...]
    gravity: tuple[float, float] = (0.0, -9.81)
    contact_points: tuple[ContactPoint, ...] = ()
    limit_stiffness: float = DEFAULT_LIMIT_STIFFNESS
    dof_index: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        segs = {s.name: s for s in self.segments}
        if len(segs) != len(self.segments):
            raise InvalidArgumentError("duplicate segment names")
        by_child = {}
        for j in self.joints:
            if j.child not in segs:
                raise NotFoundError(f"joint {j.name!r}: unknown child {j.child!r}")
            if j.parent is not None and j.parent not in segs:
                raise NotFoundError(f"joint {j.name!r}: unknown parent {j.parent!r}")
            if j.child in by_child:
                raise InvalidArgumentError(f"segment {j.child!r} has more than one inboard joint")
            by_child[j.child] = j
        if len(set(j.name for j in self.joints)) != len(self.joints):
            raise InvalidArgumentError("duplicate joint names")
        missing = [s for s in segs if s not in by_child]
        if missing:
            raise InvalidArgumentError(f"segments without an inboard joint: {missing}")

        # stable topological order; anything left over sits on a cycle
        order: list[str] = []
        placed: set[str] = set()
        remaining = [s.name for s in self.segments]
        while remaining:
            progressed = False
            rest = []
            for name in remaining:
                par = by_child[name].parent
                if par is None or par in placed:
                    order.append(name)
                    placed.add(name)
                    progressed = True
                else:
                    rest.append(name)
            if not progressed:
                raise InvalidArgumentError(f"joint graph contains a cycle through {rest}")
            remaining = rest

        object.__setattr__(self, "segments", tuple(segs[n] for n in order))
        object.__setattr__(self, "joints", tuple(by_child[n] for n in order))
        object.__setattr__(self, "gravity", (float(self.gravity[0]), float(self.gravity[1])))
        object.__setattr__(self, "contact_points", tuple(self.contact_points))
        index, start = {}, 0
        for j in self.joints:
            index[j.name] = slice(start, start + j.ndof)
            start += j.ndof
        object.__setattr__(self, "dof_index", index)
        for c in self.contact_points:
            self.segment_index(c.segment)

    @property
    def ndof(self) -> int:
        return sum(j.ndof for j in self.joints)

    @cached_property
    def _seg_pos(self) -> dict:
        return {s.name: i for i, s in enumerate(self.segments)}

    def segment_index(self, name: str) -> int:
        try:
            return self._seg_pos[name]
        except KeyError:
            raise NotFoundError(f"unknown segment {name!r}") from None

    def segment(self, name: str) -> SegmentDef:
        return self.segments[self.segment_index(name)]

    def joint(self, name: str) -> JointDef:
        for j in self.joints:
            if j.name == name:
                return j
        raise NotFoundError(f"unknown joint {name!r}")

    def dof(self, joint: str) -> int:
        """First coordinate index of ``joint``."""
        try:
            return self.dof_index[joint].start
        except KeyError:
            raise NotFoundError(f"unknown joint {joint!r}") from None

    def resolve_point(self, segment: str, point) -> tuple[int, np.ndarray]:
        """Return (segment index, local coordinates) for a named or literal point."""
        idx = self.segment_index(segment)
        if isinstance(point, str):
            local = self.segments[idx].point(point)
        else:
            local = point
        return idx, np.asarray(local, dtype=float)

    def coordinate_names(self) -> list[str]:
        names = []
        for j in self.joints:
            if j.kind == "free":
                names += [f"{j.name}_x", f"{j.name}_y", f"{j.name}_rot"]
            else:
                names.append(j.name)
        return names

    @cached_property
    def arrays(self) -> ModelArrays:
        nb = len(self.segments)
        n = self.ndof
        pos = self._seg_pos
        parent = np.full(nb, -1, dtype=np.int64)
        jtype = np.zeros(nb, dtype=np.int64)
        jaxis = np.ones(nb)
        anchor = np.zeros((nb, 2))
        dof0 = np.zeros(nb, dtype=np.int64)
        mass = np.zeros(nb)
        inertia = np.zeros(nb)
        com = np.zeros((nb, 2))
        k_pass = np.zeros(n)
        d_pass = np.zeros(n)
        q_neutral = np.zeros(n)
        q_low = np.full(n, -np.inf)
        q_high = np.full(n, np.inf)
        for i, (s, j) in enumerate(zip(self.segments, self.joints)):
            parent[i] = -1 if j.parent is None else pos[j.parent]
            jtype[i] = FREE if j.kind == "free" else REVOLUTE
            jaxis[i] = j.axis
            anchor[i] = j.anchor
            d = self.dof_index[j.name].start
            dof0[i] = d
            mass[i] = s.mass
            inertia[i] = s.inertia_zz
            if j.kind == "free" and s.inertia_zz == 0.0:
                inertia[i] = POINT_MASS_INERTIA
            com[i] = s.com_offset
            if j.kind == "revolute":
                k_pass[d] = j.passive_stiffness
                d_pass[d] = j.passive_damping
                q_neutral[d] = j.neutral
                q_low[d], q_high[d] = j.limits
        nc = len(self.contact_points)
        c_body = np.zeros(nc, dtype=np.int64)
        c_local = np.zeros((nc, 2))
        c_k, c_c, c_ct, c_mu = (np.zeros(nc) for _ in range(4))
        for k, c in enumerate(self.contact_points):
            c_body[k], c_local[k] = self.resolve_point(c.segment, c.point)
            c_k[k], c_c[k] = c.stiffness, c.damping
            c_ct[k], c_mu[k] = c.tangential_damping, c.friction
        return ModelArrays(
            parent, jtype, jaxis, anchor, dof0, mass, inertia, com,
            np.array(self.gravity, dtype=float), k_pass, d_pass, q_neutral,
            q_low, q_high, float(self.limit_stiffness),
            c_body, c_local, c_k, c_c, c_ct, c_mu,
        )


@dataclass
class State:
    q: np.ndarray
    qdot: np.ndarray
    time: float = 0.0

    def copy(self) -> "State":
        return State(self.q.copy(), self.qdot.copy(), self.time)


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def body_kinematics(m, q, qd):
    """World angle, origin, angular velocity and origin velocity per segment."""
    nb = m.parent.shape[0]
    ang = np.empty(nb)
    om = np.empty(nb)
    org = np.empty((nb, 2))
    vel = np.empty((nb, 2))
    for i in range(nb):
        d = m.dof0[i]
        if m.jtype[i] == FREE:
            org[i, 0] = m.anchor[i, 0] + q[d]
            org[i, 1] = m.anchor[i, 1] + q[d + 1]
            ang[i] = q[d + 2]
            vel[i, 0] = qd[d]
            vel[i, 1] = qd[d + 1]
            om[i] = qd[d + 2]
            continue
        p = m.parent[i]
        if p < 0:
            pa = 0.0
            pox = 0.0
            poy = 0.0
            pw = 0.0
            pvx = 0.0
            pvy = 0.0
        else:
            pa = ang[p]
            pox = org[p, 0]
            poy = org[p, 1]
            pw = om[p]
            pvx = vel[p, 0]
            pvy = vel[p, 1]
        c = math.cos(pa)
        s = math.sin(pa)
        wx = c * m.anchor[i, 0] - s * m.anchor[i, 1]
        wy = s * m.anchor[i, 0] + c * m.anchor[i, 1]
        org[i, 0] = pox + wx
        org[i, 1] = poy + wy
        vel[i, 0] = pvx - pw * wy
        vel[i, 1] = pvy + pw * wx
        ang[i] = pa + m.jaxis[i] * q[d]
        om[i] = pw + m.jaxis[i] * qd[d]
    return ang, org, om, vel


@njit(cache=True)
def local_to_world(ang, org, om, vel, b, lx, ly):
    c = math.cos(ang[b])
    s = math.sin(ang[b])
    rx = c * lx - s * ly
    ry = s * lx + c * ly
    px = org[b, 0] + rx
    py = org[b, 1] + ry
    vx = vel[b, 0] - om[b] * ry
    vy = vel[b, 1] + om[b] * rx
    return px, py, vx, vy


@njit(cache=True)
def add_point_force(m, org, b, px, py, fx, fy, Q):
    """Accumulate J(p)^T f for a world force f acting at world point p on segment b."""
    j = b
    while j >= 0:
        d = m.dof0[j]
        if m.jtype[j] == FREE:
            Q[d] += fx
            Q[d + 1] += fy
            Q[d + 2] += (px - org[j, 0]) * fy - (py - org[j, 1]) * fx
            return
        Q[d] += m.jaxis[j] * ((px - org[j, 0]) * fy - (py - org[j, 1]) * fx)
        j = m.parent[j]


@njit(cache=True)
def point_jacobian(m, org, b, px, py, n):
    J = np.zeros((2, n))
    j = b
    while j >= 0:
        d = m.dof0[j]
        rx = px - org[j, 0]
        ry = py - org[j, 1]
        if m.jtype[j] == FREE:
            J[0, d] = 1.0
            J[1, d + 1] = 1.0
            J[0, d + 2] = -ry
            J[1, d + 2] = rx
            break
        J[0, d] = -m.jaxis[j] * ry
        J[1, d] = m.jaxis[j] * rx
        j = m.parent[j]
    return J


@njit(cache=True)
def _subspace(m, org, rx, ry, n):
    """Motion subspace columns (omega, v_x, v_y) about reference point (rx, ry)."""
    S = np.zeros((n, 3))
    nb = m.parent.shape[0]
    for i in range(nb):
        d = m.dof0[i]
        ox = org[i, 0] - rx
        oy = org[i, 1] - ry
        if m.jtype[i] == FREE:
            S[d, 1] = 1.0
            S[d + 1, 2] = 1.0
            S[d + 2, 0] = 1.0
            S[d + 2, 1] = oy
            S[d + 2, 2] = -ox
        else:
            a = m.jaxis[i]
            S[d, 0] = a
            S[d, 1] = a * oy
            S[d, 2] = -a * ox
    return S


@njit(cache=True)
def _subspace_dot(m, vel, n):
    Sd = np.zeros((n, 3))
    nb = m.parent.shape[0]
    for i in range(nb):
        d = m.dof0[i]
        if m.jtype[i] == FREE:
            Sd[d + 2, 1] = vel[i, 1]
            Sd[d + 2, 2] = -vel[i, 0]
        else:
            a = m.jaxis[i]
            Sd[d, 1] = a * vel[i, 1]
            Sd[d, 2] = -a * vel[i, 0]
    return Sd


@njit(cache=True)
def _body_inertia(m, ang, org, i, rx, ry, out):
    c = math.cos(ang[i])
    s = math.sin(ang[i])
    cx = org[i, 0] - rx + c * m.com[i, 0] - s * m.com[i, 1]
    cy = org[i, 1] - ry + s * m.com[i, 0] + c * m.com[i, 1]
    mi = m.mass[i]
    out[0, 0] = m.inertia[i] + mi * (cx * cx + cy * cy)
    out[0, 1] = -mi * cy
    out[0, 2] = mi * cx
    out[1, 0] = -mi * cy
    out[1, 1] = mi
    out[1, 2] = 0.0
    out[2, 0] = mi * cx
    out[2, 1] = 0.0
    out[2, 2] = mi


@njit(cache=True)
def _ndof_body(m, i):
    return 3 if m.jtype[i] == FREE else 1


@njit(cache=True)
def crba(m, ang, org, n):
    """Composite-rigid-body mass matrix."""
    nb = m.parent.shape[0]
    rx = org[0, 0]
    ry = org[0, 1]
    S = _subspace(m, org, rx, ry, n)
    Ic = np.zeros((nb, 3, 3))
    for i in range(nb):
        _body_inertia(m, ang, org, i, rx, ry, Ic[i])
    for i in range(nb - 1, -1, -1):
        p = m.parent[i]
        if p >= 0:
            Ic[p] += Ic[i]
    M = np.zeros((n, n))
    F = np.empty(3)
    for i in range(nb):
        for ka in range(_ndof_body(m, i)):
            a = m.dof0[i] + ka
            for r in range(3):
                F[r] = Ic[i, r, 0] * S[a, 0] + Ic[i, r, 1] * S[a, 1] + Ic[i, r, 2] * S[a, 2]
            j = i
            while j >= 0:
                for kb in range(_ndof_body(m, j)):
                    b = m.dof0[j] + kb
                    val = F[0] * S[b, 0] + F[1] * S[b, 1] + F[2] * S[b, 2]
                    M[a, b] = val
                    M[b, a] = val
                j = m.parent[j]
    return M


@njit(cache=True)
def rnea(m, ang, org, om, vel, qd, qdd, n):
    """Recursive Newton-Euler: returns M qdd + c(q, qd) including passive joint terms."""
    nb = m.parent.shape[0]
    rx = org[0, 0]
    ry = org[0, 1]
    S = _subspace(m, org, rx, ry, n)
    Sd = _subspace_dot(m, vel, n)
    v = np.zeros((nb, 3))
    a = np.zeros((nb, 3))
    f = np.zeros((nb, 3))
    I = np.zeros((3, 3))
    for i in range(nb):
        p = m.parent[i]
        if p >= 0:
            for r in range(3):
                v[i, r] = v[p, r]
                a[i, r] = a[p, r]
        else:
            a[i, 1] = -m.gravity[0]
            a[i, 2] = -m.gravity[1]
        for k in range(_ndof_body(m, i)):
            d = m.dof0[i] + k
            for r in range(3):
                v[i, r] += S[d, r] * qd[d]
        for k in range(_ndof_body(m, i)):
            d = m.dof0[i] + k
            for r in range(3):
                a[i, r] += S[d, r] * qdd[d] + Sd[d, r] * qd[d]
        _body_inertia(m, ang, org, i, rx, ry, I)
        hv0 = I[0, 0] * v[i, 0] + I[0, 1] * v[i, 1] + I[0, 2] * v[i, 2]
        hv1 = I[1, 0] * v[i, 0] + I[1, 1] * v[i, 1] + I[1, 2] * v[i, 2]
        hv2 = I[2, 0] * v[i, 0] + I[2, 1] * v[i, 1] + I[2, 2] * v[i, 2]
        # v x* h = (-vy hx + vx hy, -w hy, w hx)
        f[i, 0] = I[0, 0] * a[i, 0] + I[0, 1] * a[i, 1] + I[0, 2] * a[i, 2] + (-v[i, 2] * hv1 + v[i, 1] * hv2)
        f[i, 1] = I[1, 0] * a[i, 0] + I[1, 1] * a[i, 1] + I[1, 2] * a[i, 2] - v[i, 0] * hv2
        f[i, 2] = I[2, 0] * a[i, 0] + I[2, 1] * a[i, 1] + I[2, 2] * a[i, 2] + v[i, 0] * hv1
    tau = np.zeros(n)
    for i in range(nb - 1, -1, -1):
        for k in range(_ndof_body(m, i)):
            d = m.dof0[i] + k
            tau[d] = S[d, 0] * f[i, 0] + S[d, 1] * f[i, 1] + S[d, 2] * f[i, 2]
        p = m.parent[i]
        if p >= 0:
            for r in range(3):
                f[p, r] += f[i, r]
    return tau


@njit(cache=True)
def passive_forces(m, q, qd, out):
    """Add passive joint stiffness/damping (as part of c) to ``out``."""
    for d in range(q.shape[0]):
        out[d] += m.k_pass[d] * (q[d] - m.q_neutral[d]) + m.d_pass[d] * qd[d]


@njit(cache=True)
def limit_forces(m, q, Q):
    """One-sided penalty torques beyond joint limits, accumulated into Q."""
    for d in range(q.shape[0]):
        if q[d] > m.q_high[d]:
            Q[d] -= m.limit_k * (q[d] - m.q_high[d])
        elif q[d] < m.q_low[d]:
            Q[d] += m.limit_k * (m.q_low[d] - q[d])


@njit(cache=True)
def contact_kernel(m, ang, org, om, vel, Q, fw):
    """Penalty ground contact on plane y = 0. Writes world forces into fw (C x 2)."""
    for k in range(m.c_body.shape[0]):
        b = m.c_body[k]
        px, py, vx, vy = local_to_world(ang, org, om, vel, b, m.c_local[k, 0], m.c_local[k, 1])
        fw[k, 0] = 0.0
        fw[k, 1] = 0.0
        pen = -py
        if pen <= 0.0:
            continue
        fn = m.c_k[k] * pen + m.c_c[k] * (-vy)
        if fn <= 0.0:
            continue
        cap = m.c_mu[k] * fn
        ft = -m.c_ct[k] * vx
        if ft > cap:
            ft = cap
        elif ft < -cap:
            ft = -cap
        fw[k, 0] = ft
        fw[k, 1] = fn
        add_point_force(m, org, b, px, py, ft, fn, Q)


@njit(cache=True)
def cholesky_solve(M, rhs):
    """Solve M x = rhs for SPD M. Returns (x, ok)."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.zeros(n), False
        L[j, j] = math.sqrt(s)
        inv = 1.0 / L[j, j]
        for i in range(j + 1, n):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t * inv
    y = np.empty(n)
    for i in range(n):
        t = rhs[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, n):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x, True


@njit(cache=True)
def bias_kernel(m, q, qd):
    n = q.shape[0]
    ang, org, om, vel = body_kinematics(m, q, qd)
    c = rnea(m, ang, org, om, vel, qd, np.zeros(n), n)
    passive_forces(m, q, qd, c)
    return c


@njit(cache=True)
def forward_kernel(m, q, qd, applied):
    n = q.shape[0]
    ang, org, om, vel = body_kinematics(m, q, qd)
    M = crba(m, ang, org, n)
    c = rnea(m, ang, org, om, vel, qd, np.zeros(n), n)
    passive_forces(m, q, qd, c)
    return cholesky_solve(M, applied - c)


@njit(cache=True)
def mechanical_energy_kernel(m, q, qd):
    n = q.shape[0]
    ang, org, om, vel = body_kinematics(m, q, qd)
    M = crba(m, ang, org, n)
    T = 0.5 * qd @ (M @ qd)
    V = 0.0
    for i in range(m.parent.shape[0]):
        c = math.cos(ang[i])
        s = math.sin(ang[i])
        cx = org[i, 0] + c * m.com[i, 0] - s * m.com[i, 1]
        cy = org[i, 1] + s * m.com[i, 0] + c * m.com[i, 1]
        V -= m.mass[i] * (m.gravity[0] * cx + m.gravity[1] * cy)
    for d in range(n):
        V += 0.5 * m.k_pass[d] * (q[d] - m.q_neutral[d]) ** 2
    return T + V


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _vec(model: ModelTopology, x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (model.ndof,):
        raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected ({model.ndof},)")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def mass_matrix(model: ModelTopology, q) -> np.ndarray:
    """Joint-space mass matrix M(q) by the composite-rigid-body algorithm."""
    q = _vec(model, q, "q")
    ang, org, _, _ = body_kinematics(model.arrays, q, np.zeros_like(q))
    return crba(model.arrays, ang, org, model.ndof)


def bias_forces(model: ModelTopology, q, qdot) -> np.ndarray:
    """c(q, qd): gravity, velocity-product and passive joint terms.

    Sign convention: ``M qdd + c = Q_applied``.
    """
    return bias_kernel(model.arrays, _vec(model, q, "q"), _vec(model, qdot, "qdot"))


def inverse_dynamics(model: ModelTopology, q, qdot, qddot) -> np.ndarray:
    q = _vec(model, q, "q")
    qd = _vec(model, qdot, "qdot")
    qdd = _vec(model, qddot, "qddot")
    m = model.arrays
    ang, org, om, vel = body_kinematics(m, q, qd)
    tau = rnea(m, ang, org, om, vel, qd, qdd, model.ndof)
    passive_forces(m, q, qd, tau)
    return tau


def forward_dynamics(model: ModelTopology, q, qdot, applied) -> np.ndarray:
    """Solve M qdd = applied - c by Cholesky factorization."""
    q = _vec(model, q, "q")
    x, ok = forward_kernel(
        model.arrays, q, _vec(model, qdot, "qdot"), _vec(model, applied, "applied")
    )
    if not ok:
        raise NumericalFailureError(f"mass matrix not positive definite at q={q.tolist()}")
    return x


def contact_forces(model: ModelTopology, q, qdot) -> tuple[np.ndarray, np.ndarray]:
    """Ground-contact forces: (per-contact world forces (C, 2), generalized n-vector)."""
    q = _vec(model, q, "q")
    qd = _vec(model, qdot, "qdot")
    m = model.arrays
    ang, org, om, vel = body_kinematics(m, q, qd)
    Q = np.zeros(model.ndof)
    fw = np.zeros((len(model.contact_points), 2))
    contact_kernel(m, ang, org, om, vel, Q, fw)
    return fw, Q


def joint_limit_forces(model: ModelTopology, q) -> np.ndarray:
    Q = np.zeros(model.ndof)
    limit_forces(model.arrays, _vec(model, q, "q"), Q)
    return Q


def point_kinematics(model: ModelTopology, q, qdot, segment: str, local_point):
    """World position, world velocity and segment frame angle of a body point.

    ``local_point`` is either a name registered on the segment or a 2-vector.
    """
    b, local = model.resolve_point(segment, local_point)
    q = _vec(model, q, "q")
    qd = _vec(model, qdot, "qdot")
    ang, org, om, vel = body_kinematics(model.arrays, q, qd)
    px, py, vx, vy = local_to_world(ang, org, om, vel, b, local[0], local[1])
    return np.array([px, py]), np.array([vx, vy]), float(ang[b])


def point_jacobian_at(model: ModelTopology, q, segment: str, local_point) -> np.ndarray:
    b, local = model.resolve_point(segment, local_point)
    q = _vec(model, q, "q")
    ang, org, om, vel = body_kinematics(model.arrays, q, np.zeros_like(q))
    px, py, _, _ = local_to_world(ang, org, om, vel, b, local[0], local[1])
    return point_jacobian(model.arrays, org, b, px, py, model.ndof)


def point_force_to_generalized(model: ModelTopology, q, segment: str, local_point, force) -> np.ndarray:
    b, local = model.resolve_point(segment, local_point)
    q = _vec(model, q, "q")
    ang, org, om, vel = body_kinematics(model.arrays, q, np.zeros_like(q))
    px, py, _, _ = local_to_world(ang, org, om, vel, b, local[0], local[1])
    Q = np.zeros(model.ndof)
    add_point_force(model.arrays, org, b, px, py, float(force[0]), float(force[1]), Q)
    return Q


def mechanical_energy(model: ModelTopology, q, qdot) -> float:
    """Kinetic + gravitational + passive-spring energy."""
    return float(mechanical_energy_kernel(model.arrays, _vec(model, q, "q"), _vec(model, qdot, "qdot")))


def step(
    model: ModelTopology,
    state: State,
    applied_fn: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None,
    dt: float,
) -> State:
    """Advance one semi-implicit Euler step.

    Ground contact and joint-limit penalties of the model are added to the
    generalized force returned by ``applied_fn(q, qdot, t)``.
    """
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    q, qd = state.q, state.qdot
    Q = np.zeros(model.ndof)
    if applied_fn is not None:
        Q += np.asarray(applied_fn(q, qd, state.time), dtype=float)
    if model.contact_points:
        Q += contact_forces(model, q, qd)[1]
    limit_forces(model.arrays, np.ascontiguousarray(q, dtype=float), Q)
    try:
        qdd = forward_dynamics(model, q, qd, Q)
    except (NumericalFailureError, InvalidArgumentError) as exc:
        raise SimulationDivergedError(str(exc), time=state.time) from exc
    qd_new = qd + dt * qdd
    q_new = q + dt * qd_new
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise SimulationDivergedError(f"non-finite state at t={state.time:.6f}", time=state.time)
    return State(q_new, qd_new, state.time + dt)


def simulate(model: ModelTopology, state: State, applied_fn, dt: float, duration: float) -> list[State]:
    n = int(round(duration / dt))
    out = [state]
    for _ in range(n):
        state = step(model, state, applied_fn, dt)
        out.append(state)
    return out


def random_chain(
    rng: np.random.Generator,
    n_links: int,
    floating: bool = True,
    branches: int = 1,
    gravity: Sequence[float] = (0.0, -9.81),
) -> ModelTopology:
    """Random articulated forest used by property tests and benchmarks."""
    segments, joints = [], []
    count = 0
    for b in range(branches):
        root = f"b{b}_root"
        segments.append(
            SegmentDef(root, rng.uniform(0.5, 5), rng.uniform(0.01, 0.5),
                       tuple(rng.uniform(-0.2, 0.2, 2)), rng.uniform(0.1, 0.6))
        )
        if floating:
            joints.append(JointDef(f"j_{root}", None, root, "free"))
        else:
            joints.append(JointDef(f"j_{root}", None, root, "revolute",
                                   anchor=tuple(rng.uniform(-1, 1, 2))))
        count += 1
        names = [root]
        while count < (b + 1) * n_links:
            name = f"b{b}_s{count}"
            par = names[rng.integers(len(names))]
            segments.append(
                SegmentDef(name, rng.uniform(0.1, 5), rng.uniform(0.001, 0.3),
                           tuple(rng.uniform(-0.3, 0.3, 2)), rng.uniform(0.1, 0.6))
            )
            joints.append(JointDef(f"j_{name}", par, name, "revolute",
                                   anchor=tuple(rng.uniform(-0.5, 0.5, 2)),
                                   axis=float(rng.choice([-1.0, 1.0]))))
            names.append(name)
            count += 1
    return ModelTopology(tuple(segments), tuple(joints), gravity=tuple(gravity))
