"""Hill-type muscle-tendon units with a rigid tendon.

Force production::

    f_m = f_max * (F_l(l~) * F_v(v~) * act + F_p(l~))

with ``l~ = l_m / l_opt`` and ``v~ = v_m / (v_max * l_opt)`` (shortening
negative). Fiber length is path length minus tendon slack length. Paths
are polylines through via points fixed on segments; moment arms are
``-dL/dq`` obtained from the analytic point Jacobians of the via points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .errors import DegeneratePathError, InvalidArgumentError, MuscleBuckledError
from .multibody import (
    ModelTopology,
    add_point_force,
    body_kinematics,
    local_to_world,
    point_jacobian,
)

# curve defaults (Hill/Thelen-style shapes)
GAMMA_L = 0.45
A_F = 0.25
GAMMA_V = 0.24
F_LEN = 1.4
K_PE = 4.0
EPS0 = 0.6
TAU_ACT = 0.01
TAU_DEACT = 0.04

# minimum separation between consecutive via points (m)
_DEGENERATE = 1e-12
GROUND = -1  # segment index used for via points fixed to the ground ("ground")


@dataclass(frozen=True)
class MuscleParams:
    f_max: float
    l_opt: float
    l_slack: float
    v_max: float = 10.0
    gamma_l: float = GAMMA_L
    a_f: float = A_F
    gamma_v: float = GAMMA_V
    f_len: float = F_LEN
    k_pe: float = K_PE
    eps0: float = EPS0

    def __post_init__(self):
        if self.f_max <= 0 or self.l_opt <= 0 or self.v_max <= 0:
            raise InvalidArgumentError("f_max, l_opt and v_max must be positive")
        if self.f_len <= 1:
            raise InvalidArgumentError("f_len must exceed 1")
        if min(self.gamma_l, self.a_f, self.gamma_v, self.k_pe, self.eps0) <= 0:
            raise InvalidArgumentError("curve constants must be positive")

    def as_row(self) -> np.ndarray:
        return np.array([
            self.f_max, self.l_opt, self.l_slack, self.v_max, self.gamma_l,
            self.a_f, self.gamma_v, self.f_len, self.k_pe, self.eps0,
        ])


@dataclass(frozen=True)
class MusclePath:
    """Ordered via points ``(segment, (x, y))`` in segment-local coordinates.

    The segment name ``"ground"`` fixes a point in world coordinates.
    """

    via_points: tuple[tuple[str, tuple[float, float]], ...]

    def __post_init__(self):
        if len(self.via_points) < 2:
            raise InvalidArgumentError("a muscle path needs at least two via points")
        object.__setattr__(
            self,
            "via_points",
            tuple((s, (float(p[0]), float(p[1]))) for s, p in self.via_points),
        )


@dataclass(frozen=True)
class MuscleUnit:
    name: str
    params: MuscleParams
    path: MusclePath


@dataclass(frozen=True)
class ActivationConstants:
    tau_act: float = TAU_ACT
    tau_deact: float = TAU_DEACT

    def __post_init__(self):
        if not 0 < self.tau_act <= self.tau_deact:
            raise InvalidArgumentError("need 0 < tau_act <= tau_deact")


@dataclass
class MuscleState:
    activation: float = 0.0
    excitation_applied: float = 0.0
    fiber_length: float = 0.0
    fiber_velocity: float = 0.0
    force: float = 0.0


# ---------------------------------------------------------------------------
# characteristic curves
# ---------------------------------------------------------------------------

@njit(cache=True)
def force_length(l_norm, gamma_l=GAMMA_L):
    """Active force-length curve, Gaussian in normalized fiber length."""
    d = l_norm - 1.0
    return math.exp(-d * d / gamma_l)


@njit(cache=True)
def force_velocity(v_norm, a_f=A_F, gamma_v=GAMMA_V, f_len=F_LEN):
    """Force-velocity multiplier; ``v_norm`` below -1 saturates at -1."""
    if v_norm < -1.0:
        v_norm = -1.0
    if v_norm <= 0.0:
        return (1.0 + v_norm) / (1.0 - v_norm / a_f)
    r = v_norm / gamma_v
    return (f_len * r + 1.0) / (r + 1.0)


@njit(cache=True)
def passive_force(l_norm, k_pe=K_PE, eps0=EPS0):
    if l_norm <= 1.0:
        return 0.0
    return (math.exp(k_pe * (l_norm - 1.0) / eps0) - 1.0) / (math.exp(k_pe) - 1.0)


@njit(cache=True)
def _mtu_force_row(p, act, l_m, v_m):
    ln = l_m / p[1]
    vn = v_m / (p[3] * p[1])
    f = p[0] * (force_length(ln, p[4]) * force_velocity(vn, p[5], p[6], p[7]) * act
                + passive_force(ln, p[8], p[9]))
    return f if f > 0.0 else 0.0


def mtu_force(params: MuscleParams, act: float, l_m: float, v_m: float) -> float:
    """Muscle force (N) from activation, fiber length (m) and fiber velocity (m/s)."""
    if not 0.0 <= act <= 1.0:
        raise InvalidArgumentError(f"activation {act} outside [0, 1]")
    return float(_mtu_force_row(params.as_row(), float(act), float(l_m), float(v_m)))


# ---------------------------------------------------------------------------
# activation dynamics
# ---------------------------------------------------------------------------

@njit(cache=True)
def activation_update(act, u, tau_act, tau_deact, dt):
    """Integrate d(act)/dt = (u - act)/tau(act) exactly over dt.

    Rising (u > act): tau = tau_act (0.5 + 1.5 act). Falling: tau =
    tau_deact / (0.5 + 1.5 act). Activation approaches u monotonically, so
    the branch is fixed within a step and each branch has a closed form
    (implicit for the rising branch, solved by Newton iteration).
    """
    if u > act:
        w0 = u - act
        b = 0.5 + 1.5 * u
        rhs = dt / tau_act
        # b ln(w0/w) - 1.5 (w0 - w) = rhs, solved for s = ln w
        s0 = math.log(w0)
        s = s0 - rhs / b
        for _ in range(60):
            w = math.exp(s)
            g = b * (s0 - s) - 1.5 * (w0 - w) - rhs
            dg = -b + 1.5 * w
            step = g / dg
            s -= step
            if abs(step) < 1e-15:
                break
        a = u - math.exp(s)
    elif u < act:
        e0 = act - u
        b = 0.5 + 1.5 * u
        decay = math.exp(-b * dt / tau_deact)
        e = b * e0 * decay / (b + 1.5 * e0 * (1.0 - decay))
        a = u + e
    else:
        a = act
    if a < 0.0:
        return 0.0
    if a > 1.0:
        return 1.0
    return a


def activation_step(state: MuscleState | float, u: float, constants: ActivationConstants, dt: float) -> float:
    """New activation after holding excitation ``u`` for ``dt`` seconds."""
    if not 0.0 <= u <= 1.0:
        raise InvalidArgumentError(f"excitation {u} outside [0, 1]")
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    act = state.activation if isinstance(state, MuscleState) else float(state)
    return float(activation_update(act, float(u), constants.tau_act, constants.tau_deact, float(dt)))


# ---------------------------------------------------------------------------
# packed muscle sets
# ---------------------------------------------------------------------------

class MuscleArrays(NamedTuple):
    params: np.ndarray   # (M, 10), see MuscleParams.as_row
    body: np.ndarray     # (M, V) segment index per via point
    local: np.ndarray    # (M, V, 2)
    count: np.ndarray    # (M,) via points in use


def pack_muscles(model: ModelTopology, muscles: Sequence[MuscleUnit]) -> MuscleArrays:
    nm = len(muscles)
    nv = max((len(mu.path.via_points) for mu in muscles), default=2)
    params = np.zeros((nm, 10))
    body = np.zeros((nm, nv), dtype=np.int64)
    local = np.zeros((nm, nv, 2))
    count = np.zeros(nm, dtype=np.int64)
    for i, mu in enumerate(muscles):
        params[i] = mu.params.as_row()
        count[i] = len(mu.path.via_points)
        for k, (seg, pt) in enumerate(mu.path.via_points):
            body[i, k] = GROUND if seg == "ground" else model.segment_index(seg)
            local[i, k] = pt
    return MuscleArrays(params, body, local, count)


@njit(cache=True)
def path_state(ma, ang, org, om, vel, i, pts):
    """Length and lengthening rate of muscle i; fills world via points into pts."""
    L = 0.0
    rate = 0.0
    degenerate = False
    nv = ma.count[i]
    pvx = 0.0
    pvy = 0.0
    for k in range(nv):
        b = ma.body[i, k]
        if b < 0:  # fixed to ground
            px, py, vx, vy = ma.local[i, k, 0], ma.local[i, k, 1], 0.0, 0.0
        else:
            px, py, vx, vy = local_to_world(ang, org, om, vel, b, ma.local[i, k, 0], ma.local[i, k, 1])
        pts[k, 0] = px
        pts[k, 1] = py
        if k > 0:
            dx = px - pts[k - 1, 0]
            dy = py - pts[k - 1, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if d < _DEGENERATE:
                degenerate = True
            else:
                L += d
                rate += (dx * (vx - pvx) + dy * (vy - pvy)) / d
        pvx = vx
        pvy = vy
    return L, rate, degenerate


@njit(cache=True)
def apply_muscle_force(m, ma, org, i, pts, f, Q):
    """Add the generalized force of tension f pulling muscle i's via points together."""
    for k in range(ma.count[i] - 1):
        dx = pts[k + 1, 0] - pts[k, 0]
        dy = pts[k + 1, 1] - pts[k, 1]
        d = math.sqrt(dx * dx + dy * dy)
        if d < _DEGENERATE:
            continue
        ux = dx / d
        uy = dy / d
        add_point_force(m, org, ma.body[i, k], pts[k, 0], pts[k, 1], f * ux, f * uy, Q)
        add_point_force(m, org, ma.body[i, k + 1], pts[k + 1, 0], pts[k + 1, 1], -f * ux, -f * uy, Q)


@njit(cache=True)
def muscle_moment_arms(m, ma, ang, org, om, vel, n):
    """Moment-arm matrix R (M x n), R = -dL/dq."""
    nm = ma.params.shape[0]
    R = np.zeros((nm, n))
    pts = np.zeros((ma.body.shape[1], 2))
    for i in range(nm):
        path_state(ma, ang, org, om, vel, i, pts)
        # dL/dq = sum_k u_k . (J_{k+1} - J_k); apply unit tension and read off -dL/dq
        Q = np.zeros(n)
        apply_muscle_force(m, ma, org, i, pts, 1.0, Q)
        for d in range(n):
            R[i, d] = Q[d]
    return R


@njit(cache=True)
def muscle_forces_kernel(m, ma, ang, org, om, vel, act, Q, forces, lengths):
    """Compute muscle forces for the given activations and add J_m^T f_m to Q.

    Returns the index of the first buckled or degenerate muscle, or -1.
    """
    nm = ma.params.shape[0]
    pts = np.zeros((ma.body.shape[1], 2))
    bad = -1
    for i in range(nm):
        L, rate, degenerate = path_state(ma, ang, org, om, vel, i, pts)
        l_m = L - ma.params[i, 2]
        lengths[i] = l_m
        if degenerate or l_m <= 0.0:
            if bad < 0:
                bad = i
            forces[i] = 0.0
            continue
        f = _mtu_force_row(ma.params[i], act[i], l_m, rate)
        forces[i] = f
        apply_muscle_force(m, ma, org, i, pts, f, Q)
    return bad


# ---------------------------------------------------------------------------
# public geometry and force operations
# ---------------------------------------------------------------------------

def path_geometry(model: ModelTopology, q, qdot, path: MusclePath):
    """(length m, lengthening rate m/s, moment arms n-vector m) of a path."""
    unit = MuscleUnit("_probe", MuscleParams(1.0, 1.0, 0.0), path)
    ma = pack_muscles(model, [unit])
    q = np.ascontiguousarray(q, dtype=float)
    qd = np.ascontiguousarray(qdot, dtype=float)
    m = model.arrays
    ang, org, om, vel = body_kinematics(m, q, qd)
    pts = np.zeros((ma.body.shape[1], 2))
    L, rate, degenerate = path_state(ma, ang, org, om, vel, 0, pts)
    if degenerate:
        raise DegeneratePathError("coincident consecutive via points")
    R = muscle_moment_arms(m, ma, ang, org, om, vel, model.ndof)[0]
    return float(L), float(rate), R


def muscle_generalized_forces(model: ModelTopology, q, qdot, muscles: Sequence[MuscleUnit], activations):
    """Accumulated J_m^T f_m and the individual muscle forces."""
    act = np.ascontiguousarray(activations, dtype=float)
    if act.shape != (len(muscles),):
        raise InvalidArgumentError("one activation per muscle required")
    if np.any(act < 0) or np.any(act > 1):
        raise InvalidArgumentError("activations must lie in [0, 1]")
    ma = pack_muscles(model, muscles)
    q = np.ascontiguousarray(q, dtype=float)
    qd = np.ascontiguousarray(qdot, dtype=float)
    m = model.arrays
    ang, org, om, vel = body_kinematics(m, q, qd)
    Q = np.zeros(model.ndof)
    forces = np.zeros(len(muscles))
    lengths = np.zeros(len(muscles))
    bad = muscle_forces_kernel(m, ma, ang, org, om, vel, act, Q, forces, lengths)
    if bad >= 0:
        name = muscles[bad].name
        raise MuscleBuckledError(
            f"muscle {name!r} has non-positive fiber length {lengths[bad]:.4g} m", muscle=name
        )
    return Q, forces


def fiber_lengths(model: ModelTopology, q, muscles: Sequence[MuscleUnit]) -> np.ndarray:
    """Fiber lengths l_m = path length - l_slack."""
    ma = pack_muscles(model, muscles)
    q = np.ascontiguousarray(q, dtype=float)
    ang, org, om, vel = body_kinematics(model.arrays, q, np.zeros_like(q))
    pts = np.zeros((ma.body.shape[1], 2))
    out = np.empty(len(muscles))
    for i in range(len(muscles)):
        L, _, _ = path_state(ma, ang, org, om, vel, i, pts)
        out[i] = L - ma.params[i, 2]
    return out


def with_slack_for_length(unit: MuscleUnit, path_length: float, l_norm: float = 1.0) -> MuscleUnit:
    """Copy of ``unit`` with tendon slack chosen so that l~ = l_norm at ``path_length``."""
    p = replace(unit.params, l_slack=path_length - l_norm * unit.params.l_opt)
    return replace(unit, params=p)
