"""Parameterized exoskeleton: floating module chains, cuff connectors and assistance.

The device consists of three kinds of module, each a separate floating
chain tied to the body only through spring-damper connectors:

* hip: waist frame (free) with a thigh link per side (actuated hip joint)
* ankle: shank frame (free) with a foot plate (actuated ankle joint), per side
* arm: upper-arm frame (free) with a forearm link (actuated elbow joint), per side

Every link carries one cuff with an anterior and a posterior connector. A
connector's body anchor is the body point that coincides with its exo anchor
at the upright standing pose, so connectors are unloaded there.

Module rotations cannot be represented by planar dynamics; they are kept as
axis tilt annotations. The assistance torque is reduced to its in-plane part
``tau cos(tilt)`` and the out-of-plane part loads the cuff straps of the
module's distal link.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .errors import BoundViolationError, InvalidArgumentError
from .multibody import (
    JointDef,
    ModelTopology,
    SegmentDef,
    add_point_force,
    body_kinematics,
    local_to_world,
)

JOINT_KINDS = ("hip", "ankle", "elbow")
SIDES = ("l", "r")

STRUCTURE_FIELDS = (
    "thigh_cuff_offset",
    "shank_cuff_offset",
    "upperarm_cuff_offset",
    "hip_translation_x",
    "hip_translation_y",
    "ankle_rotation",
    "ankle_translation",
    "arm_rotation",
    "arm_translation",
)
GAIN_FIELDS = tuple(f"{j}_{g}" for j in JOINT_KINDS for g in ("kpr", "kpy", "kdr", "kdy"))

DEFAULT_STRUCTURE_BOUNDS = {
    "thigh_cuff_offset": (-0.08, 0.08),
    "shank_cuff_offset": (-0.08, 0.08),
    "upperarm_cuff_offset": (-0.06, 0.06),
    "hip_translation_x": (-0.05, 0.05),
    "hip_translation_y": (-0.05, 0.05),
    "ankle_rotation": (-0.3, 0.3),
    "ankle_translation": (-0.05, 0.05),
    "arm_rotation": (-0.3, 0.3),
    "arm_translation": (-0.05, 0.05),
}
# feedforward gains may go slightly negative; feedback gains may not
DEFAULT_GAIN_BOUNDS = {}
for _j in JOINT_KINDS:
    DEFAULT_GAIN_BOUNDS[f"{_j}_kpr"] = (-10.0, 120.0)
    DEFAULT_GAIN_BOUNDS[f"{_j}_kpy"] = (0.0, 120.0)
    DEFAULT_GAIN_BOUNDS[f"{_j}_kdr"] = (-1.0, 12.0)
    DEFAULT_GAIN_BOUNDS[f"{_j}_kdy"] = (0.0, 12.0)


def _check_bounds(values: dict, bounds: dict):
    for name, v in values.items():
        lo, hi = bounds[name]
        if not (math.isfinite(v) and lo <= v <= hi):
            raise BoundViolationError(f"{name}={v!r} outside [{lo}, {hi}]", parameter=name)


@dataclass(frozen=True)
class ExoStructure:
    """Nine structural parameters, applied identically to both sides (m, rad)."""

    thigh_cuff_offset: float = 0.0
    shank_cuff_offset: float = 0.0
    upperarm_cuff_offset: float = 0.0
    hip_translation_x: float = 0.0
    hip_translation_y: float = 0.0
    ankle_rotation: float = 0.0
    ankle_translation: float = 0.0
    arm_rotation: float = 0.0
    arm_translation: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STRUCTURE_FIELDS])

    @classmethod
    def from_vector(cls, x) -> "ExoStructure":
        x = np.asarray(x, dtype=float)
        if x.shape != (9,):
            raise InvalidArgumentError("structure vector must have 9 entries")
        return cls(*map(float, x))


@dataclass(frozen=True)
class ExoGains:
    """Decoupled PD gains (N m/rad, N m s/rad) per actuated joint kind."""

    hip_kpr: float = 0.0
    hip_kpy: float = 0.0
    hip_kdr: float = 0.0
    hip_kdy: float = 0.0
    ankle_kpr: float = 0.0
    ankle_kpy: float = 0.0
    ankle_kdr: float = 0.0
    ankle_kdy: float = 0.0
    elbow_kpr: float = 0.0
    elbow_kpy: float = 0.0
    elbow_kdr: float = 0.0
    elbow_kdy: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in GAIN_FIELDS])

    def matrix(self) -> np.ndarray:
        """(3, 4) rows hip/ankle/elbow, columns K_pr, K_py, K_dr, K_dy."""
        return self.as_vector().reshape(3, 4)

    @classmethod
    def from_vector(cls, x) -> "ExoGains":
        x = np.asarray(x, dtype=float)
        if x.shape != (12,):
            raise InvalidArgumentError("gain vector must have 12 entries")
        return cls(*map(float, x))

    def validate(self, bounds: dict | None = None) -> "ExoGains":
        _check_bounds({f: getattr(self, f) for f in GAIN_FIELDS}, bounds or DEFAULT_GAIN_BOUNDS)
        return self


@dataclass(frozen=True)
class ExoConfig:
    link_masses: dict = field(default_factory=lambda: {
        "waist": 2.0, "thigh": 0.8, "shank": 0.5, "foot": 0.4, "upperarm": 0.4, "forearm": 0.3,
    })
    connector_stiffness: float = 2000.0
    connector_damping: float = 50.0
    tau_max: float = 80.0
    hip_axis_tilt: float = 0.0
    lever_floor: float = 0.05
    structure_bounds: dict = field(default_factory=lambda: dict(DEFAULT_STRUCTURE_BOUNDS))
    gain_bounds: dict = field(default_factory=lambda: dict(DEFAULT_GAIN_BOUNDS))
    # cuff geometry: (half width across the limb m, nominal distance from module joint m)
    waist_cuff: tuple = (0.12, 0.08)
    thigh_cuff: tuple = (0.07, 0.20)
    shank_cuff: tuple = (0.06, 0.22)
    foot_cuff: tuple = (0.07, 0.05)
    upperarm_cuff: tuple = (0.10, 0.12)
    forearm_cuff: tuple = (0.08, 0.15)

    def __post_init__(self):
        if not self.connector_stiffness > 0 or self.connector_damping < 0:
            raise InvalidArgumentError("connector stiffness must be > 0 and damping >= 0")
        if not self.tau_max > 0:
            raise InvalidArgumentError("tau_max must be positive")
        if not abs(self.hip_axis_tilt) < math.pi / 2:
            raise InvalidArgumentError("hip_axis_tilt must lie in (-pi/2, pi/2)")
        for b in (self.structure_bounds, self.gain_bounds):
            for name, (lo, hi) in b.items():
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise InvalidArgumentError(f"bad bound interval for {name}")
        for name in STRUCTURE_FIELDS:
            if name not in self.structure_bounds:
                raise InvalidArgumentError(f"missing structure bound {name}")
        for name in GAIN_FIELDS:
            if name not in self.gain_bounds:
                raise InvalidArgumentError(f"missing gain bound {name}")
            lo, hi = self.gain_bounds[name]
            if not lo <= 0.0 <= hi:
                raise InvalidArgumentError(f"gain bound {name} must include 0")


@dataclass(frozen=True)
class Connector:
    name: str
    exo_anchor: tuple[str, tuple[float, float]]
    body_anchor: tuple[str, tuple[float, float]]
    stiffness: float
    damping: float
    rest_length: float = 0.0
    module: str | None = None  # actuated joint whose out-of-plane load it carries

    def __post_init__(self):
        if not self.stiffness > 0:
            raise InvalidArgumentError(f"connector {self.name}: stiffness must be > 0")
        if self.damping < 0 or self.rest_length < 0:
            raise InvalidArgumentError(f"connector {self.name}: damping and rest length must be >= 0")


@dataclass(frozen=True)
class ActuatedJoint:
    name: str            # e.g. "hip_l"
    exo_joint: str       # e.g. "exo_hip_l"
    human_joint: str
    kind: int            # index into JOINT_KINDS
    axis_tilt: float
    lever: float         # distance between the distal link's two connector anchors


class ConnectorArrays(NamedTuple):
    exo_body: np.ndarray
    exo_local: np.ndarray
    hum_body: np.ndarray
    hum_local: np.ndarray
    k: np.ndarray
    c: np.ndarray
    rest: np.ndarray
    module: np.ndarray   # actuated-joint index or -1


class ActuatorArrays(NamedTuple):
    exo_dof: np.ndarray
    hum_dof: np.ndarray
    kind: np.ndarray
    tilt: np.ndarray
    lever: np.ndarray
    tau_max: float


@dataclass(frozen=True)
class ExoAssembly:
    structure: ExoStructure
    config: ExoConfig
    human_topology: ModelTopology
    segments: tuple[SegmentDef, ...]
    joints: tuple[JointDef, ...]
    connectors: tuple[Connector, ...]
    actuated: tuple[ActuatedJoint, ...]
    # exo root -> (followed human segment, offset in its frame at standing pose)
    root_follow: tuple[tuple[str, str, tuple[float, float]], ...]
    # exo revolute joint -> human joint whose angle it mirrors at rest
    joint_follow: tuple[tuple[str, str], ...]

    @property
    def link_masses(self) -> dict:
        return {s.name: s.mass for s in self.segments}

    @property
    def axis_tilt(self) -> dict:
        return {a.name: a.axis_tilt for a in self.actuated}

    @cached_property
    def combined(self) -> ModelTopology:
        h = self.human_topology
        return ModelTopology(h.segments + self.segments, h.joints + self.joints, h.gravity,
                             h.contact_points, h.limit_stiffness)

    @cached_property
    def connector_arrays(self) -> ConnectorArrays:
        topo = self.combined
        K = len(self.connectors)
        eb = np.zeros(K, dtype=np.int64)
        hb = np.zeros(K, dtype=np.int64)
        el = np.zeros((K, 2))
        hl = np.zeros((K, 2))
        mod = np.full(K, -1, dtype=np.int64)
        act_pos = {a.name: i for i, a in enumerate(self.actuated)}
        for i, c in enumerate(self.connectors):
            eb[i], el[i] = topo.resolve_point(*c.exo_anchor)
            hb[i], hl[i] = topo.resolve_point(*c.body_anchor)
            if c.module is not None:
                mod[i] = act_pos[c.module]
        return ConnectorArrays(
            eb, el, hb, hl,
            np.array([c.stiffness for c in self.connectors]),
            np.array([c.damping for c in self.connectors]),
            np.array([c.rest_length for c in self.connectors]),
            mod,
        )

    @cached_property
    def actuator_arrays(self) -> ActuatorArrays:
        topo = self.combined
        return ActuatorArrays(
            np.array([topo.dof(a.exo_joint) for a in self.actuated], dtype=np.int64),
            np.array([topo.dof(a.human_joint) for a in self.actuated], dtype=np.int64),
            np.array([a.kind for a in self.actuated], dtype=np.int64),
            np.array([a.axis_tilt for a in self.actuated]),
            np.array([a.lever for a in self.actuated]),
            float(self.config.tau_max),
        )

    def combined_state(self, q_human, qdot_human) -> tuple[np.ndarray, np.ndarray]:
        """Combined coordinates with every exo body following its host segment."""
        topo = self.combined
        hn = self.human_topology.ndof
        q_human = np.asarray(q_human, dtype=float)
        qdot_human = np.asarray(qdot_human, dtype=float)
        q = np.zeros(topo.ndof)
        qd = np.zeros(topo.ndof)
        q[:hn] = q_human
        qd[:hn] = qdot_human
        ang, org, om, vel = body_kinematics(self.human_topology.arrays,
                                            np.ascontiguousarray(q_human), np.ascontiguousarray(qdot_human))
        for root, seg, off in self.root_follow:
            b = self.human_topology.segment_index(seg)
            px, py, vx, vy = local_to_world(ang, org, om, vel, b, off[0], off[1])
            d = topo.dof(root)
            q[d:d + 3] = (px, py, ang[b])
            qd[d:d + 3] = (vx, vy, om[b])
        for ej, hj in self.joint_follow:
            q[topo.dof(ej)] = q_human[self.human_topology.dof(hj)]
            qd[topo.dof(ej)] = qdot_human[self.human_topology.dof(hj)]
        return q, qd

    def joint_centers(self, q) -> np.ndarray:
        """World positions (A, 2, 2): per actuated joint, (human center, exo center)."""
        topo = self.combined
        q = np.ascontiguousarray(q, dtype=float)
        ang, org, _, _ = body_kinematics(topo.arrays, q, np.zeros_like(q))
        out = np.zeros((len(self.actuated), 2, 2))
        for i, a in enumerate(self.actuated):
            out[i, 0] = org[topo.segment_index(topo.joint(a.human_joint).child)]
            out[i, 1] = org[topo.segment_index(topo.joint(a.exo_joint).child)]
        return out

    def limb_axes(self, q) -> np.ndarray:
        """World unit vectors along the host limb of each actuated module (A, 2)."""
        topo = self.combined
        q = np.ascontiguousarray(q, dtype=float)
        ang, _, _, _ = body_kinematics(topo.arrays, q, np.zeros_like(q))
        out = np.zeros((len(self.actuated), 2))
        for i, a in enumerate(self.actuated):
            parent = topo.joint(a.human_joint).parent
            th = ang[topo.segment_index(parent)]
            out[i] = (-math.sin(th), math.cos(th))
        return out


def _standing_origins(human_topology: ModelTopology) -> dict:
    q = np.zeros(human_topology.ndof)
    _, org, _, _ = body_kinematics(human_topology.arrays, q, q)
    return {s.name: org[i].copy() for i, s in enumerate(human_topology.segments)}


def _rod(name, mass, length, half_width, com):
    inertia = mass * (length ** 2 / 12.0 + half_width ** 2)
    return SegmentDef(name, mass, inertia, com, length)


def build_exo(structure: ExoStructure, config: ExoConfig | None = None, human=None) -> ExoAssembly:
    """Place the exo modules on ``human`` (default walker) for ``structure``."""
    if config is None:
        config = ExoConfig()
    if human is None:
        from .human import build_default_walker
        human = build_default_walker()
    htopo = human.topology if hasattr(human, "topology") else human
    _check_bounds({f: getattr(structure, f) for f in STRUCTURE_FIELDS}, config.structure_bounds)
    s = structure
    lm = config.link_masses
    k, c = config.connector_stiffness, config.connector_damping
    origins = _standing_origins(htopo)
    # everything is upright at the standing pose, so local = world offset
    segs: list[SegmentDef] = []
    joints: list[JointDef] = []
    conns: list[Connector] = []
    acts: list[ActuatedJoint] = []
    follow = []
    jfollow = []

    def add_cuff(exo_seg, host_seg, module, link_origin, local_pts):
        names = ("ant", "post")
        for tag, p in zip(names, local_pts):
            world = link_origin + np.asarray(p)
            body_local = world - origins[host_seg]
            conns.append(Connector(f"{exo_seg}_{tag}", (exo_seg, tuple(map(float, p))),
                                   (host_seg, tuple(map(float, body_local))), k, c, 0.0, module))

    def lever(pts):
        return max(float(np.hypot(*(np.subtract(pts[0], pts[1])))), config.lever_floor)

    # hip module
    w_origin = origins["pelvis"] + np.array([s.hip_translation_x, s.hip_translation_y])
    ww, wh = config.waist_cuff
    segs.append(_rod("exo_waist", lm["waist"], 2 * ww, 0.05, (0.0, wh)))
    joints.append(JointDef("exo_waist", None, "exo_waist", "free"))
    follow.append(("exo_waist", "pelvis", (float(s.hip_translation_x), float(s.hip_translation_y))))
    add_cuff("exo_waist", "pelvis", None, w_origin, [(ww, wh), (-ww, wh)])
    tw, td = config.thigh_cuff
    tdist = td + s.thigh_cuff_offset
    for side in SIDES:
        name = f"exo_thigh_{side}"
        segs.append(_rod(name, lm["thigh"], 0.35, tw, (0.0, -0.15)))
        joints.append(JointDef(f"exo_hip_{side}", "exo_waist", name, "revolute", (0.0, 0.0),
                               (-math.inf, math.inf)))
        pts = [(tw, -tdist), (-tw, -tdist)]
        add_cuff(name, f"thigh_{side}", f"hip_{side}", w_origin, pts)
        acts.append(ActuatedJoint(f"hip_{side}", f"exo_hip_{side}", f"hip_{side}", 0,
                                  float(config.hip_axis_tilt), lever(pts)))
        jfollow.append((f"exo_hip_{side}", f"hip_{side}"))

    # ankle modules
    sw, sd = config.shank_cuff
    fw, fd = config.foot_cuff
    for side in SIDES:
        shank = f"shank_{side}"
        ankle_local = np.asarray(htopo.joint(f"ankle_{side}").anchor) + np.array([0.0, s.ankle_translation])
        a_origin = origins[shank] + ankle_local
        frame = f"exo_shank_{side}"
        segs.append(_rod(frame, lm["shank"], 0.3, sw, (0.0, 0.12)))
        joints.append(JointDef(frame, None, frame, "free"))
        follow.append((frame, shank, tuple(map(float, ankle_local))))
        sdist = sd + s.shank_cuff_offset
        add_cuff(frame, shank, None, a_origin, [(sw, sdist), (-sw, sdist)])
        plate = f"exo_foot_{side}"
        segs.append(_rod(plate, lm["foot"], 0.2, 0.03, (0.04, -fd)))
        joints.append(JointDef(f"exo_ankle_{side}", frame, plate, "revolute", (0.0, 0.0),
                               (-math.inf, math.inf)))
        pts = [(-0.02, -fd), (2 * fw, -fd)]
        add_cuff(plate, f"foot_{side}", f"ankle_{side}", a_origin, pts)
        acts.append(ActuatedJoint(f"ankle_{side}", f"exo_ankle_{side}", f"ankle_{side}", 1,
                                  float(s.ankle_rotation), lever(pts)))
        jfollow.append((f"exo_ankle_{side}", f"ankle_{side}"))

    # arm modules
    uw, ud = config.upperarm_cuff
    aw, ad = config.forearm_cuff
    for side in SIDES:
        upper = f"upperarm_{side}"
        elbow_local = np.asarray(htopo.joint(f"elbow_{side}").anchor) + np.array([0.0, s.arm_translation])
        e_origin = origins[upper] + elbow_local
        frame = f"exo_upperarm_{side}"
        segs.append(_rod(frame, lm["upperarm"], 0.25, uw, (0.0, 0.1)))
        joints.append(JointDef(frame, None, frame, "free"))
        follow.append((frame, upper, tuple(map(float, elbow_local))))
        udist = ud + s.upperarm_cuff_offset
        add_cuff(frame, upper, None, e_origin, [(uw, udist), (-uw, udist)])
        fore = f"exo_forearm_{side}"
        segs.append(_rod(fore, lm["forearm"], 0.25, aw, (0.0, -0.1)))
        joints.append(JointDef(f"exo_elbow_{side}", frame, fore, "revolute", (0.0, 0.0),
                               (-math.inf, math.inf)))
        pts = [(aw, -ad), (-aw, -ad)]
        add_cuff(fore, f"forearm_{side}", f"elbow_{side}", e_origin, pts)
        acts.append(ActuatedJoint(f"elbow_{side}", f"exo_elbow_{side}", f"elbow_{side}", 2,
                                  float(s.arm_rotation), lever(pts)))
        jfollow.append((f"exo_elbow_{side}", f"elbow_{side}"))

    return ExoAssembly(structure, config, htopo, tuple(segs), tuple(joints), tuple(conns),
                       tuple(acts), tuple(follow), tuple(jfollow))


# ---------------------------------------------------------------------------
# assistance law
# ---------------------------------------------------------------------------

@njit(cache=True)
def assist_kernel(kpr, kpy, kdr, kdy, q_ref, qd_ref, q, qd, tau_max):
    tau = kpr * q_ref - kpy * q + kdr * qd_ref - kdy * qd
    if tau > tau_max:
        return tau_max
    if tau < -tau_max:
        return -tau_max
    return tau


def assist_torque(gains: ExoGains, joint: str, q_ref: float, qdot_ref: float, q: float,
                  qdot: float, tau_max: float = 80.0) -> float:
    """Decoupled PD assistance for ``joint`` ("hip", "ankle", "elbow" or a sided name).

    ``q`` and ``qdot`` are the human joint's measured angle and velocity.
    """
    kind = joint[:-2] if joint.endswith(("_l", "_r")) else joint
    if kind not in JOINT_KINDS:
        raise InvalidArgumentError(f"{joint!r} is not an actuated joint")
    kpr, kpy, kdr, kdy = gains.matrix()[JOINT_KINDS.index(kind)]
    return float(assist_kernel(kpr, kpy, kdr, kdy, float(q_ref), float(qdot_ref), float(q),
                               float(qdot), float(tau_max)))


@njit(cache=True)
def project_kernel(tau, tilt):
    return tau * math.cos(tilt), abs(tau) * abs(math.sin(tilt))


def project_torque(tau: float, axis_tilt: float) -> tuple[float, float]:
    """Split ``tau`` into the in-plane part and the out-of-plane residual load."""
    if not abs(axis_tilt) < math.pi / 2:
        raise InvalidArgumentError("|axis_tilt| must be below pi/2")
    eff, res = project_kernel(float(tau), float(axis_tilt))
    return float(eff), float(res)


# ---------------------------------------------------------------------------
# connectors
# ---------------------------------------------------------------------------

@njit(cache=True)
def connector_kernel(m, ca, ang, org, om, vel, dirs, Q, forces):
    """Spring-damper connectors. ``dirs`` (K, 2) keeps the last line direction.

    Writes signed forces (positive = tension) and accumulates generalized
    forces into Q. Returns the number of connectors with no usable direction.
    """
    undefined = 0
    for i in range(ca.k.shape[0]):
        ex, ey, evx, evy = local_to_world(ang, org, om, vel, ca.exo_body[i], ca.exo_local[i, 0], ca.exo_local[i, 1])
        hx, hy, hvx, hvy = local_to_world(ang, org, om, vel, ca.hum_body[i], ca.hum_local[i, 0], ca.hum_local[i, 1])
        dx = hx - ex
        dy = hy - ey
        d = math.sqrt(dx * dx + dy * dy)
        if d >= 1e-6:
            ux = dx / d
            uy = dy / d
            dirs[i, 0] = ux
            dirs[i, 1] = uy
        else:
            ux = dirs[i, 0]
            uy = dirs[i, 1]
            if ux == 0.0 and uy == 0.0:
                forces[i] = 0.0
                undefined += 1
                continue
        rate = (hvx - evx) * ux + (hvy - evy) * uy
        f = ca.k[i] * (d - ca.rest[i]) + ca.c[i] * rate
        forces[i] = f
        add_point_force(m, org, ca.exo_body[i], ex, ey, f * ux, f * uy, Q)
        add_point_force(m, org, ca.hum_body[i], hx, hy, -f * ux, -f * uy, Q)
    return undefined


@njit(cache=True)
def exo_torque_kernel(aa, gains, q_ref, qd_ref, q, qd, tau_out, eff_out, res_out):
    """Assistance torques for every actuated joint from human joint kinematics."""
    for a in range(aa.exo_dof.shape[0]):
        h = aa.hum_dof[a]
        g = aa.kind[a]
        tau = assist_kernel(gains[g, 0], gains[g, 1], gains[g, 2], gains[g, 3],
                            q_ref[h], qd_ref[h], q[h], qd[h], aa.tau_max)
        eff, res = project_kernel(tau, aa.tilt[a])
        tau_out[a] = tau
        eff_out[a] = eff
        res_out[a] = res


@njit(cache=True)
def apply_exo_torques(aa, eff, Q):
    # an internal couple across a revolute joint is its generalized force
    for a in range(aa.exo_dof.shape[0]):
        Q[aa.exo_dof[a]] += eff[a]


@njit(cache=True)
def connector_magnitudes(ca, aa, forces, res, out):
    """|f| per connector including the out-of-plane strap load of tilted modules."""
    for i in range(forces.shape[0]):
        f = forces[i]
        a = ca.module[i]
        if a >= 0:
            r = res[a] / aa.lever[a]
            out[i] = math.sqrt(f * f + r * r)
        else:
            out[i] = abs(f)


def connector_forces(model: ModelTopology, q, qdot, connectors, dirs=None):
    """Signed connector forces and their generalized projection.

    ``connectors`` is an :class:`ExoAssembly` or a sequence of
    :class:`Connector`. ``dirs`` carries line directions between calls for
    coincident anchors.
    """
    if isinstance(connectors, ExoAssembly):
        conns = connectors.connectors
    else:
        conns = tuple(connectors)
    ca = _pack_connectors(model, conns)
    q = np.ascontiguousarray(q, dtype=float)
    qd = np.ascontiguousarray(qdot, dtype=float)
    if q.shape != (model.ndof,) or qd.shape != (model.ndof,):
        raise InvalidArgumentError("state dimension does not match the model")
    ang, org, om, vel = body_kinematics(model.arrays, q, qd)
    if dirs is None:
        dirs = np.zeros((len(conns), 2))
    Q = np.zeros(model.ndof)
    f = np.zeros(len(conns))
    if connector_kernel(model.arrays, ca, ang, org, om, vel, dirs, Q, f):
        warnings.warn("coincident connector anchors with no previous direction; force set to 0",
                      RuntimeWarning, stacklevel=2)
    return f, Q


def _pack_connectors(model: ModelTopology, conns: Sequence[Connector]) -> ConnectorArrays:
    K = len(conns)
    eb = np.zeros(K, dtype=np.int64)
    hb = np.zeros(K, dtype=np.int64)
    el = np.zeros((K, 2))
    hl = np.zeros((K, 2))
    for i, c in enumerate(conns):
        eb[i], el[i] = model.resolve_point(*c.exo_anchor)
        hb[i], hl[i] = model.resolve_point(*c.body_anchor)
    return ConnectorArrays(eb, el, hb, hl, np.array([c.stiffness for c in conns], dtype=float),
                           np.array([c.damping for c in conns], dtype=float),
                           np.array([c.rest_length for c in conns], dtype=float),
                           np.full(K, -1, dtype=np.int64))


def exo_apply(assembly: ExoAssembly, gains: ExoGains, reference, state, t: float | None = None,
              dirs=None):
    """Generalized force of the exo on the combined system.

    ``reference`` is ``(q_ref, qdot_ref)`` over the human coordinates (a
    callable of ``t`` returning that pair is also accepted). Returns
    ``(Q, connector_magnitudes)``.
    """
    topo = assembly.combined
    q = np.ascontiguousarray(state.q, dtype=float)
    qd = np.ascontiguousarray(state.qdot, dtype=float)
    if callable(reference):
        reference = reference(state.time if t is None else t)
    q_ref, qd_ref = (np.ascontiguousarray(r, dtype=float) for r in reference)
    aa = assembly.actuator_arrays
    ca = assembly.connector_arrays
    A = len(assembly.actuated)
    tau, eff, res = np.zeros(A), np.zeros(A), np.zeros(A)
    exo_torque_kernel(aa, gains.matrix(), q_ref, qd_ref, q, qd, tau, eff, res)
    Q = np.zeros(topo.ndof)
    apply_exo_torques(aa, eff, Q)
    ang, org, om, vel = body_kinematics(topo.arrays, q, qd)
    if dirs is None:
        dirs = np.zeros((len(assembly.connectors), 2))
    f = np.zeros(len(assembly.connectors))
    connector_kernel(topo.arrays, ca, ang, org, om, vel, dirs, Q, f)
    mags = np.zeros_like(f)
    connector_magnitudes(ca, aa, f, res, mags)
    return Q, mags
