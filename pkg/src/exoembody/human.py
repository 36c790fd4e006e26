"""Default planar walker, its muscle set, and reference gait motions.

Coordinates (n = 14): pelvis x, y, rotation (planar-free base) followed by
lumbar, hip/knee/ankle (left, right) and shoulder/elbow (left, right).
Positive hip, shoulder and elbow angles are flexion, positive knee angle
is flexion and positive ankle angle is dorsiflexion. Both body sides lie
in the same sagittal plane, so mirroring the body swaps left and right
coordinates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar

from .errors import InvalidArgumentError, TrajectoryFormatError
from .multibody import (
    ContactPoint,
    JointDef,
    ModelTopology,
    SegmentDef,
    body_kinematics,
    local_to_world,
)
from .muscle import MuscleParams, MusclePath, MuscleUnit, fiber_lengths, with_slack_for_length

SIDES = ("l", "r")

# Segment table: mass fraction of body mass; length, COM and radius of gyration
# as fractions of stature (COM and gyration of segment length where noted).
ANTHROPOMETRY = {
    #             mass    length  com_y(frac of length)  gyration(frac of length)
    "pelvis":   (0.142, 0.100, 0.30, 0.60),
    "torso":    (0.436, 0.190, 0.67, 0.63),
    "thigh":    (0.100, 0.245, -0.433, 0.323),
    "shank":    (0.0465, 0.246, -0.433, 0.302),
    "foot":     (0.0145, 0.152, None, 0.475),
    "upperarm": (0.028, 0.186, -0.436, 0.322),
    "forearm":  (0.022, 0.254, -0.39, 0.30),
}
ANKLE_HEIGHT = 0.039    # fraction of stature
HEEL_BACK = 0.035
TOE_FRONT = 0.117
HEAD_TOP = 0.37         # head top above lumbar joint

JOINT_LIMITS = {
    "lumbar": (-0.5, 0.5),
    "hip": (-0.7, 1.4),
    "knee": (0.0, 2.2),
    "ankle": (-0.7, 0.5),
    "shoulder": (-1.2, 2.0),
    "elbow": (0.0, 2.5),
}
PASSIVE = {  # stiffness N m/rad, damping N m s/rad
    "lumbar": (800.0, 30.0),
    "hip": (5.0, 1.0),
    "knee": (5.0, 1.0),
    "ankle": (5.0, 1.0),
    "shoulder": (2.0, 0.5),
    "elbow": (2.0, 0.5),
}

# name: (f_max N, l_opt m, via points as (segment kind, x, y) with y in metres
# or, for strings ending in "L", as a fraction of the segment length)
MUSCLE_TABLE = {
    "hip_flexor": (2000.0, 0.10, [("pelvis", 0.05, 0.10), ("thigh", 0.05, -0.10)]),
    "hip_extensor": (2500.0, 0.12, [("pelvis", -0.06, 0.08), ("thigh", -0.06, -0.12)]),
    "hamstrings": (2000.0, 0.12, [("pelvis", -0.06, -0.02), ("thigh", -0.05, "0.85L"),
                                  ("shank", -0.035, -0.08)]),
    "rectus_femoris": (1200.0, 0.08, [("pelvis", 0.05, 0.08), ("thigh", 0.05, "0.9L"),
                                      ("shank", 0.045, -0.07)]),
    "vasti": (4500.0, 0.09, [("thigh", 0.04, "0.4L"), ("thigh", 0.05, "0.9L"),
                             ("shank", 0.045, -0.07)]),
    "gastrocnemius": (2500.0, 0.09, [("thigh", -0.03, "0.93L"), ("shank", -0.04, "0.3L"),
                                     ("foot", -0.05, 0.0)]),
    "soleus": (3500.0, 0.06, [("shank", -0.03, "0.3L"), ("foot", -0.05, 0.0)]),
    "tibialis_anterior": (1500.0, 0.07, [("shank", 0.03, "0.4L"), ("shank", 0.04, "0.97L"),
                                         ("foot", 0.08, -0.03)]),
    "shoulder_flexor": (800.0, 0.08, [("torso", 0.04, "+0.06"), ("upperarm", 0.04, -0.15)]),
    "shoulder_extensor": (800.0, 0.08, [("torso", -0.04, "+0.06"), ("upperarm", -0.04, -0.15)]),
    "elbow_flexor": (800.0, 0.10, [("upperarm", 0.03, "0.3L"), ("forearm", 0.03, -0.05)]),
    "elbow_extensor": (800.0, 0.10, [("upperarm", -0.025, "0.3L"), ("forearm", -0.025, 0.02)]),
}
LEG_MUSCLES = tuple(list(MUSCLE_TABLE)[:8])
ARM_MUSCLES = tuple(list(MUSCLE_TABLE)[8:])


@dataclass(frozen=True)
class HumanScenario:
    topology: ModelTopology
    muscles: tuple[MuscleUnit, ...]
    key_bodies: tuple[tuple[str, str], ...]
    mass: float
    stature: float
    base_joint: str | None = "pelvis"
    base_segment: str | None = "pelvis"

    @property
    def ndof(self) -> int:
        return self.topology.ndof

    @property
    def n_base(self) -> int:
        return 0 if self.base_joint is None else 3

    @property
    def joint_names(self) -> list[str]:
        """Revolute joints in coordinate order."""
        return [j.name for j in self.topology.joints if j.kind == "revolute"]

    @property
    def coordinate_names(self) -> list[str]:
        return self.topology.coordinate_names()

    @property
    def tracked_dofs(self) -> np.ndarray:
        """Coordinates compared against the reference (revolute joints)."""
        return np.array([self.topology.dof(j) for j in self.joint_names], dtype=np.int64)

    @property
    def muscle_names(self) -> list[str]:
        return [m.name for m in self.muscles]

    def mirror_coordinates(self) -> np.ndarray:
        """Permutation mapping each coordinate to its left/right mirror."""
        names = self.coordinate_names
        pos = {n: i for i, n in enumerate(names)}
        return np.array([pos[_swap_side(n)] for n in names], dtype=np.int64)

    def mirror_muscles(self) -> np.ndarray:
        names = self.muscle_names
        pos = {n: i for i, n in enumerate(names)}
        return np.array([pos[_swap_side(n)] for n in names], dtype=np.int64)


def _swap_side(name: str) -> str:
    if name.endswith("_l"):
        return name[:-2] + "_r"
    if name.endswith("_r"):
        return name[:-2] + "_l"
    return name


def joint_kind(name: str) -> str:
    """``"hip_l"`` -> ``"hip"``."""
    return name[:-2] if name.endswith(("_l", "_r")) else name


def _segment_geometry(stature: float):
    geo = {}
    for kind, (_, lf, _, _) in ANTHROPOMETRY.items():
        geo[kind] = lf * stature
    return geo


def build_default_walker(
    mass: float = 70.0,
    stature: float = 1.75,
    passive: dict | None = None,
    limits: dict | None = None,
    muscle_overrides: dict | None = None,
    contact: dict | None = None,
) -> HumanScenario:
    """Desk-scale 12-segment, 24-muscle planar walker.

    ``muscle_overrides`` maps a muscle kind (e.g. ``"soleus"``) to a dict of
    :class:`MuscleParams` fields, applied to both sides.
    """
    if not (mass > 0 and stature > 0):
        raise InvalidArgumentError("mass and stature must be positive")
    passive = {**PASSIVE, **(passive or {})}
    limits = {**JOINT_LIMITS, **(limits or {})}
    H = stature
    L = _segment_geometry(H)

    def seg(kind, name, com, points):
        mf, _, _, gf = ANTHROPOMETRY[kind]
        m = mf * mass
        ref_len = L[kind]
        return SegmentDef(name, m, m * (gf * ref_len) ** 2, com, ref_len, tuple(points))

    segments = []
    ped = ANTHROPOMETRY["pelvis"][2]
    segments.append(seg("pelvis", "pelvis", (0.0, ped * L["pelvis"]),
                        [("hip", (0.0, 0.0)), ("lumbar", (0.0, L["pelvis"]))]))
    segments.append(seg("torso", "torso", (0.0, ANTHROPOMETRY["torso"][2] * L["torso"]),
                        [("shoulder", (0.0, L["torso"])), ("head", (0.0, HEAD_TOP * H))]))
    ah = ANKLE_HEIGHT * H
    for s in SIDES:
        for kind, pts in (
            ("thigh", [("knee", (0.0, -L["thigh"]))]),
            ("shank", [("ankle", (0.0, -L["shank"]))]),
            ("upperarm", [("elbow", (0.0, -L["upperarm"]))]),
            ("forearm", [("hand", (0.0, -L["forearm"]))]),
        ):
            segments.append(seg(kind, f"{kind}_{s}", (0.0, ANTHROPOMETRY[kind][2] * L[kind]), pts))
        segments.append(seg("foot", f"foot_{s}", (0.04 * H * 0.6, -0.5 * ah),
                            [("heel", (-HEEL_BACK * H, -ah)), ("toe", (TOE_FRONT * H, -ah))]))

    def rj(name, parent, child, anchor, kind, axis=1.0):
        k, d = passive[kind]
        return JointDef(name, parent, child, "revolute", anchor, limits[kind], k, d, axis)

    joints = [JointDef("pelvis", None, "pelvis", "free"),
              rj("lumbar", "pelvis", "torso", (0.0, L["pelvis"]), "lumbar")]
    for s in SIDES:
        joints += [
            rj(f"hip_{s}", "pelvis", f"thigh_{s}", (0.0, 0.0), "hip"),
            rj(f"knee_{s}", f"thigh_{s}", f"shank_{s}", (0.0, -L["thigh"]), "knee", axis=-1.0),
            rj(f"ankle_{s}", f"shank_{s}", f"foot_{s}", (0.0, -L["shank"]), "ankle"),
        ]
    for s in SIDES:
        joints += [
            rj(f"shoulder_{s}", "torso", f"upperarm_{s}", (0.0, L["torso"]), "shoulder"),
            rj(f"elbow_{s}", f"upperarm_{s}", f"forearm_{s}", (0.0, -L["upperarm"]), "elbow"),
        ]
    # order segments so that coordinates follow the documented layout
    order = ["pelvis", "torso", "thigh_l", "shank_l", "foot_l", "thigh_r", "shank_r", "foot_r",
             "upperarm_l", "forearm_l", "upperarm_r", "forearm_r"]
    segs = {s.name: s for s in segments}
    jmap = {j.child: j for j in joints}
    cfg = {**dict(stiffness=5e4, damping=500.0, friction=0.9, tangential_damping=500.0), **(contact or {})}
    contacts = []
    for s in SIDES:
        for p in ("heel", "toe"):
            contacts.append(ContactPoint(f"foot_{s}", segs[f"foot_{s}"].point(p), **cfg))
    topo = ModelTopology(tuple(segs[n] for n in order), tuple(jmap[n] for n in order),
                         contact_points=tuple(contacts))

    muscles = _build_muscles(topo, L, muscle_overrides or {})
    key_bodies = (("torso", "head"), ("foot_l", "toe"), ("foot_r", "toe"),
                  ("forearm_l", "hand"), ("forearm_r", "hand"))
    return HumanScenario(topo, tuple(muscles), key_bodies, float(mass), float(stature))


def _via(kind, side, x, y, L):
    seg = kind if kind in ("pelvis", "torso") else f"{kind}_{side}"
    if isinstance(y, str):
        if y.endswith("L"):
            yv = -float(y[:-1]) * L[kind]
        else:  # offset from the segment's outboard joint (torso shoulder)
            yv = L[kind] + float(y)
    else:
        yv = float(y)
    return seg, (float(x), yv)


def _build_muscles(topo: ModelTopology, L: dict, overrides: dict) -> list[MuscleUnit]:
    # optimal fiber length is reached at the mean reference posture
    q_mid = np.zeros(topo.ndof)
    for j, val in DEFAULT_GAIT_MEAN.items():
        for s in SIDES:
            q_mid[topo.dof(f"{j}_{s}")] = val
    units = []
    for s in SIDES:
        for name in LEG_MUSCLES + ARM_MUSCLES:
            f_max, l_opt, pts = MUSCLE_TABLE[name]
            path = MusclePath(tuple(_via(k, s, x, y, L) for k, x, y in pts))
            extra = dict(overrides.get(name, {}))
            params = MuscleParams(f_max=extra.pop("f_max", f_max), l_opt=extra.pop("l_opt", l_opt),
                                  l_slack=0.0, **extra)
            unit = MuscleUnit(f"{name}_{s}", params, path)
            length = fiber_lengths(topo, q_mid, [unit])[0]
            units.append(with_slack_for_length(unit, length))
    # keep left muscles first, per-limb grouping
    order = [f"{n}_{s}" for s in SIDES for n in LEG_MUSCLES] + [f"{n}_{s}" for s in SIDES for n in ARM_MUSCLES]
    by = {u.name: u for u in units}
    return [by[n] for n in order]


# ---------------------------------------------------------------------------
# reference motion
# ---------------------------------------------------------------------------

# (a0, a1, phi1, a2, phi2) for the left side; right side is shifted by half a period
DEFAULT_GAIT = {
    "lumbar": (0.0, 0.0, 0.0, 0.0, 0.0),
    "hip": (0.0, 0.35, 0.0, 0.0, 0.0),
    "knee": (0.55, 0.5, 0.97, 0.0, 0.0),
    "ankle": (0.0, 0.2, -1.27, 0.05, 0.0),
    "shoulder": (0.0, 0.15, math.pi, 0.0, 0.0),
    "elbow": (0.3, 0.15, math.pi, 0.0, 0.0),
}
DEFAULT_GAIT_MEAN = {k: v[0] for k, v in DEFAULT_GAIT.items() if k != "lumbar"}
DEFAULT_PERIOD = 1.1


@dataclass(frozen=True)
class ReferenceMotion:
    """Two-harmonic Fourier gait.

    ``q_ref,j(t) = a0 + a1 sin(2 pi t/T + phi1) + a2 sin(4 pi t/T + phi2)``
    for each revolute joint in ``joints`` (human coordinate order). The
    pelvis advances at ``speed`` with vertical oscillation
    ``height + amplitude * sin(4 pi t / T + vertical_phase)`` and constant
    pitch ``pitch``.
    """

    period: float
    joints: tuple[str, ...]
    coefficients: tuple[tuple[float, float, float, float, float], ...]
    speed: float = 0.0
    height: float = 0.0
    vertical_amplitude: float = 0.0
    vertical_phase: float = math.pi / 2
    pitch: float = 0.0
    source: str = "synthetic"
    floating_base: bool = True

    def __post_init__(self):
        if not self.period > 0:
            raise InvalidArgumentError("period must be positive")
        if len(self.coefficients) != len(self.joints):
            raise InvalidArgumentError("one coefficient row per joint required")
        object.__setattr__(self, "coefficients",
                           tuple(tuple(float(v) for v in row) for row in self.coefficients))
        object.__setattr__(self, "joints", tuple(self.joints))

    @property
    def coefficient_array(self) -> np.ndarray:
        return np.array(self.coefficients, dtype=float).reshape(len(self.joints), 5)

    @property
    def n_base(self) -> int:
        return 3 if self.floating_base else 0

    @property
    def base_params(self) -> np.ndarray:
        return np.array([self.speed, self.height, self.vertical_amplitude,
                         self.vertical_phase, self.pitch])

    def joint_values(self, t) -> np.ndarray:
        """Revolute joint angles at times ``t`` (shape (len(t), J))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        C = self.coefficient_array
        w = 2 * math.pi / self.period
        ph1 = w * t[:, None] + C[None, :, 2]
        ph2 = 2 * w * t[:, None] + C[None, :, 4]
        return C[None, :, 0] + C[None, :, 1] * np.sin(ph1) + C[None, :, 3] * np.sin(ph2)


@njit(cache=True)
def reference_kernel(coef, base, period, t, q, qd, n_base):
    """Fill reference coordinates and velocities (base first, then joints)."""
    w = 2.0 * math.pi / period
    if n_base > 0:
        q[0] = base[0] * t
        qd[0] = base[0]
        q[1] = base[1] + base[2] * math.sin(2.0 * w * t + base[3])
        qd[1] = 2.0 * w * base[2] * math.cos(2.0 * w * t + base[3])
        q[2] = base[4]
        qd[2] = 0.0
    for j in range(coef.shape[0]):
        p1 = w * t + coef[j, 2]
        p2 = 2.0 * w * t + coef[j, 4]
        q[n_base + j] = coef[j, 0] + coef[j, 1] * math.sin(p1) + coef[j, 3] * math.sin(p2)
        qd[n_base + j] = w * coef[j, 1] * math.cos(p1) + 2.0 * w * coef[j, 3] * math.cos(p2)


@njit(cache=True)
def reference_accel_kernel(coef, base, period, t, qdd, n_base):
    """Second time derivative of the reference coordinates."""
    w = 2.0 * math.pi / period
    if n_base > 0:
        qdd[0] = 0.0
        qdd[1] = -4.0 * w * w * base[2] * math.sin(2.0 * w * t + base[3])
        qdd[2] = 0.0
    for j in range(coef.shape[0]):
        p1 = w * t + coef[j, 2]
        p2 = 2.0 * w * t + coef[j, 4]
        qdd[n_base + j] = -w * w * coef[j, 1] * math.sin(p1) - 4.0 * w * w * coef[j, 3] * math.sin(p2)


def reference_state(motion: ReferenceMotion, t: float, human: HumanScenario | None = None):
    """(q_ref, qdot_ref, key-point world positions) at time ``t``.

    Key-point references need the walker (``human``) for forward kinematics;
    without it an empty array is returned.
    """
    if t < 0:
        raise InvalidArgumentError("t must be non-negative")
    nb = motion.n_base
    q = np.zeros(nb + len(motion.joints))
    qd = np.zeros_like(q)
    reference_kernel(motion.coefficient_array, motion.base_params, motion.period, float(t), q, qd, nb)
    if human is None:
        return q, qd, np.zeros((0, 2))
    check_compatible(motion, human)
    return q, qd, key_points(human, q)


def check_compatible(motion: ReferenceMotion, human: HumanScenario) -> None:
    if list(motion.joints) != human.joint_names:
        raise InvalidArgumentError("motion joint order does not match the scenario")
    if motion.n_base != human.n_base:
        raise InvalidArgumentError("motion and scenario disagree on the floating base")


def key_points(human: HumanScenario, q) -> np.ndarray:
    topo = human.topology
    q = np.ascontiguousarray(q, dtype=float)
    ang, org, om, vel = body_kinematics(topo.arrays, q, np.zeros_like(q))
    out = np.zeros((len(human.key_bodies), 2))
    for k, (seg, pt) in enumerate(human.key_bodies):
        b, local = topo.resolve_point(seg, pt)
        px, py, _, _ = local_to_world(ang, org, om, vel, b, local[0], local[1])
        out[k] = (px, py)
    return out


def gait_coefficients(joint_names: Sequence[str], table: dict | None = None) -> list[tuple]:
    """Expand a per-joint-kind table (left side) into per-joint rows."""
    table = {**DEFAULT_GAIT, **(table or {})}
    rows = []
    for name in joint_names:
        a0, a1, p1, a2, p2 = table[joint_kind(name)]
        if name.endswith("_r"):
            p1 += math.pi
            p2 += 2 * math.pi
        rows.append((a0, a1, p1, a2, p2))
    return rows


def synthetic_gait(
    human: HumanScenario,
    period: float = DEFAULT_PERIOD,
    table: dict | None = None,
    vertical_amplitude: float = 0.015,
    clearance: float = 0.02,
    speed: float | None = None,
    height: float | None = None,
) -> ReferenceMotion:
    """Synthetic walking reference for ``human``.

    Unless given, pelvis height is chosen so the lowest foot point passes
    ``clearance`` above the ground and forward speed so the lowest foot point
    is on average stationary while it is lowest. The trigonometric joint
    profiles have no exact stance phase, so a few centimetres of clearance
    keep the swinging toe from dragging when the pelvis is guided.
    """
    motion = ReferenceMotion(period, tuple(human.joint_names),
                             tuple(gait_coefficients(human.joint_names, table)),
                             vertical_amplitude=vertical_amplitude)
    if speed is not None and height is not None:
        return replace(motion, speed=float(speed), height=float(height))
    ts = np.linspace(0.0, period, 400, endpoint=False)
    lows = np.zeros(len(ts))
    lowx = np.zeros(len(ts))
    topo = human.topology
    feet = [(f"foot_{s}", p) for s in SIDES for p in ("heel", "toe")]
    for i, t in enumerate(ts):
        q, _, _ = reference_state(motion, t)
        pts = []
        ang, org, om, vel = body_kinematics(topo.arrays, q, np.zeros_like(q))
        for seg, pt in feet:
            b, local = topo.resolve_point(seg, pt)
            px, py, _, _ = local_to_world(ang, org, om, vel, b, local[0], local[1])
            pts.append((py, px))
        py, px = min(pts)
        lows[i] = py
        lowx[i] = px
    if height is None:
        height = clearance - lows.min()
    if speed is None:
        # backward drift of the lowest point while it is within 1 cm of its minimum
        dx = np.diff(np.r_[lowx, lowx[0]])
        dt = ts[1] - ts[0]
        contact = lows - lows.min() < 0.01
        contact &= np.abs(dx) < 0.05  # skip jumps between feet
        speed = float(-np.mean(dx[contact]) / dt) if contact.any() else 1.0
    return replace(motion, speed=float(speed), height=float(height))


def check_limits(motion: ReferenceMotion, human: HumanScenario, samples: int = 1000) -> bool:
    t = np.linspace(0.0, motion.period, samples, endpoint=False)
    vals = motion.joint_values(t)
    for k, name in enumerate(motion.joints):
        lo, hi = human.topology.joint(name).limits
        if vals[:, k].min() < lo or vals[:, k].max() > hi:
            return False
    return True


@dataclass(frozen=True)
class TrajectorySet:
    motions: tuple[ReferenceMotion, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.motions:
            raise InvalidArgumentError("a trajectory set needs at least one motion")
        first = self.motions[0].joints
        if any(m.joints != first for m in self.motions):
            raise InvalidArgumentError("all motions must share joint ordering")

    def __len__(self):
        return len(self.motions)

    def __getitem__(self, i):
        return self.motions[i]


def make_trajectory_variants(
    base: ReferenceMotion,
    count: int = 10,
    jitter_fraction: float = 0.05,
    seed: int = 0,
    human: HumanScenario | None = None,
    max_attempts: int = 100,
) -> TrajectorySet:
    """Seeded variants of ``base`` with multiplicative jitter on amplitudes and period.

    Jitter factors are drawn per joint kind so left/right symmetry is kept.
    Variant 0 is ``base`` itself.
    """
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    if not 0.0 <= jitter_fraction <= 0.2:
        raise InvalidArgumentError("jitter_fraction must lie in [0, 0.2]")
    rng = np.random.default_rng(seed)
    kinds = sorted({joint_kind(j) for j in base.joints})
    motions = [base]
    C0 = base.coefficient_array
    while len(motions) < count:
        for _ in range(max_attempts):
            f_T = 1.0 + rng.uniform(-jitter_fraction, jitter_fraction)
            f_amp = {k: 1.0 + rng.uniform(-jitter_fraction, jitter_fraction, 2) for k in kinds}
            C = C0.copy()
            for j, name in enumerate(base.joints):
                C[j, 1] *= f_amp[joint_kind(name)][0]
                C[j, 3] *= f_amp[joint_kind(name)][1]
            hip = f_amp.get("hip", np.ones(2))[0]
            cand = replace(base, period=base.period * f_T,
                           coefficients=tuple(map(tuple, C)),
                           speed=base.speed * hip / f_T)
            if human is None or check_limits(cand, human):
                motions.append(cand)
                break
        else:
            raise InvalidArgumentError(
                f"could not draw a limit-respecting variant in {max_attempts} attempts"
            )
    return TrajectorySet(tuple(motions), seed)


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------

def export_reference_csv(motion: ReferenceMotion, path, duration: float | None = None,
                         rate: float = 200.0) -> Path:
    """Write joint angles sampled at ``rate`` Hz: header ``time,<joints...>``."""
    duration = 2 * motion.period if duration is None else duration
    t = np.arange(0.0, duration, 1.0 / rate)
    vals = motion.joint_values(t)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *motion.joints])
        for i in range(len(t)):
            w.writerow([repr(float(t[i]))] + [repr(float(v)) for v in vals[i]])
    return path


def _fit_fourier(t, Y, period):
    w = 2 * math.pi / period
    A = np.column_stack([np.ones_like(t), np.sin(w * t), np.cos(w * t),
                         np.sin(2 * w * t), np.cos(2 * w * t)])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ coef
    return coef, resid


def _detect_period(t, Y):
    span = t[-1] - t[0]
    dt = np.median(np.diff(t))
    Yc = Y - Y.mean(axis=0)
    if not np.any(np.abs(Yc) > 1e-12):
        return span + dt

    def sse(T):
        return float(np.sum(_fit_fourier(t, Y, T)[1] ** 2))

    lo = 20 * dt
    grid = np.linspace(lo, span + dt, 400)
    vals = np.array([sse(T) for T in grid])
    best = vals.min()
    tol = best + 1e-3 * float(np.sum(Yc ** 2))
    # the shortest period that explains the data as well as any longer one
    k = int(np.argmax(vals <= tol))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(sse, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def import_reference_csv(path, joints: Sequence[str] | None = None,
                         base: ReferenceMotion | None = None,
                         min_samples_per_period: int = 50):
    """Fit the two-harmonic form to a joint-angle CSV.

    Returns ``(motion, rms_residual_rad)``. Pelvis parameters come from
    ``base`` when given.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryFormatError("empty file", row=1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "time":
        raise TrajectoryFormatError("first column must be 'time'", row=1)
    wanted = list(joints) if joints is not None else (list(base.joints) if base else header[1:])
    missing = [j for j in wanted if j not in header]
    if missing:
        raise TrajectoryFormatError(f"missing columns {missing}", row=1)
    cols = [header.index(j) for j in wanted]
    t, Y = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise TrajectoryFormatError(f"row {r}: expected {len(header)} fields", row=r)
        try:
            t.append(float(row[0]))
            Y.append([float(row[c]) for c in cols])
        except ValueError as exc:
            raise TrajectoryFormatError(f"row {r}: {exc}", row=r) from None
        if len(t) > 1 and not t[-1] > t[-2]:
            raise TrajectoryFormatError(f"row {r}: time is not strictly increasing", row=r)
    t = np.asarray(t)
    Y = np.asarray(Y)
    if len(t) < min_samples_per_period:
        raise TrajectoryFormatError(
            f"only {len(t)} samples; need at least {min_samples_per_period} per period", row=len(t) + 1)
    T = _detect_period(t, Y)
    in_period = t < t[0] + T - 1e-12
    if in_period.sum() < min_samples_per_period:
        raise TrajectoryFormatError(
            f"{int(in_period.sum())} samples per period; need {min_samples_per_period}",
            row=int(in_period.sum()) + 1)
    coef, resid = _fit_fourier(t[in_period], Y[in_period], T)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    rows_out = []
    for j in range(len(wanted)):
        a0, s1, c1, s2, c2 = coef[:, j]
        rows_out.append((a0, math.hypot(s1, c1), math.atan2(c1, s1),
                         math.hypot(s2, c2), math.atan2(c2, s2)))
    kw = {}
    if base is not None:
        kw = dict(speed=base.speed, height=base.height, vertical_amplitude=base.vertical_amplitude,
                  vertical_phase=base.vertical_phase, pitch=base.pitch, floating_base=base.floating_base)
    motion = ReferenceMotion(T, tuple(wanted), tuple(rows_out), source="imported", **kw)
    return motion, rms


# ---------------------------------------------------------------------------
# single-joint test scenario
# ---------------------------------------------------------------------------

def build_pendulum_scenario(mass: float = 2.0, length: float = 0.5, f_max: float = 400.0,
                            moment_arm: float = 0.04) -> HumanScenario:
    """Hanging rod on a ground pivot, driven by an antagonist muscle pair.

    The pair runs along both sides of the rod at ``moment_arm``; the flexor
    rotates the rod counter-clockwise (positive angle).
    """
    if not (mass > 0 and length > 0):
        raise InvalidArgumentError("mass and length must be positive")
    rod = SegmentDef("rod", mass, mass * length ** 2 / 12.0, (0.0, -length / 2), length,
                     (("tip", (0.0, -length)),))
    joint = JointDef("joint", None, "rod", "revolute", (0.0, 0.0), (-2.0, 2.0), 0.0, 0.05)
    topo = ModelTopology((rod,), (joint,))
    r = moment_arm
    units = []
    for name, sgn in (("flexor", 1.0), ("extensor", -1.0)):
        path = MusclePath((("ground", (sgn * r, 0.15)), ("rod", (sgn * r, -0.15))))
        unit = MuscleUnit(name, MuscleParams(f_max=f_max, l_opt=0.2, l_slack=0.0), path)
        units.append(with_slack_for_length(unit, fiber_lengths(topo, np.zeros(1), [unit])[0]))
    return HumanScenario(topo, tuple(units), (("rod", "tip"),), float(mass), float(length),
                         base_joint=None, base_segment=None)


def pendulum_motion(period: float = 1.0, amplitude: float = 0.4) -> ReferenceMotion:
    return ReferenceMotion(period, ("joint",), ((0.0, amplitude, 0.0, 0.0, 0.0),),
                           floating_base=False)
