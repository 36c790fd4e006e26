"""Compiled coupled control/physics loop shared by episodes and rollouts.

One call to :func:`run_loop` advances the human (and optional exo) through
``n_ctrl`` control steps of ``substeps`` physics steps each. Controllers,
rewards, perturbations, tethering and trace recording all run inside the
compiled loop; Python only prepares the packed arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from numba import njit

from .exo import (
    ActuatorArrays,
    ConnectorArrays,
    ExoAssembly,
    ExoGains,
    apply_exo_torques,
    connector_kernel,
    connector_magnitudes,
    exo_torque_kernel,
)
from .human import (
    HumanScenario,
    ReferenceMotion,
    check_compatible,
    reference_accel_kernel,
    reference_kernel,
)
from .multibody import (
    add_point_force,
    body_kinematics,
    cholesky_solve,
    contact_kernel,
    crba,
    limit_forces,
    local_to_world,
    passive_forces,
    rnea,
)
from .muscle import (
    _mtu_force_row,
    activation_update,
    muscle_forces_kernel,
    muscle_moment_arms,
    pack_muscles,
    path_state,
)

# controller kinds
ZERO, REFLEX, MLP, PLAYBACK, TRACKING = 0, 1, 2, 3, 4
# base modes
FIXED, GUIDED, FREE_BASE = 0, 1, 2
# episode status
RUNNING, DONE, TERMINATED, DIVERGED = 0, 1, 2, 3

LOOKAHEAD = 0.1
VEL_SCALE = 0.1


class LoopParams(NamedTuple):
    dt: float
    substeps: int
    n_ctrl: int
    t0: float
    n_base: int
    base_mode: int
    tether_k: float
    tether_c: float
    tether_kr: float
    tether_cr: float
    tau_act: float
    tau_deact: float
    controller: int
    reflex_kp: float
    reflex_kd: float
    reflex_fhat: float
    reflex_feedforward: bool
    reflex_lead: float
    w_joint: float
    w_position: float
    w_energy: float
    w_healthy: float
    term_threshold: float
    healthy_height: float
    terminate: bool
    diverge_penalty: float
    assist_aware: bool = True


class Reference(NamedTuple):
    coef: np.ndarray      # (J, 5)
    base: np.ndarray      # (5,)
    period: float
    key_body: np.ndarray  # (K,)
    key_local: np.ndarray  # (K, 2)


class Perturbations(NamedTuple):
    start: np.ndarray     # (E,) s, relative to episode start
    stop: np.ndarray
    body: np.ndarray
    lx: np.ndarray        # application point, segment-local
    ly: np.ndarray
    fx: np.ndarray        # world force N
    fy: np.ndarray


class Network(NamedTuple):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray


class Traces(NamedTuple):
    time: np.ndarray       # (S,) reference time at the end of each control step
    q: np.ndarray          # (S, n_total)
    qdot: np.ndarray       # (S, n_total)
    q_ref: np.ndarray      # (S, nh)
    muscle_force: np.ndarray  # (S, M)
    activation: np.ndarray    # (S, M)
    excitation: np.ndarray    # (S, M)
    connector: np.ndarray  # (S, K) |f| including out-of-plane strap load
    exo_torque: np.ndarray  # (S, A) commanded torque before projection
    reward: np.ndarray     # (S, 5) total, joint, position, energy, healthy
    contact: np.ndarray    # (S, C, 2)


def empty_traces(n_ctrl, n_total, nh, M, K, A, C) -> Traces:
    return Traces(
        np.zeros(n_ctrl), np.zeros((n_ctrl, n_total)), np.zeros((n_ctrl, n_total)),
        np.zeros((n_ctrl, nh)), np.zeros((n_ctrl, M)), np.zeros((n_ctrl, M)),
        np.zeros((n_ctrl, M)), np.zeros((n_ctrl, K)), np.zeros((n_ctrl, A)),
        np.zeros((n_ctrl, 5)), np.zeros((n_ctrl, C, 2)),
    )


def empty_network(D: int, M: int) -> Network:
    return Network(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1),
                   np.zeros((1, 1)), np.zeros(1))


@njit(cache=True)
def obs_dimension(nh, M):
    return 6 * nh + 2 * M + 2


@njit(cache=True)
def observe_kernel(m, ma, ref, n_base, nh, q, qd, act, t, out):
    """Observation vector; see :class:`exoembody.policy.ObservationSpec` for the layout."""
    qr = np.zeros(nh)
    qdr = np.zeros(nh)
    reference_kernel(ref.coef, ref.base, ref.period, t, qr, qdr, n_base)
    x_ref = qr[0] if n_base > 0 else 0.0
    M = act.shape[0]
    o = 0
    for d in range(nh):
        out[o + d] = q[d]
        out[o + nh + d] = VEL_SCALE * qd[d]
    if n_base > 0:
        out[o] = q[0] - x_ref
    o += 2 * nh
    ang, org, om, vel = body_kinematics(m, q, qd)
    pts = np.zeros((ma.body.shape[1], 2))
    for i in range(M):
        out[o + i] = act[i]
        L, _, _ = path_state(ma, ang, org, om, vel, i, pts)
        out[o + M + i] = (L - ma.params[i, 2]) / ma.params[i, 1] - 1.0
    o += 2 * M
    ph = 2.0 * math.pi * ((t % ref.period) / ref.period)
    out[o] = math.sin(ph)
    out[o + 1] = math.cos(ph)
    o += 2
    for k in range(2):
        tk = t + k * LOOKAHEAD
        reference_kernel(ref.coef, ref.base, ref.period, tk, qr, qdr, n_base)
        for d in range(nh):
            out[o + d] = qr[d]
            out[o + nh + d] = VEL_SCALE * qdr[d]
        if n_base > 0:
            out[o] = qr[0] - x_ref
        o += 2 * nh


@njit(cache=True)
def mlp_forward(net, obs, out):
    h1 = np.tanh(obs @ net.W1 + net.b1)
    h2 = np.tanh(h1 @ net.W2 + net.b2)
    z = h2 @ net.W3 + net.b3
    for i in range(out.shape[0]):
        out[i] = 1.0 / (1.0 + math.exp(-z[i]))


@njit(cache=True)
def reflex_kernel(m, ma, q, qd, q_ref, qd_ref, tau_ff, n_base, nh, kp, kd, fhat, out):
    """Sign-gated distribution of joint torque demands over the muscles.

    The demand is ``tau_ff + kp (q_ref - q) + kd (qd_ref - qd)`` per tracked joint.
    """
    n = q.shape[0]
    ang, org, om, vel = body_kinematics(m, q, qd)
    R = muscle_moment_arms(m, ma, ang, org, om, vel, n)
    tau = np.zeros(nh)
    for d in range(n_base, nh):
        tau[d] = tau_ff[d] + kp * (q_ref[d] - q[d]) + kd * (qd_ref[d] - qd[d])
    for i in range(R.shape[0]):
        norm2 = 0.0
        acc = 0.0
        for d in range(n_base, nh):
            r = R[i, d]
            norm2 += r * r
            prod = r * tau[d]
            if prod > 0.0:
                acc += prod
        if norm2 > 0.0:
            u = acc / (fhat * norm2 * ma.params[i, 0])
        else:
            u = 0.0
        out[i] = 0.0 if u < 0.0 else (1.0 if u > 1.0 else u)


@njit(cache=True)
def distribute_kernel(m, ma, q, qd, tau_des, n_base, nh, reg, out):
    """Excitations whose muscle torques best match ``tau_des`` (bounded least squares).

    Minimizes ||A u - b||^2 + reg * s ||u||^2 over u in [0, 1]^M, where
    A = R^T diag(f_max F_l F_v) maps excitations to joint torques at the
    current fiber state, b removes the passive muscle torques and s is the
    mean diagonal of A^T A. ``out`` holds the warm start.
    """
    n = q.shape[0]
    M = out.shape[0]
    ang, org, om, vel = body_kinematics(m, q, qd)
    R = muscle_moment_arms(m, ma, ang, org, om, vel, n)
    pts = np.zeros((ma.body.shape[1], 2))
    J = nh - n_base
    A = np.zeros((J, M))
    b = np.zeros(J)
    for j in range(J):
        b[j] = tau_des[n_base + j]
    for i in range(M):
        L, rate, _ = path_state(ma, ang, org, om, vel, i, pts)
        p = ma.params[i]
        l_m = L - p[2]
        active = _mtu_force_row(p, 1.0, l_m, rate)
        passive = _mtu_force_row(p, 0.0, l_m, rate)
        cap = active - passive
        for j in range(J):
            A[j, i] = R[i, n_base + j] * cap
            b[j] -= R[i, n_base + j] * passive
    H = A.T @ A
    c = A.T @ b
    s = 0.0
    for i in range(M):
        s += H[i, i]
    s = reg * s / M + 1e-12
    for i in range(M):
        H[i, i] += s
    for _ in range(60):
        delta = 0.0
        for i in range(M):
            g = c[i]
            for k in range(M):
                if k != i:
                    g -= H[i, k] * out[k]
            v = g / H[i, i]
            v = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
            delta = max(delta, abs(v - out[i]))
            out[i] = v
        if delta < 1e-6:
            break


@njit(cache=True)
def feedforward_kernel(mh, ref, n_base, t, out):
    """Joint torques that reproduce the reference motion (inverse dynamics)."""
    nh = out.shape[0]
    qr = np.zeros(nh)
    qdr = np.zeros(nh)
    qddr = np.zeros(nh)
    reference_kernel(ref.coef, ref.base, ref.period, t, qr, qdr, n_base)
    reference_accel_kernel(ref.coef, ref.base, ref.period, t, qddr, n_base)
    ang, org, om, vel = body_kinematics(mh, qr, qdr)
    tau = rnea(mh, ang, org, om, vel, qdr, qddr, nh)
    passive_forces(mh, qr, qdr, tau)
    for d in range(nh):
        out[d] = tau[d] if d >= n_base else 0.0


@njit(cache=True)
def reward_kernel(mh, ref, n_base, nh, q, q_ref, u, healthy, w_joint, w_pos, w_energy, w_healthy, out):
    """Weighted reward and its four components (written to out[1:5])."""
    rj = 0.0
    for d in range(n_base, nh):
        e = q[d] - q_ref[d]
        rj -= e * e
    rp = 0.0
    nk = ref.key_body.shape[0]
    if nk > 0:
        z = np.zeros(nh)
        ang, org, om, vel = body_kinematics(mh, q[:nh].copy(), z)
        angr, orgr, omr, velr = body_kinematics(mh, q_ref, z)
        for k in range(nk):
            b = ref.key_body[k]
            px, py, _, _ = local_to_world(ang, org, om, vel, b, ref.key_local[k, 0], ref.key_local[k, 1])
            rx, ry, _, _ = local_to_world(angr, orgr, omr, velr, b, ref.key_local[k, 0], ref.key_local[k, 1])
            # squared Euclidean distance per key body
            rp -= (px - rx) ** 2 + (py - ry) ** 2
    re = 0.0
    for i in range(u.shape[0]):
        re -= u[i] * u[i]
    rh = 1.0 if healthy else 0.0
    out[1] = rj
    out[2] = rp
    out[3] = re
    out[4] = rh
    out[0] = w_joint * rj + w_pos * rp + w_energy * re + w_healthy * rh
    return out[0]


@njit(cache=True)
def _tether(p, q, qd, q_ref, qd_ref, Q):
    Q[0] += p.tether_k * (q_ref[0] - q[0]) + p.tether_c * (qd_ref[0] - qd[0])
    Q[1] += p.tether_k * (q_ref[1] - q[1]) + p.tether_c * (qd_ref[1] - qd[1])
    Q[2] += p.tether_kr * (q_ref[2] - q[2]) + p.tether_cr * (qd_ref[2] - qd[2])


@njit(cache=True)
def run_loop(p, m, mh, ma, ca, aa, gains, ref, pert, net, q, qd, act, tr):
    """Run the coupled loop in place on (q, qd, act).

    Returns (control steps completed, status, return).
    """
    n = q.shape[0]
    nh = p.n_base + ref.coef.shape[0]
    M = act.shape[0]
    K = ca.k.shape[0]
    A = aa.exo_dof.shape[0]
    C = m.c_body.shape[0]
    D = obs_dimension(nh, M)
    dt_ctrl = p.dt * p.substeps
    u = np.zeros(M)
    obs = np.zeros(D)
    q_ref = np.zeros(nh)
    qd_ref = np.zeros(nh)
    q_ref1 = np.zeros(nh)
    qd_ref1 = np.zeros(nh)
    forces = np.zeros(M)
    lengths = np.zeros(M)
    cforce = np.zeros(K)
    cmag = np.zeros(K)
    dirs = np.zeros((K, 2))
    tau = np.zeros(A)
    eff = np.zeros(A)
    res = np.zeros(A)
    fw = np.zeros((C, 2))
    rew = np.zeros(5)
    tau_ff = np.zeros(nh)
    total = 0.0
    status = RUNNING
    steps = 0
    for k in range(p.n_ctrl):
        t = p.t0 + k * dt_ctrl
        t_rel = k * dt_ctrl
        reference_kernel(ref.coef, ref.base, ref.period, t, q_ref, qd_ref, p.n_base)
        if A > 0:
            exo_torque_kernel(aa, gains, q_ref, qd_ref, q, qd, tau, eff, res)
        # --- control decisions (held for the control interval)
        if p.controller == REFLEX:
            if p.reflex_feedforward:
                feedforward_kernel(mh, ref, p.n_base, t, tau_ff)
            reflex_kernel(m, ma, q, qd, q_ref, qd_ref, tau_ff, p.n_base, nh,
                          p.reflex_kp, p.reflex_kd, p.reflex_fhat, u)
        elif p.controller == TRACKING:
            feedforward_kernel(mh, ref, p.n_base, t + p.reflex_lead, tau_ff)
            for d in range(p.n_base, nh):
                tau_ff[d] += p.reflex_kp * (q_ref[d] - q[d]) + p.reflex_kd * (qd_ref[d] - qd[d])
            if p.assist_aware:
                # leave to the muscles what the exo motors do not already supply
                for a in range(A):
                    tau_ff[aa.hum_dof[a]] -= eff[a]
            distribute_kernel(m, ma, q, qd, tau_ff, p.n_base, nh, p.reflex_fhat, u)
        elif p.controller == MLP:
            observe_kernel(m, ma, ref, p.n_base, nh, q, qd, act, t, obs)
            mlp_forward(net, obs, u)
        else:
            for i in range(M):
                u[i] = 0.0
        # --- physics
        failed = False
        for s in range(p.substeps):
            ts = t + s * p.dt
            tr_s = t_rel + s * p.dt
            for i in range(M):
                act[i] = activation_update(act[i], u[i], p.tau_act, p.tau_deact, p.dt)
            if p.controller == PLAYBACK:
                continue
            reference_kernel(ref.coef, ref.base, ref.period, ts, q_ref1, qd_ref1, p.n_base)
            ang, org, om, vel = body_kinematics(m, q, qd)
            Q = np.zeros(n)
            muscle_forces_kernel(m, ma, ang, org, om, vel, act, Q, forces, lengths)
            if K > 0:
                connector_kernel(m, ca, ang, org, om, vel, dirs, Q, cforce)
            if A > 0:
                # the motor controller runs at the physics rate
                exo_torque_kernel(aa, gains, q_ref1, qd_ref1, q, qd, tau, eff, res)
                apply_exo_torques(aa, eff, Q)
            if C > 0:
                contact_kernel(m, ang, org, om, vel, Q, fw)
            limit_forces(m, q, Q)
            if p.base_mode == GUIDED and p.n_base > 0:
                _tether(p, q, qd, q_ref1, qd_ref1, Q)
            for e in range(pert.start.shape[0]):
                if pert.start[e] <= tr_s < pert.stop[e]:
                    b = pert.body[e]
                    px, py, _, _ = local_to_world(ang, org, om, vel, b, pert.lx[e], pert.ly[e])
                    add_point_force(m, org, b, px, py, pert.fx[e], pert.fy[e], Q)
            Mm = crba(m, ang, org, n)
            c = rnea(m, ang, org, om, vel, qd, np.zeros(n), n)
            passive_forces(m, q, qd, c)
            qdd, ok = cholesky_solve(Mm, Q - c)
            if not ok:
                failed = True
                break
            for d in range(n):
                qd[d] += p.dt * qdd[d]
                q[d] += p.dt * qd[d]
            for d in range(n):
                if not (math.isfinite(q[d]) and math.isfinite(qd[d])):
                    failed = True
            if failed:
                break
        t_end = t + dt_ctrl
        reference_kernel(ref.coef, ref.base, ref.period, t_end, q_ref, qd_ref, p.n_base)
        if p.controller == PLAYBACK:
            for d in range(nh):
                q[d] = q_ref[d]
                qd[d] = qd_ref[d]
            ang, org, om, vel = body_kinematics(m, q, qd)
            Q = np.zeros(n)
            muscle_forces_kernel(m, ma, ang, org, om, vel, act, Q, forces, lengths)
        if failed:
            status = DIVERGED
            total += p.diverge_penalty
            break
        healthy = True
        if p.base_mode == FREE_BASE and q[1] < p.healthy_height:
            healthy = False
        r = reward_kernel(mh, ref, p.n_base, nh, q, q_ref, u, healthy, p.w_joint,
                          p.w_position, p.w_energy, p.w_healthy, rew)
        if not math.isfinite(r):
            # a finite but runaway state: score it as divergence
            status = DIVERGED
            total += p.diverge_penalty
            break
        total += r
        if K > 0:
            connector_magnitudes(ca, aa, cforce, res, cmag)
        tr.time[k] = t_end
        for d in range(n):
            tr.q[k, d] = q[d]
            tr.qdot[k, d] = qd[d]
        for d in range(nh):
            tr.q_ref[k, d] = q_ref[d]
        for i in range(M):
            tr.muscle_force[k, i] = forces[i]
            tr.activation[k, i] = act[i]
            tr.excitation[k, i] = u[i]
        for i in range(K):
            tr.connector[k, i] = cmag[i]
        for a in range(A):
            tr.exo_torque[k, a] = tau[a]
        for j in range(5):
            tr.reward[k, j] = rew[j]
        for j in range(C):
            tr.contact[k, j, 0] = fw[j, 0]
            tr.contact[k, j, 1] = fw[j, 1]
        steps = k + 1
        if p.terminate:
            bad = not healthy
            for d in range(p.n_base, nh):
                if abs(q[d] - q_ref[d]) > p.term_threshold:
                    bad = True
            if bad:
                status = TERMINATED
                break
    if status == RUNNING:
        status = DONE
    return steps, status, total


# ---------------------------------------------------------------------------
# Python-side packaging
# ---------------------------------------------------------------------------

STATUS_NAMES = {DONE: "completed", TERMINATED: "terminated", DIVERGED: "diverged"}
BASE_MODES = {"fixed": FIXED, "pelvis-guided": GUIDED, "free": FREE_BASE}


def _empty_connectors() -> ConnectorArrays:
    z_i = np.zeros(0, dtype=np.int64)
    z_f = np.zeros(0)
    return ConnectorArrays(z_i, np.zeros((0, 2)), z_i.copy(), np.zeros((0, 2)), z_f, z_f.copy(),
                           z_f.copy(), z_i.copy())


def _empty_actuators() -> ActuatorArrays:
    z_i = np.zeros(0, dtype=np.int64)
    return ActuatorArrays(z_i, z_i.copy(), z_i.copy(), np.zeros(0), np.zeros(0), 0.0)


@dataclass(frozen=True)
class Plant:
    """A human scenario, optionally wearing an exo assembly, packed for the loop."""

    human: HumanScenario
    assembly: ExoAssembly | None = None

    def __post_init__(self):
        if self.assembly is not None and self.assembly.human_topology is not self.human.topology \
                and self.assembly.human_topology != self.human.topology:
            raise ValueError("exo assembly was built for a different human topology")

    @cached_property
    def topology(self):
        return self.human.topology if self.assembly is None else self.assembly.combined

    @property
    def n_human(self) -> int:
        return self.human.ndof

    @cached_property
    def arrays(self):
        return self.topology.arrays

    @cached_property
    def muscle_arrays(self):
        return pack_muscles(self.topology, self.human.muscles)

    @cached_property
    def connector_arrays(self) -> ConnectorArrays:
        return _empty_connectors() if self.assembly is None else self.assembly.connector_arrays

    @cached_property
    def actuator_arrays(self) -> ActuatorArrays:
        return _empty_actuators() if self.assembly is None else self.assembly.actuator_arrays

    def reference(self, motion: ReferenceMotion, key_bodies=None) -> Reference:
        check_compatible(motion, self.human)
        kb = self.human.key_bodies if key_bodies is None else key_bodies
        body = np.zeros(len(kb), dtype=np.int64)
        local = np.zeros((len(kb), 2))
        for i, (seg, pt) in enumerate(kb):
            body[i], local[i] = self.human.topology.resolve_point(seg, pt)
        return Reference(motion.coefficient_array, motion.base_params, float(motion.period), body, local)

    def full_state(self, q_human, qd_human):
        if self.assembly is None:
            return np.array(q_human, dtype=float), np.array(qd_human, dtype=float)
        return self.assembly.combined_state(q_human, qd_human)


def no_perturbations() -> Perturbations:
    z = np.zeros(0)
    return Perturbations(z, z.copy(), np.zeros(0, dtype=np.int64), z.copy(), z.copy(), z.copy(), z.copy())


def make_perturbations(events, topology) -> Perturbations:
    """Pack ``(start, duration, segment, fx, fy)`` events applied at segment COMs."""
    if not events:
        return no_perturbations()
    start, stop, body, lx, ly, fx, fy = ([] for _ in range(7))
    for t0, dur, seg, f_x, f_y in events:
        b = topology.segment_index(seg)
        com = topology.segments[b].com_offset
        start.append(t0)
        stop.append(t0 + dur)
        body.append(b)
        lx.append(com[0])
        ly.append(com[1])
        fx.append(f_x)
        fy.append(f_y)
    f = lambda v: np.array(v, dtype=float)  # noqa: E731
    return Perturbations(f(start), f(stop), np.array(body, dtype=np.int64), f(lx), f(ly), f(fx), f(fy))


@dataclass
class LoopOutput:
    steps: int
    status: int
    total_return: float
    traces: Traces
    q: np.ndarray
    qdot: np.ndarray
    activation: np.ndarray

    @property
    def reason(self) -> str:
        return STATUS_NAMES[self.status]

    def trimmed(self) -> Traces:
        return Traces(*(a[: self.steps] for a in self.traces))


def run(
    plant: Plant,
    motion: ReferenceMotion,
    params: LoopParams,
    q0,
    qd0,
    act0=None,
    gains: ExoGains | None = None,
    perturbations: Perturbations | None = None,
    network: Network | None = None,
    key_bodies=None,
) -> LoopOutput:
    """Run the compiled loop from the given combined state."""
    topo = plant.topology
    n = topo.ndof
    M = len(plant.human.muscles)
    q = np.array(q0, dtype=float)
    qd = np.array(qd0, dtype=float)
    if q.shape != (n,) or qd.shape != (n,):
        raise ValueError(f"initial state must have {n} coordinates")
    act = np.zeros(M) if act0 is None else np.array(act0, dtype=float)
    g = (gains or ExoGains()).matrix()
    net = network if network is not None else empty_network(0, M)
    pert = perturbations if perturbations is not None else no_perturbations()
    tr = empty_traces(params.n_ctrl, n, plant.n_human, M, len(plant.connector_arrays.k),
                      len(plant.actuator_arrays.exo_dof), len(topo.contact_points))
    steps, status, total = run_loop(
        params, plant.arrays, plant.human.topology.arrays, plant.muscle_arrays,
        plant.connector_arrays, plant.actuator_arrays, g, plant.reference(motion, key_bodies),
        pert, net, q, qd, act, tr,
    )
    return LoopOutput(int(steps), int(status), float(total), tr, q, qd, act)
