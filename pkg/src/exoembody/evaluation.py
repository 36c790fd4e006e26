"""Frozen-evaluator rollouts, design cost, alignment metrics and design optimization."""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import cmaes
from .errors import InvalidArgumentError, OptimizationAbortedError
from .exo import (
    GAIN_FIELDS,
    STRUCTURE_FIELDS,
    ExoAssembly,
    ExoConfig,
    ExoGains,
    ExoStructure,
    build_exo,
)
from .human import HumanScenario, ReferenceMotion, reference_state
from .policy import (
    EpisodeConfig,
    PerturbationConfig,
    RewardConfig,
    TrackingPolicy,
    _Controller,
    check_layout,
    derive_seed,
    loop_params,
)
from .simulation import DIVERGED, Plant, Traces, make_perturbations, run

log = logging.getLogger(__name__)

DESIGN_FIELDS = GAIN_FIELDS + STRUCTURE_FIELDS
MODES = ("co-opt", "control-only", "structure-only")

# Starting design: hand-fitted modules sitting slightly off the joints, mild assistance.
NOMINAL_STRUCTURE = ExoStructure(
    hip_translation_x=0.02, hip_translation_y=-0.015, ankle_rotation=0.12,
    ankle_translation=0.025, arm_rotation=0.1, arm_translation=-0.02,
)
NOMINAL_GAINS = ExoGains(*([20.0, 20.0, 2.0, 2.0] * 3))


@dataclass(frozen=True)
class EvaluationConfig:
    cycles: int = 3                 # rollout length in gait cycles; the first is discarded
    init_noise_q: float = 0.01      # rad, seeded, tracked joints only
    init_noise_qdot: float = 0.02
    start_time: float = 0.0
    divergence_cost: float = 1e6
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(
        perturbation=PerturbationConfig(rate=0.0), terminate_early=False))
    rewards: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.cycles < 2:
            raise InvalidArgumentError("rollouts need at least 2 gait cycles")


@dataclass(frozen=True)
class CostWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    n1: float = 1.0
    n2: float = 1.0
    n3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise InvalidArgumentError("cost weights must be >= 0")
        if not min(self.n1, self.n2, self.n3) > 0:
            raise InvalidArgumentError("cost normalizers must be > 0")


@dataclass
class RolloutResult:
    time: np.ndarray            # (S,) s since rollout start
    q: np.ndarray               # (S, J) tracked joint angles
    q_ref: np.ndarray
    muscle_force: np.ndarray    # (S, M) N
    connector_force: np.ndarray  # (S, K) |f| N
    exo_torque: np.ndarray      # (S, A) N m, commanded
    q_full: np.ndarray          # (S, n) combined coordinates, for geometry post-processing
    dt: float
    period: float
    cycles: int
    diverged: bool
    joint_names: tuple[str, ...]
    c_kinematic: float = math.nan
    c_effort: float = math.nan
    c_interaction: float = math.nan
    total: float = math.nan

    @property
    def duration(self) -> float:
        return float(self.time[-1]) if len(self.time) else 0.0

    def cost_window(self) -> np.ndarray:
        """Boolean mask of samples inside the scored cycles (first cycle discarded)."""
        return (self.time > self.period + 1e-9) & (self.time <= self.cycles * self.period + 1e-9)


def cost_components(result: RolloutResult) -> tuple[float, float, float]:
    w = result.cost_window()
    e = result.q[w] - result.q_ref[w]
    c_kin = float(np.mean(e ** 2)) if e.size else 0.0
    c_eff = float(np.sum(result.muscle_force[w] ** 2) * result.dt)
    c_int = float(np.max(result.connector_force[w])) if result.connector_force[w].size else 0.0
    return c_kin, c_eff, c_int


def cost(result: RolloutResult, weights: CostWeights = CostWeights(),
         divergence_cost: float = 1e6) -> tuple[float, dict]:
    """Weighted, normalized sum of tracking error, squared muscle force and peak strap force."""
    if result.diverged:
        return float(divergence_cost), {"c_kin": math.nan, "c_eff": math.nan, "c_int": math.nan}
    c_kin, c_eff, c_int = cost_components(result)
    total = weights.w1 * c_kin / weights.n1 + weights.w2 * c_eff / weights.n2 \
        + weights.w3 * c_int / weights.n3
    return float(total), {"c_kin": c_kin, "c_eff": c_eff, "c_int": c_int}


def rollout(human: HumanScenario, assembly: ExoAssembly | None, gains: ExoGains | None,
            controller: _Controller, motion: ReferenceMotion, duration: float | None = None,
            seed: int = 0, weights: CostWeights = CostWeights(),
            config: EvaluationConfig = EvaluationConfig(), perturbations=None) -> RolloutResult:
    """Run the coupled system and score it.

    ``duration`` defaults to ``config.cycles`` gait cycles; costs cover the
    whole cycles after the first.
    """
    check_layout(controller, human)
    plant = Plant(human, assembly)
    ep = config.episode
    duration = config.cycles * motion.period if duration is None else float(duration)
    cycles = int(math.floor(duration / motion.period + 1e-9))
    if cycles < 2:
        raise InvalidArgumentError("duration must cover at least 2 gait cycles")
    rng = np.random.default_rng(seed)
    t0 = config.start_time
    q, qd, _ = reference_state(motion, t0, human)
    dofs = human.tracked_dofs
    q[dofs] += config.init_noise_q * rng.standard_normal(len(dofs))
    qd[dofs] += config.init_noise_qdot * rng.standard_normal(len(dofs))
    q, qd = plant.full_state(q, qd)
    n_ctrl = ep.n_control_steps(duration)
    params = loop_params(plant, controller, ep, config.rewards, n_ctrl, t0, False)
    pert = make_perturbations(perturbations, plant.topology) if isinstance(perturbations, list) \
        else perturbations
    out = run(plant, motion, params, q, qd, gains=gains, perturbations=pert,
              network=controller.network(), key_bodies=config.rewards.key_bodies)
    tr: Traces = out.trimmed()
    result = RolloutResult(
        time=tr.time - t0, q=tr.q[:, dofs], q_ref=tr.q_ref[:, dofs], muscle_force=tr.muscle_force,
        connector_force=tr.connector, exo_torque=tr.exo_torque, q_full=tr.q,
        dt=ep.control_dt, period=motion.period, cycles=cycles, diverged=out.status == DIVERGED,
        joint_names=tuple(human.coordinate_names[human.n_base:]),
    )
    if not result.diverged and out.steps < n_ctrl:
        result.diverged = True
    c, parts = cost(result, weights, config.divergence_cost)
    result.total = c
    result.c_kinematic, result.c_effort, result.c_interaction = parts["c_kin"], parts["c_eff"], parts["c_int"]
    return result


def baseline_normalize(human: HumanScenario, controller: _Controller, motion: ReferenceMotion,
                       seed: int = 0, config: EvaluationConfig = EvaluationConfig(),
                       exo_config: ExoConfig | None = None,
                       w: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> CostWeights:
    """Normalizers from the unassisted run (tracking, effort) and the nominal unpowered exo (straps)."""
    bare = rollout(human, None, None, controller, motion, seed=seed, config=config)
    worn = rollout(human, build_exo(NOMINAL_STRUCTURE, exo_config, human), ExoGains(), controller,
                   motion, seed=seed, config=config)
    if bare.diverged or worn.diverged:
        raise InvalidArgumentError("baseline rollout diverged; the scenario is unusable")
    n1, n2, _ = cost_components(bare)
    _, _, n3 = cost_components(worn)
    if not min(n1, n2, n3) > 0:
        raise InvalidArgumentError("baseline produced a zero cost component")
    return CostWeights(*w, n1, n2, n3)


# ---------------------------------------------------------------------------
# axis alignment
# ---------------------------------------------------------------------------

def line_distance(p_a, a_hat, p_b, b_hat, parallel_tol: float = 1e-9) -> float:
    """Shortest distance between two 3-D lines given by point and unit direction."""
    p_a, a_hat, p_b, b_hat = (np.asarray(v, dtype=float) for v in (p_a, a_hat, p_b, b_hat))
    dp = p_b - p_a
    n = np.cross(a_hat, b_hat)
    nn = float(np.linalg.norm(n))
    if nn < parallel_tol:
        return float(np.linalg.norm(dp - (dp @ a_hat) * a_hat))
    return float(abs(dp @ n) / nn)


def line_angle(a_hat, b_hat) -> float:
    c = abs(float(np.dot(a_hat, b_hat)))
    return float(math.acos(min(1.0, c)))


def exo_axis(tilt: float, limb_dir) -> np.ndarray:
    """Plane normal rotated by ``tilt`` about the in-plane limb direction."""
    u = np.array([limb_dir[0], limb_dir[1], 0.0])
    u /= np.linalg.norm(u)
    z = np.array([0.0, 0.0, 1.0])
    return math.cos(tilt) * z + math.sin(tilt) * np.cross(u, z)


@dataclass
class AlignmentSeries:
    joints: tuple[str, ...]
    time: np.ndarray
    distance: np.ndarray   # (S, A) m
    angle: np.ndarray      # (S, A) rad

    def mean_by_kind(self) -> dict:
        """Mean distance and angle per joint kind (both sides pooled)."""
        out = {}
        for kind in ("hip", "ankle", "elbow"):
            cols = [i for i, j in enumerate(self.joints) if j.rsplit("_", 1)[0] == kind]
            if cols:
                out[kind] = (float(self.distance[:, cols].mean()), float(self.angle[:, cols].mean()))
        return out


def axis_alignment(assembly: ExoAssembly, q_trace, time=None, pairs: Sequence[str] | None = None) -> AlignmentSeries:
    """Human/exo joint-axis distance and angle per actuated joint and sample."""
    q_trace = np.atleast_2d(np.asarray(q_trace, dtype=float))
    names = [a.name for a in assembly.actuated]
    sel = list(range(len(names))) if pairs is None else [names.index(p) for p in pairs]
    S = q_trace.shape[0]
    dist = np.zeros((S, len(sel)))
    ang = np.zeros((S, len(sel)))
    z = np.array([0.0, 0.0, 1.0])
    for s in range(S):
        centers = assembly.joint_centers(q_trace[s])
        limbs = assembly.limb_axes(q_trace[s])
        for c, i in enumerate(sel):
            a_e = exo_axis(assembly.actuated[i].axis_tilt, limbs[i])
            p_h = np.r_[centers[i, 0], 0.0]
            p_e = np.r_[centers[i, 1], 0.0]
            dist[s, c] = line_distance(p_h, z, p_e, a_e)
            ang[s, c] = line_angle(z, a_e)
    t = np.arange(S, dtype=float) if time is None else np.asarray(time, dtype=float)
    return AlignmentSeries(tuple(names[i] for i in sel), t, dist, ang)


def rollout_alignment(assembly: ExoAssembly, result: RolloutResult, scored_only: bool = True) -> AlignmentSeries:
    w = result.cost_window() if scored_only else np.ones(len(result.time), dtype=bool)
    return axis_alignment(assembly, result.q_full[w], result.time[w])


# ---------------------------------------------------------------------------
# perturbation recovery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryRow:
    force: float
    mean: float
    std: float
    n_recovered: int
    times: tuple[float, ...]


def recovery_time(time, error, release: float, threshold: float = 0.05, hold: float = 0.2) -> float:
    """First time after ``release`` from which max-joint error stays below ``threshold`` for ``hold`` s."""
    time = np.asarray(time)
    ok = np.asarray(error) < threshold
    idx = np.flatnonzero(time >= release - 1e-9)
    dt = time[1] - time[0] if len(time) > 1 else 0.0
    need = int(round(hold / dt)) if dt > 0 else 1
    for k in idx:
        if k + need > len(time):
            break
        if ok[k:k + need].all():
            return float(time[k] - release) if time[k] > release + 1e-9 else 0.0
    return math.inf


def perturb_sweep(human: HumanScenario, controller: _Controller, motion: ReferenceMotion,
                  forces: Sequence[float], seeds: int = 10, segment: str = "pelvis",
                  push_time: float = 1.0, push_duration: float = 0.2, settle: float = 2.0,
                  threshold: float = 0.05, hold: float = 0.2,
                  config: EvaluationConfig = EvaluationConfig(), base_seed: int = 0) -> list[RecoveryRow]:
    """Horizontal pushes at a fixed gait phase; recovery time per force over seeded trials.

    Each trial starts at the same phase with seeded initial noise, is pushed
    ``push_time`` s later for ``push_duration`` s and runs ``settle`` s past
    release.
    """
    if seeds < 1:
        raise InvalidArgumentError("seeds must be >= 1")
    rows = []
    duration = push_time + push_duration + settle
    release = push_time + push_duration
    for f in forces:
        times = []
        for k in range(seeds):
            s = derive_seed(base_seed, k)
            events = [(push_time, push_duration, segment, float(f), 0.0)] if f != 0 else []
            r = _pushed_rollout(human, controller, motion, duration, s, events, config)
            if r is None:
                times.append(math.inf)
                continue
            t, err = r
            times.append(recovery_time(t, err, release, threshold, hold))
        arr = np.array(times)
        fin = arr[np.isfinite(arr)]
        rows.append(RecoveryRow(float(f), float(fin.mean()) if len(fin) == len(arr) else math.inf,
                                float(fin.std()) if len(fin) == len(arr) else math.inf,
                                int(len(fin)), tuple(map(float, arr))))
    return rows


def _pushed_rollout(human, controller, motion, duration, seed, events, config):
    check_layout(controller, human)
    plant = Plant(human)
    ep = config.episode
    rng = np.random.default_rng(seed)
    t0 = config.start_time
    q, qd, _ = reference_state(motion, t0, human)
    dofs = human.tracked_dofs
    q[dofs] += config.init_noise_q * rng.standard_normal(len(dofs))
    qd[dofs] += config.init_noise_qdot * rng.standard_normal(len(dofs))
    n_ctrl = ep.n_control_steps(duration)
    params = loop_params(plant, controller, ep, config.rewards, n_ctrl, t0, False)
    out = run(plant, motion, params, q, qd, perturbations=make_perturbations(events, plant.topology),
              network=controller.network())
    if out.status == DIVERGED or out.steps < n_ctrl:
        return None
    tr = out.trimmed()
    err = np.abs(tr.q[:, dofs] - tr.q_ref[:, dofs]).max(axis=1)
    return tr.time - t0, err


def parse_force_range(text: str) -> list[float]:
    """``"lo:hi:step"`` inclusive grid, e.g. ``"-200:200:50"``."""
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise InvalidArgumentError(f"malformed force range {text!r}; expected lo:hi:step") from None
    if not step > 0 or hi < lo or not all(map(math.isfinite, (lo, hi, step))):
        raise InvalidArgumentError(f"malformed force range {text!r}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + k * step for k in range(n)]


# ---------------------------------------------------------------------------
# design vector and optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignSpace:
    """The 21-entry design vector: 12 gains then 9 structural parameters."""

    config: ExoConfig = field(default_factory=ExoConfig)
    nominal_gains: ExoGains = NOMINAL_GAINS
    nominal_structure: ExoStructure = NOMINAL_STRUCTURE

    names = DESIGN_FIELDS

    @property
    def lower(self) -> np.ndarray:
        b = {**self.config.gain_bounds, **self.config.structure_bounds}
        return np.array([b[n][0] for n in self.names], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        b = {**self.config.gain_bounds, **self.config.structure_bounds}
        return np.array([b[n][1] for n in self.names], dtype=float)

    @property
    def nominal(self) -> np.ndarray:
        return np.r_[self.nominal_gains.as_vector(), self.nominal_structure.as_vector()]

    @staticmethod
    def mask(mode: str) -> np.ndarray:
        if mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        m = np.zeros(len(DESIGN_FIELDS), dtype=bool)
        if mode in ("co-opt", "control-only"):
            m[:12] = True
        if mode in ("co-opt", "structure-only"):
            m[12:] = True
        return m

    @staticmethod
    def split(x) -> tuple[ExoGains, ExoStructure]:
        x = np.asarray(x, dtype=float)
        if x.shape != (21,):
            raise InvalidArgumentError("design vector must have 21 entries")
        return ExoGains.from_vector(x[:12]), ExoStructure.from_vector(x[12:])

    def validate(self, x) -> None:
        gains, structure = self.split(x)
        gains.validate(self.config.gain_bounds)
        build_exo(structure, self.config)  # raises on structural bound violations


@dataclass
class OptimizationResult:
    mode: str
    best_x: np.ndarray
    best_cost: float
    history: list = field(default_factory=list)   # (eval, gen, cand, cost, c_kin, c_eff, c_int, best)
    lam: int = 0
    policy_fingerprint: str = ""

    @property
    def best_so_far(self) -> np.ndarray:
        return np.array([h[7] for h in self.history])

    @property
    def design(self) -> tuple[ExoGains, ExoStructure]:
        return DesignSpace.split(self.best_x)


def _evaluate_design(args):
    human, controller, motion, x, seed, weights, config, exo_config = args
    gains, structure = DesignSpace.split(x)
    asm = build_exo(structure, exo_config, human)
    r = rollout(human, asm, gains, controller, motion, seed=seed, weights=weights, config=config)
    return r.total, r.c_kinematic, r.c_effort, r.c_interaction, r.diverged


def optimize_design(human: HumanScenario, controller: _Controller, motion: ReferenceMotion,
                    mode: str = "co-opt", budget: int = 300, seed: int = 0,
                    weights: CostWeights = CostWeights(), space: DesignSpace | None = None,
                    config: EvaluationConfig = EvaluationConfig(), sigma0: float = 0.15,
                    workers: int = 1, progress=None) -> OptimizationResult:
    """CMA-ES over the free coordinates of ``mode`` with the policy held frozen.

    Fixed coordinates keep their nominal values. Evaluations beyond the last
    whole generation are scored but not fed back to the optimizer.
    """
    space = space or DesignSpace()
    mask = space.mask(mode)
    nominal = space.nominal
    lo, hi = space.lower, space.upper
    if budget < 1:
        raise InvalidArgumentError("budget must be >= 1")
    check_layout(controller, human)
    fingerprint = controller.fingerprint()
    state = cmaes.init(nominal[mask], sigma0, cmaes.Bounds(lo[mask], hi[mask]), seed=seed)
    lam = state.params.lam
    result = OptimizationResult(mode, nominal.copy(), math.inf, lam=lam, policy_fingerprint=fingerprint)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    evals, gen = 0, 0
    try:
        while evals < budget:
            cands = state.ask()
            take = min(lam, budget - evals)
            xs = []
            for c in cands[:take]:
                x = nominal.copy()
                x[mask] = c
                xs.append(x)
            jobs = [(human, controller, motion, x, derive_seed(seed, gen, i), weights, config,
                     space.config) for i, x in enumerate(xs)]
            outs = list(pool.map(_evaluate_design, jobs)) if pool else [_evaluate_design(j) for j in jobs]
            diverged = sum(o[4] for o in outs)
            if diverged > 0.5 * len(outs):
                raise OptimizationAbortedError(
                    f"{mode}: {diverged}/{len(outs)} candidates diverged in generation {gen}; "
                    f"mean design {state.mean_x.round(4).tolist()}")
            for i, (x, o) in enumerate(zip(xs, outs)):
                evals += 1
                if o[0] < result.best_cost:
                    result.best_cost, result.best_x = float(o[0]), x.copy()
                result.history.append((evals, gen, i, float(o[0]), o[1], o[2], o[3], result.best_cost))
            if take == lam:
                state.tell([o[0] for o in outs])
            if progress is not None:
                progress(gen, result)
            gen += 1
    finally:
        if pool is not None:
            pool.shutdown()
    if controller.fingerprint() != fingerprint:
        raise RuntimeError("the evaluator policy changed during optimization")
    return result


def design_digest(x) -> str:
    return hashlib.sha256(np.asarray(x, dtype=float).tobytes()).hexdigest()


def default_evaluator() -> TrackingPolicy:
    return TrackingPolicy()


def with_cycles(config: EvaluationConfig, cycles: int) -> EvaluationConfig:
    return replace(config, cycles=int(cycles))
