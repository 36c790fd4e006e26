"""Scenario configuration: a strict JSON schema and the objects it builds.

Physical quantities carry their SI unit as a name suffix (``_s``, ``_m``,
``_kg``, ``_n``, ``_rad`` ...). Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidArgumentError, NotFoundError
from .evaluation import (
    NOMINAL_GAINS,
    NOMINAL_STRUCTURE,
    CostWeights,
    DesignSpace,
    EvaluationConfig,
)
from .exo import DEFAULT_GAIN_BOUNDS, DEFAULT_STRUCTURE_BOUNDS, GAIN_FIELDS, STRUCTURE_FIELDS, ExoConfig, ExoGains, ExoStructure
from .human import (
    DEFAULT_GAIT,
    MUSCLE_TABLE,
    HumanScenario,
    ReferenceMotion,
    TrajectorySet,
    build_default_walker,
    build_pendulum_scenario,
    import_reference_csv,
    make_trajectory_variants,
    pendulum_motion,
    synthetic_gait,
)
from .policy import (
    EpisodeConfig,
    ESConfig,
    PerturbationConfig,
    ReflexPolicy,
    RewardConfig,
    TrackingPolicy,
)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Interval = tuple[float, float]
Harmonics = tuple[float, float, float, float, float]


class Anthropometry(_Section):
    mass_kg: float = Field(70.0, gt=0, description="body mass (walker) or rod mass (pendulum), kg")
    stature_m: float = Field(1.75, gt=0, description="standing height, m (walker only)")
    length_m: float = Field(0.5, gt=0, description="rod length, m (pendulum only)")
    pendulum_f_max_n: float = Field(400.0, gt=0, description="pendulum muscle peak force, N")


class MuscleOverride(_Section):
    f_max_n: float | None = Field(None, gt=0, description="peak isometric force, N")
    l_opt_m: float | None = Field(None, gt=0, description="optimal fiber length, m")
    v_max: float | None = Field(None, gt=0, description="max shortening speed, optimal lengths per s")


class Reference(_Section):
    period_s: float = Field(1.1, gt=0, description="gait cycle duration, s")
    coefficients_rad: dict[str, Harmonics] = Field(
        default_factory=dict,
        description="per joint kind (a0, a1, phi1, a2, phi2), rad; left side, right is phase-shifted")
    vertical_amplitude_m: float = Field(0.015, ge=0, description="pelvis bob amplitude, m")
    clearance_m: float = Field(0.02, ge=0, description="lowest foot point above ground, m")
    csv_path: str | None = Field(None, description="joint-angle CSV to fit instead of coefficients")
    pendulum_amplitude_rad: float = Field(0.4, ge=0, description="pendulum swing amplitude, rad")
    variants: int = Field(10, ge=1, description="trajectory variants for policy training")
    jitter_fraction: float = Field(0.05, ge=0, lt=1, description="relative amplitude/period jitter")


class Exo(_Section):
    connector_stiffness_n_per_m: float = Field(2000.0, gt=0)
    connector_damping_n_s_per_m: float = Field(50.0, ge=0)
    tau_max_nm: float = Field(80.0, gt=0, description="actuator torque limit, N m")
    hip_axis_tilt_rad: float = Field(0.0, description="fixed out-of-plane tilt of the hip module axis")
    bounds: dict[str, Interval] = Field(
        default_factory=dict,
        description="per-parameter overrides; m for translations, rad for rotations, "
                    "N m/rad for kp*, N m s/rad for kd*")
    nominal_structure: dict[str, float] = Field(default_factory=dict)
    nominal_gains: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_names(self):
        for label, names, d in (("bounds", STRUCTURE_FIELDS + GAIN_FIELDS, self.bounds),
                                ("nominal_structure", STRUCTURE_FIELDS, self.nominal_structure),
                                ("nominal_gains", GAIN_FIELDS, self.nominal_gains)):
            unknown = sorted(set(d) - set(names))
            if unknown:
                raise ValueError(f"{label}: unknown parameter(s) {unknown}")
        for name, (lo, hi) in self.bounds.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds.{name}: need finite lower < upper, got [{lo}, {hi}]")
        return self


class Reward(_Section):
    w_joint: float = Field(5.0, ge=0)
    w_position: float = Field(2.0, ge=0)
    w_energy: float = Field(0.1, ge=0)
    w_healthy: float = Field(1.0, ge=0)
    termination_threshold_rad: float = Field(0.5, gt=0)
    healthy_height_m: float = Field(0.6, ge=0)


class Perturbation(_Section):
    rate_hz: float = Field(0.5, ge=0, le=1, description="push events per second")
    force_range_n: Interval = Field((50.0, 200.0), description="push magnitude range, N")
    duration_s: float = Field(0.2, gt=0)
    segments: tuple[str, ...] = ("pelvis", "torso")


class Episode(_Section):
    max_duration_s: float = Field(5.0, gt=0)
    init_noise_q_rad: float = Field(0.02, ge=0)
    init_noise_qdot_rad_s: float = Field(0.05, ge=0)
    base_mode: Literal["fixed", "pelvis-guided", "free"] = "pelvis-guided"
    guide_stiffness_n_per_m: float = Field(5e4, ge=0)
    guide_damping_n_s_per_m: float = Field(1e3, ge=0)
    guide_rot_stiffness_nm_per_rad: float = Field(500.0, ge=0)
    guide_rot_damping_nm_s_per_rad: float = Field(50.0, ge=0)
    terminate_early: bool = True
    perturbation: Perturbation = Field(default_factory=Perturbation)


class Integrator(_Section):
    timestep_s: float = Field(1e-3, gt=0, le=0.01, description="physics step, s")
    substeps: int = Field(10, ge=1, description="physics steps per control step")


class Evaluation(_Section):
    cycles: int = Field(3, ge=2, description="gait cycles per rollout; the first is not scored")
    init_noise_q_rad: float = Field(0.01, ge=0)
    init_noise_qdot_rad_s: float = Field(0.02, ge=0)
    divergence_cost: float = Field(1e6, gt=0)


class Cost(_Section):
    weights: tuple[float, float, float] = Field(
        (1.0, 1.0, 1.0), description="tracking, muscle effort, strap force")
    auto_normalize: bool = Field(True, description="derive normalizers from baseline rollouts")
    normalizers: tuple[float, float, float] | None = Field(
        None, description="rad^2, N^2 s, N; required when auto_normalize is false")

    @model_validator(mode="after")
    def _normalizers(self):
        if min(self.weights) < 0:
            raise ValueError("weights must be >= 0")
        if not self.auto_normalize:
            if self.normalizers is None:
                raise ValueError("normalizers are required when auto_normalize is false")
            if not min(self.normalizers) > 0:
                raise ValueError("normalizers must be > 0")
        return self


class TrackingEvaluator(_Section):
    kp: float = 100.0
    kd: float = 10.0
    regularization: float = Field(0.03, ge=0)
    lead_s: float = Field(0.02, ge=0)
    assist_aware: bool = True


class ReflexEvaluator(_Section):
    kp: float = 60.0
    kd: float = 6.0
    fhat: float = Field(0.4, gt=0)
    feedforward: bool = False


class Evaluator(_Section):
    kind: Literal["tracking", "reflex"] = "tracking"
    tracking: TrackingEvaluator = Field(default_factory=TrackingEvaluator)
    reflex: ReflexEvaluator = Field(default_factory=ReflexEvaluator)


class Training(_Section):
    population: int = Field(16, ge=2)
    sigma: float = Field(0.05, gt=0)
    step_size: float = Field(0.03, gt=0)
    iterations: int = Field(50, ge=0)
    episodes: int = Field(3, ge=1)
    hidden: tuple[int, ...] = (64, 64)
    output_bias: float = -3.0

    @model_validator(mode="after")
    def _even(self):
        if self.population % 2:
            raise ValueError("population must be even")
        return self


class Optimization(_Section):
    mode: Literal["co-opt", "control-only", "structure-only"] = "co-opt"
    budget: int = Field(300, ge=1)
    sigma0: float = Field(0.15, gt=0, le=1, description="initial step as a fraction of bound widths")


class Sweep(_Section):
    forces: str = Field("-200:200:50", description="lo:hi:step grid of push forces, N")
    seeds: int = Field(10, ge=1)
    segment: str = "pelvis"
    push_time_s: float = Field(1.0, ge=0)
    push_duration_s: float = Field(0.2, gt=0)
    settle_s: float = Field(2.0, gt=0)
    threshold_rad: float = Field(0.05, gt=0)
    hold_s: float = Field(0.2, gt=0)


class ScenarioConfig(_Section):
    model: Literal["walker", "pendulum"] = "walker"
    anthropometry: Anthropometry
    muscles: dict[str, MuscleOverride] = Field(default_factory=dict)
    reference: Reference
    exo: Exo = Field(default_factory=Exo)
    reward: Reward
    episode: Episode
    integrator: Integrator = Field(default_factory=Integrator)
    evaluation: Evaluation = Field(default_factory=Evaluation)
    cost: Cost = Field(default_factory=Cost)
    evaluator: Evaluator = Field(default_factory=Evaluator)
    training: Training = Field(default_factory=Training)
    optimization: Optimization = Field(default_factory=Optimization)
    sweep: Sweep = Field(default_factory=Sweep)
    seed: int = Field(0, ge=0)
    workers: int | None = Field(None, ge=1, description="worker processes; null uses all CPUs")

    @model_validator(mode="after")
    def _muscle_names(self):
        unknown = sorted(set(self.muscles) - set(MUSCLE_TABLE))
        if unknown and self.model == "walker":
            raise ValueError(f"muscles: unknown muscle kind(s) {unknown}")
        unknown = sorted(set(self.reference.coefficients_rad) - set(DEFAULT_GAIT))
        if unknown:
            raise ValueError(f"reference.coefficients_rad: unknown joint kind(s) {unknown}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Platform-independent hash of the fully defaulted configuration."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class ConfigError(InvalidArgumentError):
    """Schema violation; ``fields`` lists the offending dotted paths."""

    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


def _dotted(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data: dict, source: str = "<config>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        errs = exc.errors()
        fields = tuple(_dotted(e["loc"]) for e in errs)
        lines = [f"{_dotted(e['loc'])}: {e['msg']}" for e in errs]
        raise ConfigError(f"{source}: invalid configuration\n  " + "\n  ".join(lines), fields) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise NotFoundError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})", ("<root>",)) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object", ("<root>",))
    cfg = parse_config(data, str(path))
    csv_path = cfg.reference.csv_path
    if csv_path is not None and not Path(csv_path).is_absolute():
        # relative CSV paths are resolved against the config file
        ref = cfg.reference.model_copy(update={"csv_path": str((path.parent / csv_path).resolve())})
        cfg = cfg.model_copy(update={"reference": ref})
    return cfg


def config_schema() -> dict:
    return ScenarioConfig.model_json_schema()


# ---------------------------------------------------------------------------
# building runtime objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    human: HumanScenario
    motion: ReferenceMotion
    exo_config: ExoConfig | None
    space: DesignSpace | None
    rewards: RewardConfig
    episode: EpisodeConfig
    evaluation: EvaluationConfig
    es: ESConfig

    @property
    def has_exo(self) -> bool:
        return self.space is not None

    def trajectories(self, seed: int | None = None) -> TrajectorySet:
        r = self.config.reference
        s = self.config.seed if seed is None else seed
        return make_trajectory_variants(self.motion, r.variants, r.jitter_fraction, s, self.human)

    def evaluator(self):
        ev = self.config.evaluator
        if ev.kind == "reflex":
            r = ev.reflex
            return ReflexPolicy(r.kp, r.kd, r.fhat, r.feedforward)
        t = ev.tracking
        return TrackingPolicy(t.kp, t.kd, t.regularization, t.lead_s, t.assist_aware)

    def fixed_weights(self) -> CostWeights | None:
        c = self.config.cost
        if c.auto_normalize:
            return None
        return CostWeights(*c.weights, *c.normalizers)


def _build_human(cfg: ScenarioConfig) -> HumanScenario:
    a = cfg.anthropometry
    if cfg.model == "pendulum":
        return build_pendulum_scenario(a.mass_kg, a.length_m, a.pendulum_f_max_n)
    overrides = {}
    for kind, o in cfg.muscles.items():
        d = {"f_max": o.f_max_n, "l_opt": o.l_opt_m, "v_max": o.v_max}
        overrides[kind] = {k: v for k, v in d.items() if v is not None}
    return build_default_walker(a.mass_kg, a.stature_m, muscle_overrides=overrides)


def _build_motion(cfg: ScenarioConfig, human: HumanScenario) -> ReferenceMotion:
    r = cfg.reference
    if cfg.model == "pendulum":
        return pendulum_motion(r.period_s, r.pendulum_amplitude_rad)
    base = synthetic_gait(human, r.period_s, dict(r.coefficients_rad) or None,
                          r.vertical_amplitude_m, r.clearance_m)
    if r.csv_path is None:
        return base
    motion, _ = import_reference_csv(r.csv_path, base=base)
    return motion


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    human = _build_human(cfg)
    motion = _build_motion(cfg, human)
    it = cfg.integrator
    e = cfg.episode
    p = e.perturbation
    episode = EpisodeConfig(
        max_duration=e.max_duration_s, init_noise_q=e.init_noise_q_rad,
        init_noise_qdot=e.init_noise_qdot_rad_s,
        perturbation=PerturbationConfig(p.rate_hz, tuple(p.force_range_n), p.duration_s, tuple(p.segments)),
        base_mode=e.base_mode if human.n_base else "fixed",
        guide_stiffness=e.guide_stiffness_n_per_m, guide_damping=e.guide_damping_n_s_per_m,
        guide_rot_stiffness=e.guide_rot_stiffness_nm_per_rad,
        guide_rot_damping=e.guide_rot_damping_nm_s_per_rad,
        timestep=it.timestep_s, substeps=it.substeps, terminate_early=e.terminate_early,
    )
    rw = cfg.reward
    rewards = RewardConfig(rw.w_joint, rw.w_position, rw.w_energy, rw.w_healthy,
                           termination_threshold=rw.termination_threshold_rad,
                           healthy_height=rw.healthy_height_m)
    ev = cfg.evaluation
    evaluation = EvaluationConfig(
        cycles=ev.cycles, init_noise_q=ev.init_noise_q_rad, init_noise_qdot=ev.init_noise_qdot_rad_s,
        divergence_cost=ev.divergence_cost,
        episode=EpisodeConfig(perturbation=PerturbationConfig(rate=0.0), terminate_early=False,
                              base_mode=episode.base_mode, timestep=it.timestep_s, substeps=it.substeps,
                              guide_stiffness=episode.guide_stiffness, guide_damping=episode.guide_damping,
                              guide_rot_stiffness=episode.guide_rot_stiffness,
                              guide_rot_damping=episode.guide_rot_damping),
        rewards=rewards,
    )
    tr = cfg.training
    es = ESConfig(tr.population, tr.sigma, tr.step_size, tr.iterations, tr.episodes,
                  tuple(tr.hidden), tr.output_bias)
    exo_config = space = None
    if cfg.model == "walker":
        x = cfg.exo
        exo_config = ExoConfig(
            connector_stiffness=x.connector_stiffness_n_per_m,
            connector_damping=x.connector_damping_n_s_per_m, tau_max=x.tau_max_nm,
            hip_axis_tilt=x.hip_axis_tilt_rad,
            structure_bounds={**DEFAULT_STRUCTURE_BOUNDS,
                              **{k: tuple(v) for k, v in x.bounds.items() if k in STRUCTURE_FIELDS}},
            gain_bounds={**DEFAULT_GAIN_BOUNDS, **{k: tuple(v) for k, v in x.bounds.items() if k in GAIN_FIELDS}},
        )
        structure = ExoStructure(**{**NOMINAL_STRUCTURE.__dict__, **x.nominal_structure})
        gains = ExoGains(**{**NOMINAL_GAINS.__dict__, **x.nominal_gains})
        space = DesignSpace(exo_config, gains, structure)
        nominal = space.nominal
        if not (all(space.lower <= nominal) and all(nominal <= space.upper)):
            raise ConfigError("exo: nominal design lies outside its bounds", ("exo",))
        if not all(math.isfinite(v) for v in nominal):
            raise ConfigError("exo: nominal design must be finite", ("exo",))
    return Scenario(cfg, human, motion, exo_config, space, rewards, episode, evaluation, es)
