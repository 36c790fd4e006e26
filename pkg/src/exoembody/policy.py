"""Human motor controllers, rewards, episodes and the evolution-strategies trainer.

Controllers come in four flavours that all plug into the compiled loop:

* :class:`ZeroPolicy` - no excitation at all;
* :class:`ReflexPolicy` - PD torque demand distributed by sign-gated moment arms;
* :class:`TrackingPolicy` - inverse-dynamics feedforward plus PD, distributed by
  bounded least squares (the default frozen evaluator);
* :class:`NeuralPolicy` - a small tanh MLP with logistic outputs, trained by
  :func:`train_policy_es`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, LayoutMismatchError
from .human import HumanScenario, ReferenceMotion, TrajectorySet, reference_state
from .muscle import TAU_ACT, TAU_DEACT
from .simulation import (
    BASE_MODES,
    FIXED,
    FREE_BASE,
    LOOKAHEAD,
    MLP,
    REFLEX,
    TRACKING,
    VEL_SCALE,
    ZERO,
    LoopOutput,
    LoopParams,
    Network,
    Plant,
    Traces,
    make_perturbations,
    observe_kernel,
    reflex_kernel,
    reward_kernel,
    run,
)

log = logging.getLogger(__name__)

POLICY_FORMAT = "exoembody-policy"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardConfig:
    w_joint: float = 5.0
    w_position: float = 2.0
    w_energy: float = 0.1
    w_healthy: float = 1.0
    key_bodies: tuple | None = None      # (segment, point) pairs; None uses the scenario's
    termination_threshold: float = 0.5   # rad, per tracked joint
    healthy_height: float = 0.6          # m, pelvis height floor in free mode

    def __post_init__(self):
        for name in ("w_joint", "w_position", "w_energy", "w_healthy"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if not self.termination_threshold > 0:
            raise InvalidArgumentError("termination_threshold must be > 0")


@dataclass(frozen=True)
class PerturbationConfig:
    rate: float = 0.5                          # events per second
    force_range: tuple[float, float] = (50.0, 200.0)  # N, magnitude; sign is random
    duration: float = 0.2
    segments: tuple[str, ...] = ("pelvis", "torso")

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidArgumentError("perturbation rate must lie in [0, 1] per second")
        lo, hi = self.force_range
        if not 0.0 <= lo <= hi:
            raise InvalidArgumentError("force_range must satisfy 0 <= low <= high")
        if not self.duration > 0:
            raise InvalidArgumentError("perturbation duration must be > 0")


@dataclass(frozen=True)
class EpisodeConfig:
    max_duration: float = 5.0
    init_noise_q: float = 0.02      # rad std on tracked joints
    init_noise_qdot: float = 0.05   # rad/s std on tracked joints
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    base_mode: str = "pelvis-guided"
    guide_stiffness: float = 5e4     # N/m
    guide_damping: float = 1e3       # N s/m
    guide_rot_stiffness: float = 500.0  # N m/rad
    guide_rot_damping: float = 50.0
    timestep: float = 1e-3
    substeps: int = 10               # physics steps per control step
    terminate_early: bool = True
    divergence_return: float = -1000.0
    tau_act: float = TAU_ACT
    tau_deact: float = TAU_DEACT

    def __post_init__(self):
        if self.base_mode not in BASE_MODES:
            raise InvalidArgumentError(f"base_mode must be one of {sorted(BASE_MODES)}")
        if not (self.max_duration > 0 and self.timestep > 0 and self.substeps >= 1):
            raise InvalidArgumentError("durations and step counts must be positive")
        if self.init_noise_q < 0 or self.init_noise_qdot < 0:
            raise InvalidArgumentError("initial noise must be >= 0")

    @property
    def control_dt(self) -> float:
        return self.timestep * self.substeps

    def n_control_steps(self, duration: float | None = None) -> int:
        d = self.max_duration if duration is None else duration
        return int(round(d / self.control_dt))


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

class _Controller:
    """Interface shared by all controllers: loop settings plus a fingerprint."""

    def loop_fields(self) -> dict:
        raise NotImplementedError

    def network(self) -> Network | None:
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


_NO_GAINS = dict(reflex_kp=0.0, reflex_kd=0.0, reflex_fhat=1.0, reflex_feedforward=False,
                 reflex_lead=0.0, assist_aware=False)


@dataclass(frozen=True)
class ZeroPolicy(_Controller):
    def loop_fields(self) -> dict:
        return dict(controller=ZERO, **_NO_GAINS)

    def to_dict(self) -> dict:
        return {"kind": "zero"}


@dataclass(frozen=True)
class ReflexPolicy(_Controller):
    """PD torque demand spread over muscles whose moment arm agrees in sign."""

    kp: float = 60.0
    kd: float = 6.0
    fhat: float = 0.4
    feedforward: bool = False

    def __post_init__(self):
        if not self.fhat > 0:
            raise InvalidArgumentError("fhat must be > 0")

    def loop_fields(self) -> dict:
        return dict(controller=REFLEX, reflex_kp=self.kp, reflex_kd=self.kd, reflex_fhat=self.fhat,
                    reflex_feedforward=self.feedforward, reflex_lead=0.0, assist_aware=False)

    def to_dict(self) -> dict:
        return {"kind": "reflex", "kp": self.kp, "kd": self.kd, "fhat": self.fhat,
                "feedforward": self.feedforward}


@dataclass(frozen=True)
class TrackingPolicy(_Controller):
    """Inverse-dynamics feedforward plus PD, solved for excitations in [0, 1].

    ``lead`` evaluates the feedforward slightly ahead to cover activation lag.
    With ``assist_aware`` the commanded exo torque is left out of the muscle
    demand, i.e. the human relies on the assistance it feels.
    """

    kp: float = 100.0
    kd: float = 10.0
    regularization: float = 0.03
    lead: float = 0.02
    assist_aware: bool = True

    def __post_init__(self):
        if self.regularization < 0:
            raise InvalidArgumentError("regularization must be >= 0")

    def loop_fields(self) -> dict:
        return dict(controller=TRACKING, reflex_kp=self.kp, reflex_kd=self.kd,
                    reflex_fhat=self.regularization, reflex_feedforward=True,
                    reflex_lead=self.lead, assist_aware=self.assist_aware)

    def to_dict(self) -> dict:
        return {"kind": "tracking", "kp": self.kp, "kd": self.kd,
                "regularization": self.regularization, "lead": self.lead,
                "assist_aware": self.assist_aware}


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True, eq=False)
class NeuralPolicy(_Controller):
    """Fully connected network: tanh hidden layers, logistic outputs.

    ``weights`` is the flat concatenation of (W, b) per layer with W stored
    row-major as (fan_in, fan_out).
    """

    layer_sizes: tuple[int, ...]
    weights: np.ndarray
    layout_hash: str = ""

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidArgumentError("layer_sizes needs at least an input and an output size")
        w = np.array(self.weights, dtype=float).ravel()
        if w.size != self.weight_count(sizes):
            raise InvalidArgumentError(
                f"expected {self.weight_count(sizes)} weights for {sizes}, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgumentError("policy weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def weight_count(layer_sizes: Sequence[int]) -> int:
        return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))

    @classmethod
    def initial(cls, layer_sizes: Sequence[int], seed: int = 0, output_bias: float = -3.0,
                layout_hash: str = "") -> "NeuralPolicy":
        """Seeded start: scaled Gaussian hidden weights, near-silent outputs."""
        rng = np.random.default_rng(seed)
        parts = []
        sizes = list(layer_sizes)
        last = len(sizes) - 2
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 0.1 if k == last else 1.0
            parts.append(scale * rng.standard_normal(a * b) / math.sqrt(a))
            parts.append(np.full(b, output_bias) if k == last else np.zeros(b))
        return cls(tuple(sizes), np.concatenate(parts), layout_hash)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, o = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self.weights[o:o + a * b].reshape(a, b)
            o += a * b
            out.append((W, self.weights[o:o + b]))
            o += b
        return out

    def with_weights(self, weights) -> "NeuralPolicy":
        return NeuralPolicy(self.layer_sizes, weights, self.layout_hash)

    def forward(self, obs) -> np.ndarray:
        h = np.asarray(obs, dtype=float)
        if h.shape[-1] != self.layer_sizes[0]:
            raise InvalidArgumentError(
                f"observation has dimension {h.shape[-1]}, policy expects {self.layer_sizes[0]}")
        layers = self.layers()
        for W, b in layers[:-1]:
            h = np.tanh(h @ W + b)
        W, b = layers[-1]
        return _logistic(h @ W + b)

    def network(self) -> Network:
        if len(self.layer_sizes) != 4:
            raise InvalidArgumentError("the simulation loop runs networks with two hidden layers")
        (W1, b1), (W2, b2), (W3, b3) = self.layers()
        c = np.ascontiguousarray
        return Network(c(W1), c(b1), c(W2), c(b2), c(W3), c(b3))

    def loop_fields(self) -> dict:
        return dict(controller=MLP, **_NO_GAINS)

    def to_dict(self) -> dict:
        return {"format": POLICY_FORMAT, "version": 1, "kind": "mlp",
                "layer_sizes": list(self.layer_sizes), "hidden": "tanh", "output": "logistic",
                "layout_hash": self.layout_hash, "weights": [float(x) for x in self.weights]}

    def to_json(self) -> str:
        # json emits shortest round-trip reprs, so weights survive exactly
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, expected_layout: str | None = None) -> "NeuralPolicy":
        d = json.loads(text)
        if d.get("format") != POLICY_FORMAT or d.get("kind") != "mlp":
            raise InvalidArgumentError("not a serialized neural policy")
        policy = cls(tuple(d["layer_sizes"]), np.array(d["weights"], dtype=float),
                     d.get("layout_hash", ""))
        if expected_layout is not None and policy.layout_hash != expected_layout:
            raise LayoutMismatchError(
                f"policy layout {policy.layout_hash[:12]} does not match scenario {expected_layout[:12]}")
        return policy


Controller = ZeroPolicy | ReflexPolicy | TrackingPolicy | NeuralPolicy


def controller_from_dict(d: dict) -> _Controller:
    kind = d.get("kind")
    if kind == "zero":
        return ZeroPolicy()
    if kind == "reflex":
        return ReflexPolicy(d["kp"], d["kd"], d["fhat"], d.get("feedforward", False))
    if kind == "tracking":
        return TrackingPolicy(d["kp"], d["kd"], d["regularization"], d["lead"],
                              d.get("assist_aware", True))
    if kind == "mlp":
        return NeuralPolicy.from_json(json.dumps(d))
    raise InvalidArgumentError(f"unknown controller kind {kind!r}")


def policy_excitations(policy: NeuralPolicy, obs) -> np.ndarray:
    return policy.forward(obs)


# ---------------------------------------------------------------------------
# observation layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservationSpec:
    """Ordered observation blocks for one scenario.

    =======================  ======  ==========================================
    block                    size    content
    =======================  ======  ==========================================
    joint_angles             n       q (pelvis x relative to the reference)
    joint_velocities         n       0.1 qdot
    activations              M       muscle activations
    fiber_lengths            M       normalized fiber length minus 1
    phase                    2       sin, cos of 2 pi (t mod T) / T
    reference_angles         n       q_ref(t) (pelvis x relative)
    reference_velocities     n       0.1 qdot_ref(t)
    lookahead_angles         n       q_ref(t + 0.1 s)
    lookahead_velocities     n       0.1 qdot_ref(t + 0.1 s)
    =======================  ======  ==========================================
    """

    coordinates: tuple[str, ...]
    muscles: tuple[str, ...]

    @classmethod
    def for_human(cls, human: HumanScenario) -> "ObservationSpec":
        return cls(tuple(human.coordinate_names), tuple(human.muscle_names))

    @property
    def blocks(self) -> list[tuple[str, int, int]]:
        n, M = len(self.coordinates), len(self.muscles)
        sizes = [("joint_angles", n), ("joint_velocities", n), ("activations", M),
                 ("fiber_lengths", M), ("phase", 2), ("reference_angles", n),
                 ("reference_velocities", n), ("lookahead_angles", n),
                 ("lookahead_velocities", n)]
        out, o = [], 0
        for name, size in sizes:
            out.append((name, o, o + size))
            o += size
        return out

    @property
    def dimension(self) -> int:
        return 6 * len(self.coordinates) + 2 * len(self.muscles) + 2

    def block(self, name: str) -> slice:
        for b, lo, hi in self.blocks:
            if b == name:
                return slice(lo, hi)
        raise InvalidArgumentError(f"unknown observation block {name!r}")

    @property
    def layout_hash(self) -> str:
        doc = {"blocks": [(b, hi - lo) for b, lo, hi in self.blocks],
               "coordinates": list(self.coordinates), "muscles": list(self.muscles),
               "velocity_scale": VEL_SCALE, "lookahead": LOOKAHEAD}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Python views of the compiled controller / reward kernels
# ---------------------------------------------------------------------------

def _as_plant(scenario) -> Plant:
    if isinstance(scenario, Plant):
        return scenario
    if isinstance(scenario, HumanScenario):
        return Plant(scenario)
    raise InvalidArgumentError("expected a HumanScenario or Plant")


def _human_state(plant: Plant, q, qdot=None):
    nh = plant.n_human
    q = np.ascontiguousarray(q, dtype=float)[:nh].copy()
    qd = np.zeros(nh) if qdot is None else np.ascontiguousarray(qdot, dtype=float)[:nh].copy()
    if q.shape != (nh,) or qd.shape != (nh,):
        raise InvalidArgumentError(f"state must have at least {nh} human coordinates")
    return q, qd


def observe(scenario, q, qdot, activations, motion: ReferenceMotion, t: float) -> np.ndarray:
    """Observation vector laid out as documented in :class:`ObservationSpec`."""
    plant = _as_plant(scenario)
    human_plant = Plant(plant.human)
    q, qd = _human_state(plant, q, qdot)
    act = np.ascontiguousarray(activations, dtype=float)
    if act.shape != (len(plant.human.muscles),):
        raise InvalidArgumentError("one activation per muscle expected")
    ref = human_plant.reference(motion)
    out = np.zeros(ObservationSpec.for_human(plant.human).dimension)
    observe_kernel(human_plant.arrays, human_plant.muscle_arrays, ref, plant.human.n_base,
                   plant.n_human, q, qd, act, float(t), out)
    return out


@dataclass(frozen=True)
class RewardTerms:
    total: float
    joint: float
    position: float
    energy: float
    healthy: float


def _is_healthy(human: HumanScenario, q, config: RewardConfig, base_mode: str) -> bool:
    return not (base_mode == "free" and human.n_base > 0 and q[1] < config.healthy_height)


def reward(scenario, q, excitations, motion: ReferenceMotion, t: float,
           config: RewardConfig = RewardConfig(), base_mode: str = "pelvis-guided") -> RewardTerms:
    """Weighted reward; components are the unweighted r_joint, r_position, r_energy, 1[healthy]."""
    plant = Plant(_as_plant(scenario).human)
    q, _ = _human_state(plant, q)
    u = np.ascontiguousarray(excitations, dtype=float)
    if u.shape != (len(plant.human.muscles),) or u.min(initial=0.0) < 0 or u.max(initial=0.0) > 1:
        raise InvalidArgumentError("excitations must be one value in [0, 1] per muscle")
    q_ref, _, _ = reference_state(motion, t, plant.human)
    ref = plant.reference(motion, config.key_bodies)
    out = np.zeros(5)
    healthy = _is_healthy(plant.human, q, config, base_mode)
    reward_kernel(plant.human.topology.arrays, ref, plant.human.n_base, plant.n_human, q,
                  np.ascontiguousarray(q_ref), u, healthy, config.w_joint, config.w_position,
                  config.w_energy, config.w_healthy, out)
    return RewardTerms(*map(float, out))


def should_terminate(scenario, q, motion: ReferenceMotion, t: float,
                     config: RewardConfig = RewardConfig(), base_mode: str = "pelvis-guided") -> bool:
    plant = _as_plant(scenario)
    q, _ = _human_state(plant, q)
    q_ref, _, _ = reference_state(motion, t, plant.human)
    dofs = plant.human.tracked_dofs
    if np.any(np.abs(q[dofs] - q_ref[dofs]) > config.termination_threshold):
        return True
    return not _is_healthy(plant.human, q, config, base_mode)


def reflex_excitations(scenario, q, qdot, motion: ReferenceMotion, t: float,
                       gains: ReflexPolicy = ReflexPolicy()) -> np.ndarray:
    """Reflex excitations for the given state (no feedforward term)."""
    plant = Plant(_as_plant(scenario).human)
    q, qd = _human_state(plant, q, qdot)
    q_ref, qd_ref, _ = reference_state(motion, t, plant.human)
    out = np.zeros(len(plant.human.muscles))
    reflex_kernel(plant.arrays, plant.muscle_arrays, q, qd, np.ascontiguousarray(q_ref),
                  np.ascontiguousarray(qd_ref), np.zeros(plant.n_human), plant.human.n_base,
                  plant.n_human, gains.kp, gains.kd, gains.fhat, out)
    return out


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def loop_params(plant: Plant, controller: _Controller, episode: EpisodeConfig,
                rewards: RewardConfig, n_ctrl: int, t0: float, terminate: bool) -> LoopParams:
    mode = BASE_MODES[episode.base_mode] if plant.human.n_base > 0 else FIXED
    return LoopParams(
        dt=episode.timestep, substeps=episode.substeps, n_ctrl=int(n_ctrl), t0=float(t0),
        n_base=plant.human.n_base, base_mode=mode,
        tether_k=episode.guide_stiffness, tether_c=episode.guide_damping,
        tether_kr=episode.guide_rot_stiffness, tether_cr=episode.guide_rot_damping,
        tau_act=episode.tau_act, tau_deact=episode.tau_deact,
        w_joint=rewards.w_joint, w_position=rewards.w_position, w_energy=rewards.w_energy,
        w_healthy=rewards.w_healthy, term_threshold=rewards.termination_threshold,
        healthy_height=rewards.healthy_height, terminate=bool(terminate),
        diverge_penalty=episode.divergence_return, **controller.loop_fields(),
    )


def check_layout(controller: _Controller, human: HumanScenario) -> None:
    if isinstance(controller, NeuralPolicy):
        spec = ObservationSpec.for_human(human)
        if controller.layout_hash and controller.layout_hash != spec.layout_hash:
            raise LayoutMismatchError("policy was trained for a different observation layout")
        if controller.layer_sizes[0] != spec.dimension or controller.layer_sizes[-1] != len(human.muscles):
            raise LayoutMismatchError("policy input/output sizes do not match the scenario")


@dataclass
class EpisodeResult:
    total_return: float
    steps: int
    reason: str
    traces: Traces
    motion_index: int
    start_time: float
    perturbations: list = field(default_factory=list)


def sample_perturbations(rng: np.random.Generator, config: PerturbationConfig, duration: float,
                         segments: Sequence[str]) -> list[tuple]:
    """Poisson event train of horizontal pushes ``(start, duration, segment, fx, fy)``."""
    if config.rate <= 0:
        return []
    if not segments:
        raise InvalidArgumentError("none of the perturbation segments exist in the scenario")
    events, t = [], 0.0
    lo, hi = config.force_range
    while True:
        t += rng.exponential(1.0 / config.rate)
        if t >= duration:
            return events
        seg = segments[int(rng.integers(len(segments)))]
        f = rng.uniform(lo, hi) * (1.0 if rng.random() < 0.5 else -1.0)
        events.append((float(t), config.duration, seg, float(f), 0.0))


def run_episode(scenario, controller: _Controller, trajectories, episode: EpisodeConfig = EpisodeConfig(),
                rewards: RewardConfig = RewardConfig(), seed: int = 0, gains=None) -> EpisodeResult:
    """One seeded training/evaluation episode.

    The seed picks the motion, the start phase within its first cycle, the
    initial-state noise on tracked joints and the perturbation events.
    """
    plant = _as_plant(scenario)
    human = plant.human
    check_layout(controller, human)
    motions = trajectories.motions if isinstance(trajectories, TrajectorySet) else (
        (trajectories,) if isinstance(trajectories, ReferenceMotion) else tuple(trajectories))
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(motions)))
    motion = motions[idx]
    t0 = float(rng.uniform(0.0, motion.period))
    q, qd, _ = reference_state(motion, t0, human)
    dofs = human.tracked_dofs
    q[dofs] += episode.init_noise_q * rng.standard_normal(len(dofs))
    qd[dofs] += episode.init_noise_qdot * rng.standard_normal(len(dofs))
    segs = [s for s in episode.perturbation.segments if s in {x.name for x in plant.topology.segments}]
    events = sample_perturbations(rng, episode.perturbation, episode.max_duration, segs)
    q, qd = plant.full_state(q, qd)
    params = loop_params(plant, controller, episode, rewards, episode.n_control_steps(), t0,
                         episode.terminate_early)
    out: LoopOutput = run(plant, motion, params, q, qd, gains=gains,
                          perturbations=make_perturbations(events, plant.topology),
                          network=controller.network(), key_bodies=rewards.key_bodies)
    return EpisodeResult(out.total_return, out.steps, out.reason, out.trimmed(), idx, t0, events)


# ---------------------------------------------------------------------------
# evolution strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ESConfig:
    population: int = 16        # even; antithetic pairs
    sigma: float = 0.05         # parameter noise std
    step_size: float = 0.03
    iterations: int = 50
    episodes: int = 3           # episodes averaged per fitness
    hidden: tuple[int, ...] = (64, 64)
    output_bias: float = -3.0

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise InvalidArgumentError("population must be an even number >= 2")
        if not (self.sigma > 0 and self.step_size > 0):
            raise InvalidArgumentError("sigma and step_size must be positive")
        if self.iterations < 0 or self.episodes < 1:
            raise InvalidArgumentError("iterations must be >= 0 and episodes >= 1")


@dataclass
class LearningCurve:
    mean: list = field(default_factory=list)          # mean candidate fitness
    generation_best: list = field(default_factory=list)
    center: list = field(default_factory=list)        # fitness of the updated mean policy
    best_so_far: list = field(default_factory=list)

    def rows(self):
        for g, row in enumerate(zip(self.mean, self.generation_best, self.center, self.best_so_far)):
            yield (g, *row)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _fitness_job(args):
    plant, policy, trajectories, episode, rewards, seeds = args
    vals = [run_episode(plant, policy, trajectories, episode, rewards, s).total_return for s in seeds]
    return float(np.mean(vals))


def centered_ranks(values: np.ndarray) -> np.ndarray:
    """Rank utilities in [-0.5, 0.5]; non-finite values rank worst."""
    v = np.where(np.isfinite(values), values, -np.inf)
    ranks = np.empty(len(v))
    ranks[np.argsort(v, kind="stable")] = np.arange(len(v))
    return ranks / max(len(v) - 1, 1) - 0.5


def train_policy_es(scenario, trajectories, rewards: RewardConfig = RewardConfig(),
                    episode: EpisodeConfig = EpisodeConfig(), es: ESConfig = ESConfig(),
                    seed: int = 0, workers: int = 1, initial: NeuralPolicy | None = None,
                    progress=None) -> tuple[NeuralPolicy, LearningCurve]:
    """Isotropic ES with antithetic pairs and rank shaping; returns the best policy seen.

    Each generation draws ``episodes`` shared episode seeds so candidates face
    identical conditions. The updated mean is scored on a fixed validation
    seed set; the best-scoring mean is returned.
    """
    plant = _as_plant(scenario)
    human = plant.human
    spec = ObservationSpec.for_human(human)
    sizes = (spec.dimension, *es.hidden, len(human.muscles))
    policy = initial or NeuralPolicy.initial(sizes, derive_seed(seed, 0x5EED), es.output_bias,
                                             spec.layout_hash)
    check_layout(policy, human)
    curve = LearningCurve()
    if es.iterations == 0:
        return policy, curve
    rng = np.random.default_rng(derive_seed(seed, 0xE5))
    val_seeds = [derive_seed(seed, 0xA11, k) for k in range(es.episodes)]
    theta = policy.weights.copy()
    best_policy, best_fit = policy, _fitness_job((plant, policy, trajectories, episode, rewards, val_seeds))
    half = es.population // 2
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for g in range(es.iterations):
            seeds = [derive_seed(seed, g + 1, k) for k in range(es.episodes)]
            eps = rng.standard_normal((half, theta.size))
            noise = np.concatenate([eps, -eps])
            jobs = [(plant, policy.with_weights(theta + es.sigma * z), trajectories, episode, rewards, seeds)
                    for z in noise]
            fits = np.array(list(pool.map(_fitness_job, jobs)) if pool else [_fitness_job(j) for j in jobs])
            bad = ~np.isfinite(fits)
            if bad.any():
                log.warning("generation %d: %d non-finite fitness values ranked worst", g, int(bad.sum()))
            util = centered_ranks(fits)
            theta = theta + es.step_size / (es.population * es.sigma) * (util @ noise)
            center = policy.with_weights(theta)
            f_center = _fitness_job((plant, center, trajectories, episode, rewards, val_seeds))
            if f_center > best_fit:
                best_fit, best_policy = f_center, center
            finite = fits[np.isfinite(fits)]
            curve.mean.append(float(finite.mean()) if finite.size else -math.inf)
            curve.generation_best.append(float(finite.max()) if finite.size else -math.inf)
            curve.center.append(float(f_center))
            curve.best_so_far.append(float(best_fit))
            if progress is not None:
                progress(g, curve)
    finally:
        if pool is not None:
            pool.shutdown()
    return best_policy, curve


def policy_fitness(scenario, controller: _Controller, trajectories, rewards: RewardConfig = RewardConfig(),
                   episode: EpisodeConfig = EpisodeConfig(), seeds: Sequence[int] = (0, 1, 2)) -> float:
    """Mean episode return of any controller over the given seeds."""
    plant = _as_plant(scenario)
    return float(np.mean([run_episode(plant, controller, trajectories, episode, rewards, s).total_return
                          for s in seeds]))


def policy_with_layout(policy: NeuralPolicy, human: HumanScenario) -> NeuralPolicy:
    return replace(policy, layout_hash=ObservationSpec.for_human(human).layout_hash)
