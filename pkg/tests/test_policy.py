import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exoembody.errors import InvalidArgumentError, LayoutMismatchError
from exoembody.human import (
    build_pendulum_scenario,
    key_points,
    make_trajectory_variants,
    pendulum_motion,
    reference_state,
)
from exoembody.muscle import path_geometry
from exoembody.policy import (
    EpisodeConfig,
    ESConfig,
    NeuralPolicy,
    ObservationSpec,
    PerturbationConfig,
    ReflexPolicy,
    RewardConfig,
    TrackingPolicy,
    ZeroPolicy,
    centered_ranks,
    controller_from_dict,
    derive_seed,
    observe,
    policy_excitations,
    policy_fitness,
    reflex_excitations,
    reward,
    run_episode,
    sample_perturbations,
    should_terminate,
    train_policy_es,
)

from conftest import Playback


@pytest.fixture(scope="module")
def pendulum():
    return build_pendulum_scenario()


@pytest.fixture(scope="module")
def swing():
    return pendulum_motion(1.0, 0.4)


PENDULUM_EPISODE = EpisodeConfig(max_duration=2.0, base_mode="fixed",
                                 perturbation=PerturbationConfig(rate=0.0))
PENDULUM_REWARD = RewardConfig(w_position=0.0)


# --- observations ----------------------------------------------------------------

def test_layout_golden(walker):
    spec = ObservationSpec.for_human(walker)
    n, M = 14, 24
    assert spec.dimension == 6 * n + 2 * M + 2 == 134
    assert spec.blocks == [
        ("joint_angles", 0, 14), ("joint_velocities", 14, 28), ("activations", 28, 52),
        ("fiber_lengths", 52, 76), ("phase", 76, 78), ("reference_angles", 78, 92),
        ("reference_velocities", 92, 106), ("lookahead_angles", 106, 120),
        ("lookahead_velocities", 120, 134),
    ]


def test_observation_contents(walker, gait, rng):
    spec = ObservationSpec.for_human(walker)
    t = 0.4
    q, qd, _ = reference_state(gait, t)
    q = q + rng.normal(0, 0.01, q.shape)
    act = rng.uniform(0, 1, 24)
    obs = observe(walker, q, qd, act, gait, t)
    assert obs.shape == (spec.dimension,)
    q_ref, qd_ref, _ = reference_state(gait, t)
    np.testing.assert_allclose(obs[spec.block("joint_angles")][1:], q[1:])
    assert obs[spec.block("joint_angles")][0] == pytest.approx(q[0] - q_ref[0])
    np.testing.assert_allclose(obs[spec.block("joint_velocities")], 0.1 * qd)
    np.testing.assert_array_equal(obs[spec.block("activations")], act)
    ph = 2 * math.pi * t / gait.period
    np.testing.assert_allclose(obs[spec.block("phase")], [math.sin(ph), math.cos(ph)], atol=1e-12)
    np.testing.assert_allclose(obs[spec.block("reference_angles")][1:], q_ref[1:], atol=1e-12)
    q_ahead, qd_ahead, _ = reference_state(gait, t + 0.1)
    np.testing.assert_allclose(obs[spec.block("lookahead_angles")][1:], q_ahead[1:], atol=1e-12)
    np.testing.assert_allclose(obs[spec.block("lookahead_velocities")], 0.1 * qd_ahead, atol=1e-12)


def test_observation_fiber_lengths_zero_at_mean_posture(walker):
    from exoembody.human import DEFAULT_GAIT_MEAN, SIDES, synthetic_gait

    q = np.zeros(walker.ndof)
    for j, v in DEFAULT_GAIT_MEAN.items():
        for s in SIDES:
            q[walker.topology.dof(f"{j}_{s}")] = v
    obs = observe(walker, q, np.zeros(walker.ndof), np.zeros(24), synthetic_gait(walker), 0.0)
    spec = ObservationSpec.for_human(walker)
    np.testing.assert_allclose(obs[spec.block("fiber_lengths")], 0.0, atol=1e-12)


def test_observation_deterministic_and_periodic(walker, gait):
    q, qd, _ = reference_state(gait, 0.0)
    spec = ObservationSpec.for_human(walker)
    a = observe(walker, q, qd, np.full(24, 0.2), gait, 0.0)
    b = observe(walker, q, qd, np.full(24, 0.2), gait, 0.0)
    np.testing.assert_array_equal(a, b)
    c = observe(walker, q, qd, np.full(24, 0.2), gait, gait.period)
    np.testing.assert_allclose(a[spec.block("phase")], c[spec.block("phase")], atol=1e-12)


def test_layout_hash_distinguishes_scenarios(walker, pendulum):
    a = ObservationSpec.for_human(walker).layout_hash
    assert a == ObservationSpec.for_human(walker).layout_hash
    assert a != ObservationSpec.for_human(pendulum).layout_hash


# --- rewards -------------------------------------------------------------------

def test_perfect_tracking_reward(walker, gait):
    q, _, _ = reference_state(gait, 0.3)
    r = reward(walker, q, np.zeros(24), gait, 0.3)
    assert r.total == pytest.approx(1.0, abs=1e-12)
    assert (r.joint, r.position, r.energy, r.healthy) == (0.0, 0.0, 0.0, 1.0)


def test_single_joint_error_reward(walker, gait):
    q, _, _ = reference_state(gait, 0.3)
    q[walker.topology.dof("elbow_r")] += 0.1
    cfg = RewardConfig(w_position=0.0)
    r = reward(walker, q, np.zeros(24), gait, 0.3, cfg)
    assert r.total == pytest.approx(1.0 - 5.0 * 0.01, abs=1e-12)


def test_reward_components_match_formulas(walker, gait, rng):
    cfg = RewardConfig(w_joint=2.0, w_position=3.0, w_energy=0.5, w_healthy=1.5)
    dofs = walker.tracked_dofs
    for _ in range(10):
        t = rng.uniform(0, 2)
        q_ref, _, p_ref = reference_state(gait, t, walker)
        q = q_ref + rng.normal(0, 0.05, q_ref.shape)
        u = rng.uniform(0, 1, 24)
        r = reward(walker, q, u, gait, t, cfg)
        joint = -np.sum((q[dofs] - q_ref[dofs]) ** 2)
        position = -np.sum((key_points(walker, q) - p_ref) ** 2)
        energy = -np.sum(u ** 2)
        assert r.joint == pytest.approx(joint, abs=1e-12)
        assert r.position == pytest.approx(position, abs=1e-12)
        assert r.energy == pytest.approx(energy, abs=1e-12)
        assert r.healthy == 1.0
        assert r.total == pytest.approx(2 * joint + 3 * position + 0.5 * energy + 1.5, abs=1e-12)
        assert r.joint <= 0 and r.position <= 0 and r.energy <= 0


def test_unhealthy_only_in_free_mode(walker, gait):
    q, _, _ = reference_state(gait, 0.0)
    q[1] = 0.3
    assert reward(walker, q, np.zeros(24), gait, 0.0, base_mode="free").healthy == 0.0
    assert reward(walker, q, np.zeros(24), gait, 0.0, base_mode="pelvis-guided").healthy == 1.0
    assert should_terminate(walker, q, gait, 0.0, base_mode="free")


def test_excitation_domain_checked(walker, gait):
    q, _, _ = reference_state(gait, 0.0)
    with pytest.raises(InvalidArgumentError):
        reward(walker, q, np.full(24, 1.5), gait, 0.0)


# --- termination -----------------------------------------------------------------

def test_termination_boundary(walker, gait):
    q, _, _ = reference_state(gait, 0.2)
    assert not should_terminate(walker, q, gait, 0.2)
    q[walker.topology.dof("knee_l")] += 0.5 + 1e-6
    assert should_terminate(walker, q, gait, 0.2)
    q[walker.topology.dof("knee_l")] -= 2e-6
    assert not should_terminate(walker, q, gait, 0.2)
    assert not should_terminate(walker, q * 0 + 10, gait, 0.2, RewardConfig(termination_threshold=math.inf))


def test_infinite_threshold_never_terminates(pendulum, swing):
    res = run_episode(pendulum, ZeroPolicy(), swing, PENDULUM_EPISODE,
                      RewardConfig(termination_threshold=math.inf), seed=4)
    assert res.reason == "completed"
    assert res.steps == PENDULUM_EPISODE.n_control_steps()


def test_reference_playback_never_terminates(walker, gait):
    ep = EpisodeConfig(max_duration=3.0, init_noise_q=0.0, init_noise_qdot=0.0,
                       perturbation=PerturbationConfig(rate=0.0))
    res = run_episode(walker, Playback(), gait, ep, RewardConfig(termination_threshold=1e-9), seed=0)
    assert res.reason == "completed"
    np.testing.assert_allclose(res.traces.q[:, :14], res.traces.q_ref, atol=1e-12)


# --- reflex controller -----------------------------------------------------------

def test_reflex_silent_on_reference(walker, gait):
    q, qd, _ = reference_state(gait, 0.5)
    np.testing.assert_array_equal(reflex_excitations(walker, q, qd, gait, 0.5), np.zeros(24))


def test_reflex_hip_flexion_demand_gates_by_sign(walker, gait):
    q, qd, _ = reference_state(gait, 0.5)
    q[walker.topology.dof("hip_l")] -= 0.2    # behind the reference: flexion demanded
    u = reflex_excitations(walker, q, qd, gait, 0.5)
    names = walker.muscle_names
    on = {names[i] for i in np.flatnonzero(u > 0)}
    assert "hip_flexor_l" in on and "rectus_femoris_l" in on
    assert "hip_extensor_l" not in on and "hamstrings_l" not in on
    assert all(n.endswith("_l") for n in on)
    assert np.all((u >= 0) & (u <= 1))


def test_reflex_single_joint_demand_never_coactivates(walker, gait, rng):
    names = walker.muscle_names
    pairs = [("hip_flexor", "hip_extensor"), ("soleus", "tibialis_anterior"),
             ("elbow_flexor", "elbow_extensor"), ("shoulder_flexor", "shoulder_extensor")]
    joints = {"hip_flexor": "hip", "soleus": "ankle", "elbow_flexor": "elbow", "shoulder_flexor": "shoulder"}
    for _ in range(40):
        t = rng.uniform(0, gait.period)
        q, qd, _ = reference_state(gait, t)
        agonist, antagonist = pairs[rng.integers(len(pairs))]
        side = "lr"[rng.integers(2)]
        q[walker.topology.dof(f"{joints[agonist]}_{side}")] += rng.uniform(-0.3, 0.3)
        u = reflex_excitations(walker, q, qd, gait, t)
        a = u[names.index(f"{agonist}_{side}")]
        b = u[names.index(f"{antagonist}_{side}")]
        assert a == 0.0 or b == 0.0


def test_reflex_drive_formula_on_pendulum(pendulum, swing):
    q = np.array([0.0])
    t = 0.25  # reference at +0.4 rad, zero velocity
    u = reflex_excitations(pendulum, q, np.zeros(1), swing, t, ReflexPolicy(kp=60, kd=6, fhat=0.4))
    R = [path_geometry(pendulum.topology, q, np.zeros(1), m.path)[2][0] for m in pendulum.muscles]
    tau = 60 * 0.4
    f_max = pendulum.muscles[0].params.f_max
    expected = R[0] * tau / (0.4 * R[0] ** 2 * f_max)
    assert u[0] == pytest.approx(min(expected, 1.0), rel=1e-9)
    assert u[1] == 0.0


# --- neural policy -------------------------------------------------------------

def test_weight_count():
    assert NeuralPolicy.weight_count([134, 64, 64, 24]) == 135 * 64 + 65 * 64 + 65 * 24


def test_zero_weights_give_half():
    p = NeuralPolicy((5, 4, 3, 2), np.zeros(NeuralPolicy.weight_count((5, 4, 3, 2))))
    np.testing.assert_array_equal(policy_excitations(p, np.ones(5)), [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50))
def test_outputs_in_unit_interval(seed, scale):
    p = NeuralPolicy.initial((6, 8, 8, 4), seed=seed)
    obs = np.random.default_rng(seed).normal(0, 1, 6) * scale
    u = policy_excitations(p, obs)
    assert np.all((u >= 0) & (u <= 1))
    np.testing.assert_array_equal(u, policy_excitations(p, obs))


def test_dimension_mismatch():
    p = NeuralPolicy.initial((6, 8, 8, 4))
    with pytest.raises(InvalidArgumentError):
        policy_excitations(p, np.zeros(5))
    with pytest.raises(InvalidArgumentError):
        NeuralPolicy((6, 8, 4), np.zeros(3))


def test_weight_sensitivity_matches_chain_rule():
    # 2-2-1 net, one tanh layer
    w = np.array([0.3, -0.2, 0.5, 0.1, 0.05, -0.1, 0.7, -0.4, 0.2])
    p = NeuralPolicy((2, 2, 1), w)
    x = np.array([0.6, -0.9])
    W1 = w[:4].reshape(2, 2)
    b1 = w[4:6]
    W2 = w[6:8].reshape(2, 1)
    b2 = w[8]
    h = np.tanh(x @ W1 + b1)
    y = 1 / (1 + np.exp(-(h @ W2[:, 0] + b2)))
    # d y / d W1[0, 1]
    analytic = y * (1 - y) * W2[1, 0] * (1 - h[1] ** 2) * x[0]
    eps = 1e-6
    wp, wm = w.copy(), w.copy()
    wp[1] += eps
    wm[1] -= eps
    fd = (NeuralPolicy((2, 2, 1), wp).forward(x)[0] - NeuralPolicy((2, 2, 1), wm).forward(x)[0]) / (2 * eps)
    assert fd == pytest.approx(analytic, abs=1e-6)
    assert p.forward(x)[0] == pytest.approx(y, abs=1e-15)


def test_json_round_trip_is_exact(walker):
    spec = ObservationSpec.for_human(walker)
    p = NeuralPolicy.initial((spec.dimension, 16, 16, 24), seed=3, layout_hash=spec.layout_hash)
    q = NeuralPolicy.from_json(p.to_json(), expected_layout=spec.layout_hash)
    np.testing.assert_array_equal(p.weights, q.weights)
    assert q.fingerprint() == p.fingerprint()
    assert json.loads(p.to_json())["layer_sizes"] == [134, 16, 16, 24]


def test_layout_mismatch_refused(walker, pendulum, swing):
    spec = ObservationSpec.for_human(walker)
    p = NeuralPolicy.initial((spec.dimension, 8, 8, 24), layout_hash=spec.layout_hash)
    with pytest.raises(LayoutMismatchError):
        NeuralPolicy.from_json(p.to_json(), expected_layout="0" * 64)
    with pytest.raises(LayoutMismatchError):
        run_episode(pendulum, p, swing, PENDULUM_EPISODE)


def test_controller_dicts_round_trip():
    for c in (ZeroPolicy(), ReflexPolicy(50, 5, 0.3, True), TrackingPolicy(90, 9, 0.02, 0.01, False)):
        assert controller_from_dict(c.to_dict()) == c
        assert controller_from_dict(c.to_dict()).fingerprint() == c.fingerprint()
    with pytest.raises(InvalidArgumentError):
        controller_from_dict({"kind": "oracle"})


# --- episodes ----------------------------------------------------------------------

def test_episode_deterministic(walker, gait):
    ep = EpisodeConfig(max_duration=1.0)
    a = run_episode(walker, ReflexPolicy(), gait, ep, seed=11)
    b = run_episode(walker, ReflexPolicy(), gait, ep, seed=11)
    assert a.total_return == b.total_return
    for x, y in zip(a.traces, b.traces):
        np.testing.assert_array_equal(x, y)
    c = run_episode(walker, ReflexPolicy(), gait, ep, seed=12)
    assert c.start_time != a.start_time


def test_episode_seed_picks_motion_and_phase(walker, gait):
    variants = make_trajectory_variants(gait, 4, 0.05, seed=1, human=walker)
    picked = {run_episode(walker, ZeroPolicy(), variants, EpisodeConfig(max_duration=0.05), seed=s).motion_index
              for s in range(20)}
    assert picked == {0, 1, 2, 3}
    r = run_episode(walker, ZeroPolicy(), variants, EpisodeConfig(max_duration=0.05), seed=3)
    assert 0 <= r.start_time < variants[r.motion_index].period


def test_control_and_physics_rates(walker, gait):
    ep = EpisodeConfig(max_duration=0.5, perturbation=PerturbationConfig(rate=0.0))
    res = run_episode(walker, ReflexPolicy(), gait, ep, seed=0)
    assert ep.control_dt == pytest.approx(0.01)
    assert ep.timestep == 1e-3
    assert res.steps == 50
    np.testing.assert_allclose(np.diff(res.traces.time), 0.01, atol=1e-12)


def test_no_perturbations_at_zero_rate(walker, gait):
    ep = EpisodeConfig(max_duration=2.0, perturbation=PerturbationConfig(rate=0.0))
    assert run_episode(walker, ZeroPolicy(), gait, ep, seed=5).perturbations == []


def test_perturbation_sampling():
    cfg = PerturbationConfig(rate=1.0, force_range=(50, 200), duration=0.2)
    events = sample_perturbations(np.random.default_rng(0), cfg, 500.0, ["pelvis", "torso"])
    assert 400 < len(events) < 600
    starts = [e[0] for e in events]
    assert starts == sorted(starts) and starts[-1] < 500
    mags = np.array([abs(e[3]) for e in events])
    assert mags.min() >= 50 and mags.max() <= 200
    assert {e[2] for e in events} == {"pelvis", "torso"}
    assert all(e[1] == 0.2 and e[4] == 0.0 for e in events)


@pytest.mark.parametrize("kw", [dict(rate=1.5), dict(duration=0.0), dict(force_range=(10, 5))])
def test_perturbation_config_validated(kw):
    with pytest.raises(InvalidArgumentError):
        PerturbationConfig(**kw)


def test_reflex_beats_zero_on_default_scenario(walker, gait):
    ep = EpisodeConfig(max_duration=2.0)
    for s in range(3):
        z = run_episode(walker, ZeroPolicy(), gait, ep, seed=s).total_return
        r = run_episode(walker, ReflexPolicy(), gait, ep, seed=s).total_return
        assert r > z


def test_excitations_always_bounded(walker, gait):
    ep = EpisodeConfig(max_duration=1.0)
    spec = ObservationSpec.for_human(walker)
    nets = NeuralPolicy.initial((spec.dimension, 8, 8, 24), seed=2, output_bias=0.0,
                                layout_hash=spec.layout_hash)
    for c in (ReflexPolicy(), TrackingPolicy(), nets):
        u = run_episode(walker, c, gait, ep, seed=1).traces.excitation
        assert u.min() >= 0 and u.max() <= 1


def test_divergence_is_reported(swing):
    # a near-massless rod with explicit joint damping is unstable at a 10 ms step
    feather = build_pendulum_scenario(mass=1e-6)
    ep = replace(PENDULUM_EPISODE, timestep=0.01, substeps=1, max_duration=5.0)
    res = run_episode(feather, ZeroPolicy(), swing, ep, RewardConfig(termination_threshold=math.inf), seed=0)
    assert res.reason == "diverged"
    assert res.steps < ep.n_control_steps()
    assert math.isfinite(res.total_return)
    assert res.total_return <= ep.divergence_return + res.steps * RewardConfig().w_healthy


# --- evolution strategies ----------------------------------------------------------

def test_centered_ranks():
    u = centered_ranks(np.array([3.0, -1.0, np.nan, 10.0]))
    np.testing.assert_allclose(u, [1 / 6, -1 / 6, -0.5, 0.5])
    assert u.sum() == pytest.approx(0.0)


def test_derive_seed_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


def test_zero_iterations_returns_initial(pendulum, swing):
    es = ESConfig(population=4, iterations=0, hidden=(4, 4))
    p, curve = train_policy_es(pendulum, swing, PENDULUM_REWARD, PENDULUM_EPISODE, es, seed=9)
    spec = ObservationSpec.for_human(pendulum)
    ref = NeuralPolicy.initial((spec.dimension, 4, 4, 2), derive_seed(9, 0x5EED), -3.0, spec.layout_hash)
    np.testing.assert_array_equal(p.weights, ref.weights)
    assert curve.best_so_far == []


def test_es_deterministic_and_monotone(pendulum, swing):
    es = ESConfig(population=6, iterations=4, episodes=1, hidden=(8, 8))
    a, ca = train_policy_es(pendulum, swing, PENDULUM_REWARD, PENDULUM_EPISODE, es, seed=2)
    b, cb = train_policy_es(pendulum, swing, PENDULUM_REWARD, PENDULUM_EPISODE, es, seed=2)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert ca.best_so_far == cb.best_so_far
    assert all(y >= x for x, y in zip(ca.best_so_far, ca.best_so_far[1:]))
    assert len(list(ca.rows())) == 4


def test_es_workers_do_not_change_result(pendulum, swing):
    es = ESConfig(population=4, iterations=2, episodes=1, hidden=(4, 4))
    a, ca = train_policy_es(pendulum, swing, PENDULUM_REWARD, PENDULUM_EPISODE, es, seed=5, workers=1)
    b, cb = train_policy_es(pendulum, swing, PENDULUM_REWARD, PENDULUM_EPISODE, es, seed=5, workers=2)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert ca.mean == cb.mean


def test_es_closes_half_the_gap_on_pendulum():
    from exoembody.config import build_scenario, load_config
    from pathlib import Path

    scn = build_scenario(load_config(Path(__file__).parent.parent / "data" / "pendulum.json"))
    trajectories = scn.trajectories()
    seeds = [derive_seed(0, 0xA11, k) for k in range(scn.es.episodes)]
    zero = policy_fitness(scn.human, ZeroPolicy(), trajectories, scn.rewards, scn.episode, seeds)
    reflex = policy_fitness(scn.human, ReflexPolicy(), trajectories, scn.rewards, scn.episode, seeds)
    _, curve = train_policy_es(scn.human, trajectories, scn.rewards, scn.episode, scn.es, seed=0)
    assert len(curve.best_so_far) <= 200
    assert curve.best_so_far[-1] >= zero + 0.5 * (reflex - zero)
