import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exoembody.errors import InvalidArgumentError, TrajectoryFormatError
from exoembody.human import (
    DEFAULT_GAIT,
    SIDES,
    ReferenceMotion,
    build_default_walker,
    build_pendulum_scenario,
    check_limits,
    export_reference_csv,
    import_reference_csv,
    key_points,
    make_trajectory_variants,
    reference_state,
    synthetic_gait,
)
from exoembody.multibody import inverse_dynamics, mass_matrix
from exoembody.muscle import muscle_generalized_forces


# --- walker construction -----------------------------------------------------

def test_default_walker_dimensions(walker):
    assert walker.ndof == 14
    assert len(walker.muscles) == 24
    assert len(walker.joint_names) == 11
    assert walker.coordinate_names[:4] == ["pelvis_x", "pelvis_y", "pelvis_rot", "lumbar"]
    assert len(walker.topology.segments) == 12


def test_joint_list(walker):
    expected = {"lumbar"} | {f"{k}_{s}" for k in ("hip", "knee", "ankle", "shoulder", "elbow") for s in SIDES}
    assert set(walker.joint_names) == expected


def test_segment_masses_sum_to_body_mass():
    for mass in (45.0, 70.0, 112.5):
        w = build_default_walker(mass=mass, stature=1.6)
        total = sum(s.mass for s in w.topology.segments)
        assert abs(total - mass) < 1e-9


def test_mirrored_muscle_parameters(walker):
    by = {m.name: m for m in walker.muscles}
    for name, unit in by.items():
        if name.endswith("_l"):
            twin = by[name[:-2] + "_r"]
            assert unit.params == twin.params
            segs = [s.replace("_l", "_r") for s, _ in unit.path.via_points]
            assert segs == [s for s, _ in twin.path.via_points]
            assert [p for _, p in unit.path.via_points] == [p for _, p in twin.path.via_points]


def test_mirror_permutations_are_involutions(walker):
    pc = walker.mirror_coordinates()
    pm = walker.mirror_muscles()
    assert np.array_equal(pc[pc], np.arange(walker.ndof))
    assert np.array_equal(pm[pm], np.arange(len(walker.muscles)))
    assert list(pc[:3]) == [0, 1, 2]


@pytest.mark.parametrize("mass,stature", [(0.0, 1.75), (70.0, 0.0), (-1.0, 1.7)])
def test_non_positive_anthropometry_rejected(mass, stature):
    with pytest.raises(InvalidArgumentError):
        build_default_walker(mass=mass, stature=stature)


def test_walker_mass_matrix_symmetric_positive(walker, gait):
    q, _, _ = reference_state(gait, 0.3)
    M = mass_matrix(walker.topology, q)
    assert np.max(np.abs(M - M.T)) < 1e-10
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_bilateral_symmetry_of_muscle_forces(walker, gait, rng):
    perm_q = walker.mirror_coordinates()
    perm_m = walker.mirror_muscles()
    for _ in range(20):
        t = rng.uniform(0, gait.period)
        q, qd, _ = reference_state(gait, t)
        q = q + rng.normal(0, 0.05, q.shape)
        qd = qd + rng.normal(0, 0.2, qd.shape)
        act = rng.uniform(0, 1, len(walker.muscles))
        Q, f = muscle_generalized_forces(walker.topology, q, qd, walker.muscles, act)
        Qm, fm = muscle_generalized_forces(walker.topology, q[perm_q], qd[perm_q], walker.muscles, act[perm_m])
        np.testing.assert_allclose(fm, f[perm_m], rtol=1e-10, atol=1e-8)
        np.testing.assert_allclose(Qm, Q[perm_q], rtol=1e-10, atol=1e-8)


def test_key_points_follow_kinematics(walker, gait):
    q, _, pts = reference_state(gait, 0.0, walker)
    assert pts.shape == (len(walker.key_bodies), 2)
    np.testing.assert_array_equal(pts, key_points(walker, q))
    head, toe_l = pts[0], pts[1]
    assert head[1] > toe_l[1] + 1.0


# --- reference motion ----------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 20.0))
def test_reference_is_periodic_in_joints(t):
    motion = ReferenceMotion(1.1, ("a", "b"), ((0.1, 0.3, 0.2, 0.05, -1.0), (0.0, 0.2, 1.0, 0.0, 0.0)),
                             floating_base=False)
    q0, qd0, _ = reference_state(motion, t)
    q1, qd1, _ = reference_state(motion, t + motion.period)
    np.testing.assert_allclose(q1, q0, atol=1e-12)
    np.testing.assert_allclose(qd1, qd0, atol=1e-12)


def test_walker_reference_periodic_except_forward_progress(gait):
    q0, qd0, _ = reference_state(gait, 0.37)
    q1, qd1, _ = reference_state(gait, 0.37 + gait.period)
    assert q1[0] - q0[0] == pytest.approx(gait.speed * gait.period)
    np.testing.assert_allclose(q1[1:], q0[1:], atol=1e-12)
    np.testing.assert_allclose(qd1, qd0, atol=1e-12)


def test_reference_velocity_matches_finite_difference(gait):
    h = 1e-6
    for t in np.linspace(0.01, 2 * gait.period, 17):
        _, qd, _ = reference_state(gait, t)
        qp, _, _ = reference_state(gait, t + h)
        qm, _, _ = reference_state(gait, t - h)
        np.testing.assert_allclose(qd, (qp - qm) / (2 * h), atol=1e-6)


def test_right_side_lags_left_by_half_period(walker, gait):
    t = np.linspace(0, gait.period, 50)
    vals = gait.joint_values(t)
    shifted = gait.joint_values(t + gait.period / 2)
    idx = {n: k for k, n in enumerate(gait.joints)}
    for kind in ("hip", "knee", "ankle", "shoulder", "elbow"):
        np.testing.assert_allclose(vals[:, idx[f"{kind}_r"]], shifted[:, idx[f"{kind}_l"]], atol=1e-12)


def test_negative_time_rejected(gait):
    with pytest.raises(InvalidArgumentError):
        reference_state(gait, -0.1)


def test_default_gait_within_joint_limits_dense(walker, gait):
    assert check_limits(gait, walker, samples=1000)


def test_default_gait_ranges(gait):
    idx = {n: k for k, n in enumerate(gait.joints)}
    v = gait.joint_values(np.linspace(0, gait.period, 1000, endpoint=False))
    assert v[:, idx["hip_l"]].max() == pytest.approx(0.35, abs=1e-3)
    assert v[:, idx["knee_l"]].min() == pytest.approx(0.05, abs=1e-3)
    assert v[:, idx["knee_l"]].max() == pytest.approx(1.05, abs=1e-3)
    assert gait.period == 1.1


def test_gait_feet_clear_ground(walker, gait):
    lowest = min(
        key_points(walker, reference_state(gait, t)[0])[1:3, 1].min()
        for t in np.linspace(0, gait.period, 100)
    )
    assert lowest > 0.0


def test_limit_violation_detected(walker):
    table = {**DEFAULT_GAIT, "knee": (0.55, 2.0, 0.0, 0.0, 0.0)}
    assert not check_limits(synthetic_gait(walker, table=table), walker)


# --- trajectory variants -----------------------------------------------------

def test_single_variant_is_base(gait):
    s = make_trajectory_variants(gait, count=1, seed=3)
    assert len(s) == 1 and s[0] is gait


def test_variants_deterministic(walker, gait):
    a = make_trajectory_variants(gait, 10, 0.05, seed=7, human=walker)
    b = make_trajectory_variants(gait, 10, 0.05, seed=7, human=walker)
    assert a == b
    c = make_trajectory_variants(gait, 10, 0.05, seed=8, human=walker)
    assert a != c


def test_variant_periods_within_jitter(walker, gait):
    s = make_trajectory_variants(gait, 10, 0.05, seed=0, human=walker)
    assert s[0] == gait
    for m in s:
        assert 0.95 * gait.period <= m.period <= 1.05 * gait.period
        assert m.joints == gait.joints
        assert check_limits(m, walker)


@pytest.mark.parametrize("count,jitter", [(0, 0.05), (3, -0.01), (3, 0.25)])
def test_variant_arguments_validated(gait, count, jitter):
    with pytest.raises(InvalidArgumentError):
        make_trajectory_variants(gait, count, jitter)


def test_unsatisfiable_limits_give_up(walker):
    # knee swing overshoots both limits by more than any 2% jitter can shrink it
    table = {**DEFAULT_GAIT, "knee": (1.1, 1.16, 0.0, 0.0, 0.0)}
    tight = synthetic_gait(walker, table=table)
    with pytest.raises(InvalidArgumentError, match="attempts"):
        make_trajectory_variants(tight, 3, 0.02, seed=0, human=walker)


# --- CSV exchange ------------------------------------------------------------

def test_csv_round_trip(tmp_path, gait):
    path = export_reference_csv(gait, tmp_path / "ref.csv", duration=2 * gait.period, rate=200)
    motion, rms = import_reference_csv(path, base=gait)
    assert rms < 1e-6
    assert motion.source == "imported"
    assert motion.period == pytest.approx(gait.period, rel=1e-6)
    t = np.linspace(0, gait.period, 300)
    assert np.max(np.abs(motion.joint_values(t) - gait.joint_values(t))) < 1e-6


def test_csv_header_and_line_endings(tmp_path, gait):
    path = export_reference_csv(gait, tmp_path / "ref.csv")
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines()[0] == "time," + ",".join(gait.joints)


def test_constant_column_fits_offset(tmp_path):
    lines = ["time,a,b"]
    for i in range(200):
        t = i * 0.01
        lines.append(f"{t!r},0.3,{0.2 * math.sin(2 * math.pi * t / 0.8)!r}")
    (tmp_path / "c.csv").write_text("\n".join(lines) + "\n")
    motion, rms = import_reference_csv(tmp_path / "c.csv")
    a0, a1, _, a2, _ = motion.coefficients[0]
    assert a0 == pytest.approx(0.3, abs=1e-9)
    assert abs(a1) < 1e-8 and abs(a2) < 1e-8
    assert motion.period == pytest.approx(0.8, rel=1e-6)
    assert rms < 1e-8


def test_shuffled_rows_rejected(tmp_path, gait, rng):
    path = export_reference_csv(gait, tmp_path / "ref.csv")
    lines = path.read_text().splitlines()
    body = lines[1:]
    rng.shuffle(body)
    path.write_text("\n".join([lines[0], *body]) + "\n")
    with pytest.raises(TrajectoryFormatError, match="not strictly increasing") as exc:
        import_reference_csv(path)
    assert exc.value.row >= 3


def test_missing_column_rejected(tmp_path, gait):
    path = export_reference_csv(gait, tmp_path / "ref.csv")
    with pytest.raises(TrajectoryFormatError, match="missing") as exc:
        import_reference_csv(path, joints=["hip_l", "nope"])
    assert exc.value.row == 1


def test_too_few_samples_rejected(tmp_path, gait):
    path = export_reference_csv(gait, tmp_path / "ref.csv", duration=gait.period, rate=30)
    with pytest.raises(TrajectoryFormatError, match="samples"):
        import_reference_csv(path)


def test_ragged_row_rejected(tmp_path):
    (tmp_path / "r.csv").write_text("time,a\n0.0,1.0\n0.1\n")
    with pytest.raises(TrajectoryFormatError) as exc:
        import_reference_csv(tmp_path / "r.csv")
    assert exc.value.row == 3


# --- pendulum scenario -----------------------------------------------------------

def test_pendulum_scenario_is_balanced():
    p = build_pendulum_scenario()
    assert p.ndof == 1 and p.n_base == 0
    assert p.muscle_names == ["flexor", "extensor"]
    Q, f = muscle_generalized_forces(p.topology, np.zeros(1), np.zeros(1), p.muscles, np.array([0.5, 0.5]))
    assert f[0] == pytest.approx(f[1])
    assert abs(Q[0]) < 1e-9
    Q, _ = muscle_generalized_forces(p.topology, np.zeros(1), np.zeros(1), p.muscles, np.array([1.0, 0.0]))
    assert Q[0] > 0


def test_pendulum_gravity_torque():
    p = build_pendulum_scenario(mass=2.0, length=0.5)
    tau = inverse_dynamics(p.topology, np.array([0.3]), np.zeros(1), np.zeros(1))
    assert tau[0] == pytest.approx(2.0 * 9.81 * 0.25 * math.sin(0.3), rel=1e-9)
