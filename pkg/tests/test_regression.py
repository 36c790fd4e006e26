"""Committed regression data regenerates under fixed seeds (see scripts/make_regression.py)."""
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from exoembody.config import build_scenario, load_config
from exoembody.evaluation import parse_force_range, perturb_sweep
from exoembody.policy import train_policy_es

DATA = Path(__file__).resolve().parents[1] / "data"
REGRESSION = DATA / "regression"


def _rows(path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def test_calibration_file():
    cal = json.loads((REGRESSION / "f_max.json").read_text())
    assert cal["pelvis"] >= 200 and cal["torso"] >= 200
    assert parse_force_range(cal["grid"])[-1] >= max(cal["pelvis"], cal["torso"])


def test_torso_push_table_regenerates():
    scn = build_scenario(load_config(DATA / "scenario.json"))
    sw = scn.config.sweep
    committed = {float(r["force_N"]): r for r in _rows(REGRESSION / "recovery_torso.csv")}
    rows = perturb_sweep(scn.human, scn.evaluator(), scn.motion, parse_force_range(sw.forces), sw.seeds, "torso",
                         sw.push_time_s, sw.push_duration_s, sw.settle_s, sw.threshold_rad, sw.hold_s,
                         scn.evaluation, base_seed=scn.config.seed)
    assert sorted(committed) == [r.force for r in rows]
    for r in rows:
        ref = committed[r.force]
        assert r.n_recovered == int(ref["n_recovered"]) == len(r.times)
        assert abs(r.mean - float(ref["mean_recovery_s"])) <= 0.2 * float(ref["mean_recovery_s"])
    # strong pushes take visibly longer to absorb than weak ones
    by = {r.force: r.mean for r in rows}
    assert by[0.0] == 0.0
    assert by[200.0] > by[50.0] and by[-200.0] > by[-50.0]


def test_pendulum_learning_curve_regenerates():
    scn = build_scenario(load_config(DATA / "pendulum.json"))
    _, curve = train_policy_es(scn.human, scn.trajectories(), scn.rewards, scn.episode, scn.es,
                               seed=scn.config.seed, workers=1)
    committed = np.array([[float(v) for v in r.values()] for r in _rows(REGRESSION / "pendulum_curve.csv")])
    np.testing.assert_allclose(np.array(list(curve.rows()), dtype=float), committed, rtol=1e-9, atol=1e-9)
    best = committed[:, -1]
    assert np.all(np.diff(best) >= 0)
    assert best[-1] > best[0]
