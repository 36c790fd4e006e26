"""Regenerate the committed regression data under data/regression/.

- recovery_<segment>.csv: push-recovery table on the default force grid
- f_max.json: largest push magnitude from which every seeded trial recovers
- pendulum_curve.csv: ES learning curve on data/pendulum.json
"""
import argparse
import math
from pathlib import Path

from exoembody.cli import CURVE_HEADER, RECOVERY_HEADER
from exoembody.config import build_scenario, load_config
from exoembody.evaluation import parse_force_range, perturb_sweep
from exoembody.policy import train_policy_es
from exoembody.results import write_csv, write_json

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"
OUT = DATA / "regression"
SEGMENTS = ("pelvis", "torso")
CALIBRATION_GRID = "-600:600:50"


def sweep(scn, forces, segment):
    sw = scn.config.sweep
    return perturb_sweep(scn.human, scn.evaluator(), scn.motion, forces, sw.seeds, segment, sw.push_time_s,
                         sw.push_duration_s, sw.settle_s, sw.threshold_rad, sw.hold_s, scn.evaluation,
                         base_seed=scn.config.seed)


def f_max(rows) -> float:
    """Largest magnitude M such that every trial with |force| <= M recovered."""
    failed = [abs(r.force) for r in rows if r.n_recovered < len(r.times)]
    limit = min(failed) if failed else math.inf
    ok = [abs(r.force) for r in rows if abs(r.force) < limit]
    return max(ok) if ok else 0.0


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--skip-curve", action="store_true", help="leave pendulum_curve.csv untouched")
    args = ap.parse_args(argv)
    scn = build_scenario(load_config(DATA / "scenario.json"))
    grid = parse_force_range(scn.config.sweep.forces)
    calibration = {"grid": CALIBRATION_GRID, "seeds": scn.config.sweep.seeds, "evaluator": "tracking"}
    for seg in SEGMENTS:
        rows = sweep(scn, grid, seg)
        write_csv(OUT / f"recovery_{seg}.csv", RECOVERY_HEADER,
                  [(r.force, r.mean, r.std, r.n_recovered) for r in rows])
        calibration[seg] = f_max(sweep(scn, parse_force_range(CALIBRATION_GRID), seg))
        print(seg, "f_max", calibration[seg])
    write_json(OUT / "f_max.json", calibration)
    if not args.skip_curve:
        pend = build_scenario(load_config(DATA / "pendulum.json"))
        _, curve = train_policy_es(pend.human, pend.trajectories(), pend.rewards, pend.episode, pend.es,
                                   seed=pend.config.seed, workers=1)
        write_csv(OUT / "pendulum_curve.csv", CURVE_HEADER, list(curve.rows()))


if __name__ == "__main__":
    main()
