"""Command-line entry point.

Exit codes: 0 success, 2 configuration or argument error, 3 training or
optimization failure, 4 policy/scenario layout mismatch, 5 missing inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import (
    ExoEmbodyError,
    InvalidArgumentError,
    LayoutMismatchError,
    NotFoundError,
    OptimizationAbortedError,
    StallError,
    TrajectoryFormatError,
)

log = logging.getLogger("exoembody")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_LAYOUT, EXIT_MISSING = 0, 2, 3, 4, 5
WORKERS_ENV = "EXOEMBODY_WORKERS"

OPTIMIZATION_HEADER = ["eval", "generation", "candidate", "cost", "c_kin", "c_eff", "c_int", "best_so_far"]
ALIGNMENT_HEADER = ["time", "joint", "distance_m", "angle_rad"]
RECOVERY_HEADER = ["force_N", "mean_recovery_s", "std_recovery_s", "n_recovered"]
TRIALS_HEADER = ["force_N", "trial", "recovery_s"]
CURVE_HEADER = ["generation", "mean_return", "generation_best", "center_return", "best_so_far"]
TRACKING_EXPORT_HEADER = ["cycle_fraction", "joint", "q_sim", "q_ref", "trial"]

EXPORT_INPUTS = {
    "tracking": ("rollout.csv", "cost_summary.json"),
    "optimization": ("optimization.csv", "best_design.json"),
    "alignment": ("alignment.csv",),
    "recovery": ("recovery.csv", "recovery_trials.csv"),
}


class UsageError(ExoEmbodyError):
    """Bad command-line input (exit 2)."""


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load(args):
    from .config import build_scenario, load_config, parse_config

    if args.config is None:
        cfg = parse_config({"anthropometry": {}, "reference": {}, "reward": {}, "episode": {}}, "<defaults>")
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg, build_scenario(cfg)


def resolve_workers(flag: int | None, configured: int | None = None) -> int:
    """Flag, then environment, then config, then all CPUs."""
    if flag is not None:
        n = flag
    elif os.environ.get(WORKERS_ENV):
        try:
            n = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer") from None
    elif configured is not None:
        n = configured
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, cfg, command: str):
    from .results import RunManifest

    keep = {k: v for k, v in vars(args).items() if k not in ("func", "verbose") and v is not None}
    keep = {k: (str(v) if isinstance(v, Path) else v) for k, v in keep.items()}
    return RunManifest(command, cfg.digest(), cfg.seed, keep)


def load_controller(spec: str | None, scenario):
    """``None`` uses the configured evaluator; ``reflex``/``tracking`` pick a built-in; else a JSON file."""
    from .policy import NeuralPolicy, ObservationSpec, ReflexPolicy, TrackingPolicy, controller_from_dict

    cfg = scenario.config
    if spec is None:
        return scenario.evaluator()
    if spec == "reflex":
        r = cfg.evaluator.reflex
        return ReflexPolicy(r.kp, r.kd, r.fhat, r.feedforward)
    if spec == "tracking":
        t = cfg.evaluator.tracking
        return TrackingPolicy(t.kp, t.kd, t.regularization, t.lead_s, t.assist_aware)
    path = Path(spec)
    if not path.exists():
        raise NotFoundError(f"policy file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    layout = ObservationSpec.for_human(scenario.human).layout_hash
    if d.get("kind") == "mlp":
        return NeuralPolicy.from_json(text, expected_layout=layout)
    return controller_from_dict(d)


def cost_weights(scenario, controller):
    from .evaluation import CostWeights, baseline_normalize, cost_components, rollout

    fixed = scenario.fixed_weights()
    if fixed is not None:
        return fixed
    w = scenario.config.cost.weights
    if scenario.has_exo:
        return baseline_normalize(scenario.human, controller, scenario.motion, seed=scenario.config.seed,
                                  config=scenario.evaluation, exo_config=scenario.exo_config, w=w)
    bare = rollout(scenario.human, None, None, controller, scenario.motion, seed=scenario.config.seed,
                   config=scenario.evaluation)
    n1, n2, _ = cost_components(bare)
    return CostWeights(*w, max(n1, 1e-12), max(n2, 1e-12), 1.0)


def _weights_dict(w) -> dict:
    return {k: float(getattr(w, k)) for k in ("w1", "w2", "w3", "n1", "n2", "n3")}


def _design_dict(x, mode: str | None = None) -> dict:
    from .evaluation import DesignSpace

    gains, structure = DesignSpace.split(x)
    d = {"gains": {k: float(v) for k, v in gains.__dict__.items()},
         "structure": {k: float(v) for k, v in structure.__dict__.items()},
         "vector": [float(v) for v in x]}
    if mode is not None:
        d["mode"] = mode
    return d


def load_design(spec: str, scenario):
    """Returns ``None`` for ``none``, the nominal vector for ``nominal``, else reads a design JSON."""
    if spec == "none":
        return None
    if not scenario.has_exo:
        raise UsageError("this scenario has no exoskeleton; use --design none")
    if spec == "nominal":
        return scenario.space.nominal
    path = Path(spec)
    if not path.exists():
        raise NotFoundError(f"design file {path} does not exist")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        x = np.array(d["vector"], dtype=float)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: not a design file ({exc})") from None
    scenario.space.validate(x)
    return x


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_policy(args) -> int:
    from dataclasses import replace

    from .policy import run_episode, train_policy_es
    from .results import atomic_write_text, write_csv

    cfg, scn = _load(args)
    es = scn.es
    if args.iterations is not None:
        es = replace(es, iterations=args.iterations)
    if args.population is not None:
        es = replace(es, population=args.population)
    workers = resolve_workers(args.workers, cfg.workers)
    out = _out_dir(args, "train-policy")
    man = _manifest(args, cfg, "train-policy")
    trajectories = scn.trajectories()

    def progress(g, curve):
        log.info("generation %d: mean %.3f best %.3f center %.3f", g, curve.mean[-1],
                 curve.generation_best[-1], curve.center[-1])

    policy, curve = train_policy_es(scn.human, trajectories, scn.rewards, scn.episode, es, seed=cfg.seed,
                                    workers=workers, progress=progress)
    # a policy whose validation episodes mostly diverge is a failed run
    from .policy import derive_seed
    val = [derive_seed(cfg.seed, 0xA11, k) for k in range(es.episodes)]
    reasons = [run_episode(scn.human, policy, trajectories, scn.episode, scn.rewards, s).reason for s in val]
    diverged = sum(r == "diverged" for r in reasons)
    pol_path = atomic_write_text(out / "policy.json", policy.to_json())
    curve_path = write_csv(out / "learning_curve.csv", CURVE_HEADER, list(curve.rows()))
    man.record(out, pol_path, curve_path)
    man.write(out)
    print(pol_path)
    if diverged * 2 > len(val):
        log.error("training failed: %d of %d validation episodes diverged", diverged, len(val))
        return EXIT_TRAINING
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .evaluation import optimize_design
    from .results import write_csv, write_json

    cfg, scn = _load(args)
    if not scn.has_exo:
        raise UsageError("this scenario has no exoskeleton to optimize")
    mode = args.mode or cfg.optimization.mode
    budget = args.budget if args.budget is not None else cfg.optimization.budget
    sigma0 = args.sigma0 if args.sigma0 is not None else cfg.optimization.sigma0
    controller = load_controller(args.policy, scn)
    workers = resolve_workers(args.workers, cfg.workers)
    out = _out_dir(args, "optimize")
    man = _manifest(args, cfg, "optimize")
    weights = cost_weights(scn, controller)

    def progress(gen, res):
        log.info("generation %d: best %.4f after %d evaluations", gen, res.best_cost, len(res.history))

    res = optimize_design(scn.human, controller, scn.motion, mode, budget, cfg.seed, weights, scn.space,
                          scn.evaluation, sigma0, workers, progress)
    csv_path = write_csv(out / "optimization.csv", OPTIMIZATION_HEADER, res.history)
    design = _design_dict(res.best_x, mode)
    design.update(cost=res.best_cost, weights=_weights_dict(weights), seed=cfg.seed, budget=budget,
                  population=res.lam, policy_fingerprint=res.policy_fingerprint)
    json_path = write_json(out / "best_design.json", design)
    man.record(out, csv_path, json_path)
    man.write(out)
    print(json_path)
    return EXIT_OK


def cmd_rollout(args) -> int:
    from .evaluation import DesignSpace, rollout, rollout_alignment
    from .exo import build_exo
    from .results import rollout_columns, write_csv, write_json

    cfg, scn = _load(args)
    controller = load_controller(args.policy, scn)
    x = load_design(args.design, scn)
    out = _out_dir(args, "rollout")
    man = _manifest(args, cfg, "rollout")
    weights = cost_weights(scn, controller)
    assembly = gains = None
    if x is not None:
        gains, structure = DesignSpace.split(x)
        assembly = build_exo(structure, scn.exo_config, scn.human)
    res = rollout(scn.human, assembly, gains, controller, scn.motion, args.duration, cfg.seed, weights,
                  scn.evaluation)
    connectors = [c.name for c in assembly.connectors] if assembly else []
    actuated = [a.name for a in assembly.actuated] if assembly else []
    cols = rollout_columns(res.joint_names, scn.human.muscle_names, connectors, actuated)
    parts = [res.time[:, None], res.q, res.q_ref, res.muscle_force]
    if assembly is not None:
        parts += [res.connector_force, res.exo_torque]
    table = np.hstack(parts)
    paths = [write_csv(out / "rollout.csv", cols, table.tolist())]
    paths.append(write_json(out / "rollout_columns.json", {
        "time": "s since rollout start", "q": "tracked joint angle, rad", "q_ref": "reference angle, rad",
        "muscle_force": "muscle force, N", "connector_force": "strap force magnitude, N",
        "exo_torque": "commanded exo torque, N m", "columns": cols}))
    summary = {"total": res.total, "c_kin": res.c_kinematic, "c_eff": res.c_effort,
               "c_int": res.c_interaction, "weights": _weights_dict(weights), "dt_s": res.dt,
               "period_s": res.period, "cycles": res.cycles, "diverged": res.diverged,
               "divergence_cost": scn.evaluation.divergence_cost, "seed": cfg.seed,
               "design": None if x is None else _design_dict(x)}
    paths.append(write_json(out / "cost_summary.json", summary))
    if assembly is not None:
        al = rollout_alignment(assembly, res)
        rows = [(t, j, al.distance[s, c], al.angle[s, c])
                for s, t in enumerate(al.time) for c, j in enumerate(al.joints)]
        paths.append(write_csv(out / "alignment.csv", ALIGNMENT_HEADER, rows))
    else:
        (out / "alignment.csv").unlink(missing_ok=True)
    man.record(out, *paths)
    man.write(out)
    print(out / "cost_summary.json")
    return EXIT_OK


def cmd_perturb_sweep(args) -> int:
    from .evaluation import parse_force_range, perturb_sweep
    from .results import write_csv

    cfg, scn = _load(args)
    sw = cfg.sweep
    forces = parse_force_range(args.forces or sw.forces)
    seeds = args.seeds if args.seeds is not None else sw.seeds
    controller = load_controller(args.policy, scn)
    out = _out_dir(args, "perturb-sweep")
    man = _manifest(args, cfg, "perturb-sweep")
    rows = perturb_sweep(scn.human, controller, scn.motion, forces, seeds, sw.segment, sw.push_time_s,
                         sw.push_duration_s, sw.settle_s, sw.threshold_rad, sw.hold_s, scn.evaluation,
                         base_seed=cfg.seed)
    table = write_csv(out / "recovery.csv", RECOVERY_HEADER,
                      [(r.force, r.mean, r.std, r.n_recovered) for r in rows])
    trials = write_csv(out / "recovery_trials.csv", TRIALS_HEADER,
                       [(r.force, k, t) for r in rows for k, t in enumerate(r.times)])
    man.record(out, table, trials)
    man.write(out)
    print(table)
    return EXIT_OK


def cmd_export_plots(args) -> int:
    from .results import MANIFEST, RunManifest

    run_dir = Path(args.run_dir)
    which = [args.which] if args.which else [k for k, files in EXPORT_INPUTS.items()
                                              if all((run_dir / f).exists() for f in files)]
    needed = [MANIFEST] + [f for w in which for f in EXPORT_INPUTS[w]]
    missing = [f for f in needed if not (run_dir / f).exists()]
    if missing or not which:
        listed = ", ".join(str(run_dir / f) for f in (missing or [MANIFEST]))
        raise NotFoundError(f"missing inputs: {listed}" if missing else f"nothing to export in {run_dir}")
    RunManifest.read(run_dir)
    for w in which:
        print(EXPORTERS[w](run_dir, run_dir / "plots"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot-data exporters (tidy long format, one observation per row)
# ---------------------------------------------------------------------------

def export_tracking(run_dir: Path, out_dir: Path) -> Path:
    from .results import read_csv, write_csv

    summary = json.loads((run_dir / "cost_summary.json").read_text(encoding="utf-8"))
    period = summary["period_s"]
    head, body = read_csv(run_dir / "rollout.csv")
    joints = [h.split(":", 1)[1] for h in head if h.startswith("q:")]
    iq = {j: head.index(f"q:{j}") for j in joints}
    ir = {j: head.index(f"q_ref:{j}") for j in joints}
    rows = []
    for r in body:
        t = float(r[0])
        cycle = int(math.floor(t / period + 1e-9))
        frac = max(0.0, t / period - cycle)  # float noise at cycle boundaries
        for j in joints:
            rows.append((frac, j, float(r[iq[j]]), float(r[ir[j]]), cycle))
    return write_csv(out_dir / "tracking.csv", TRACKING_EXPORT_HEADER, rows)


def export_optimization(run_dir: Path, out_dir: Path) -> Path:
    from .results import read_csv, write_csv

    design = json.loads((run_dir / "best_design.json").read_text(encoding="utf-8"))
    _, body = read_csv(run_dir / "optimization.csv", OPTIMIZATION_HEADER)
    rows = [(design.get("mode", ""), design.get("seed", 0), int(r[0]), float(r[3]), float(r[7]))
            for r in body]
    return write_csv(out_dir / "optimization.csv", ["mode", "seed", "eval", "cost", "best_so_far"], rows)


def export_alignment(run_dir: Path, out_dir: Path) -> Path:
    from .results import read_csv, write_csv

    _, body = read_csv(run_dir / "alignment.csv", ALIGNMENT_HEADER)
    by = defaultdict(lambda: ([], []))
    for r in body:
        by[r[1]][0].append(float(r[2]))
        by[r[1]][1].append(float(r[3]))
    rows = []
    for joint in sorted(by):
        for metric, vals in zip(("distance_m", "angle_rad"), by[joint]):
            a = np.array(vals)
            rows.append((joint, metric, float(a.mean()), float(a.std())))
    return write_csv(out_dir / "alignment.csv", ["joint", "metric", "mean", "std"], rows)


def export_recovery(run_dir: Path, out_dir: Path) -> Path:
    from .results import read_csv, write_csv

    _, body = read_csv(run_dir / "recovery_trials.csv", TRIALS_HEADER)
    rows = [(float(r[0]), int(r[1]), float(r[2])) for r in body]
    return write_csv(out_dir / "recovery.csv", TRIALS_HEADER, rows)


EXPORTERS = {"tracking": export_tracking, "optimization": export_optimization,
             "alignment": export_alignment, "recovery": export_recovery}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="scenario JSON (default: built-in defaults)")
    parser.add_argument("--seed", type=_nonneg_int, default=d, help="overrides the config seed")
    parser.add_argument("--workers", type=_positive_int, default=d,
                        help=f"worker processes; overrides ${WORKERS_ENV} (default: all CPUs)")
    parser.add_argument("--out", default=d, help="output directory (default: runs/<subcommand>)")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exoembody", description="Embodied-human simulation and exoskeleton design co-optimization.",
                                epilog="exit codes: 0 ok, 2 config error, 3 training failure, "
                                       "4 layout mismatch, 5 missing inputs")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("train-policy", parents=[common], help="train a neural motor policy with ES")
    s.add_argument("--iterations", type=_nonneg_int, help="override training.iterations")
    s.add_argument("--population", type=_positive_int, help="override training.population (even)")
    s.set_defaults(func=cmd_train_policy)

    policy_help = "policy JSON path, or 'reflex' / 'tracking' (default: the configured evaluator)"
    s = sub.add_parser("optimize", parents=[common], help="co-optimize exo control and structure")
    s.add_argument("--mode", choices=("co-opt", "control-only", "structure-only"),
                   help="free design coordinates (default: co-opt, or the config value)")
    s.add_argument("--budget", type=_positive_int, help="number of design evaluations")
    s.add_argument("--sigma0", type=float, help="initial step as a fraction of the bound widths")
    s.add_argument("--policy", help=policy_help)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("rollout", parents=[common], help="simulate one design and score it")
    s.add_argument("--design", default="nominal", help="design JSON path, 'nominal' or 'none'")
    s.add_argument("--policy", help=policy_help)
    s.add_argument("--duration", type=float, help="seconds (default: evaluation.cycles gait cycles)")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("perturb-sweep", parents=[common], help="push-recovery times over a force grid")
    s.add_argument("--forces", help="lo:hi:step in N (default: sweep.forces)")
    s.add_argument("--seeds", type=_positive_int, help="trials per force")
    s.add_argument("--policy", help=policy_help)
    s.set_defaults(func=cmd_perturb_sweep)

    s = sub.add_parser("export-plots", parents=[common], help="write tidy plot-ready CSVs for a run")
    s.add_argument("run_dir", help="directory holding a run manifest")
    s.add_argument("--which", choices=tuple(EXPORT_INPUTS), help="export kind (default: all available)")
    s.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LayoutMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except NotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (OptimizationAbortedError, StallError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (UsageError, InvalidArgumentError, TrajectoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExoEmbodyError as exc:
        # remaining failures come from the simulation itself
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
