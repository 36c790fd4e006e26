"""Recompute a rollout's cost from its CSV and compare with the stored summary.

usage: python scripts/recompute_cost.py RUN_DIR [--tol 1e-9]
"""
import argparse
import json
import sys
from pathlib import Path

from exoembody.results import recompute_cost


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--tol", type=float, default=1e-9, help="allowed relative difference")
    args = ap.parse_args(argv)
    stored = json.loads((args.run_dir / "cost_summary.json").read_text(encoding="utf-8"))
    again = recompute_cost(args.run_dir)
    ok = True
    for key, value in again.items():
        ref = stored[key]
        if ref is None:
            continue
        diff = abs(value - ref)
        good = diff <= args.tol * max(1.0, abs(ref))
        ok &= good
        print(f"{key:6s} stored {ref!r:24s} recomputed {value!r:24s} {'ok' if good else 'MISMATCH'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
