"""Regenerate data/scenario.json, data/pendulum.json and data/scenario.schema.json."""
import json
from pathlib import Path

from exoembody.config import config_schema, parse_config

DATA = Path(__file__).resolve().parent.parent / "data"
REQUIRED = {"anthropometry": {}, "reference": {}, "reward": {}, "episode": {}}

PENDULUM = {
    "model": "pendulum",
    "anthropometry": {"mass_kg": 2.0, "length_m": 0.5},
    "reference": {"period_s": 1.0, "variants": 4},
    "reward": {"w_position": 0.0, "healthy_height_m": 0.0},
    "episode": {"max_duration_s": 3.0, "base_mode": "fixed", "perturbation": {"rate_hz": 0.0}},
    "cost": {"weights": [1.0, 1.0, 0.0]},
    "training": {"population": 8, "iterations": 20, "episodes": 2, "hidden": [16, 16]},
    "sweep": {"segment": "rod"},
}


def dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def main() -> None:
    dump(DATA / "scenario.json", parse_config(REQUIRED).model_dump(mode="json"))
    dump(DATA / "pendulum.json", parse_config(PENDULUM).model_dump(mode="json"))
    dump(DATA / "scenario.schema.json", config_schema())


if __name__ == "__main__":
    main()
