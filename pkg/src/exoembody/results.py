"""Result files: atomic writes, strict CSV, run manifests and post-hoc cost recomputation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import NotFoundError, TrajectoryFormatError

MANIFEST = "manifest.json"


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def fmt(value) -> str:
    """Shortest round-trip text for numbers, so CSVs reload bit-exactly."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    n = len(header)
    for i, row in enumerate(rows):
        if len(row) != n:
            raise ValueError(f"row {i} has {len(row)} fields, header has {n}")
        w.writerow([fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path, header: Sequence[str] | None = None) -> tuple[list[str], list[list[str]]]:
    """Strict reader: rejects ragged rows and, if given, an unexpected header."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"{path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryFormatError(f"{path}: empty file", row=1)
    head, body = rows[0], rows[1:]
    if header is not None and list(header) != head:
        raise TrajectoryFormatError(f"{path}: header {head} differs from expected {list(header)}", row=1)
    for i, r in enumerate(body, start=2):
        if len(r) != len(head):
            raise TrajectoryFormatError(f"{path}: row {i} has {len(r)} fields, header has {len(head)}", row=i)
    return head, body


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    arguments: dict = field(default_factory=dict)
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: dict = field(default_factory=dict)   # relative path -> sha256

    def record(self, run_dir, *paths) -> None:
        run_dir = Path(run_dir)
        for p in paths:
            p = Path(p)
            self.outputs[p.relative_to(run_dir).as_posix()] = sha256_file(p)

    def write(self, run_dir) -> Path:
        self.finished = _now()
        return write_json(Path(run_dir) / MANIFEST, self.__dict__)

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        p = Path(run_dir) / MANIFEST
        if not p.exists():
            raise NotFoundError(f"{p} does not exist")
        return cls(**json.loads(p.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# rollout files
# ---------------------------------------------------------------------------

def rollout_columns(joints, muscles, connectors, actuated) -> list[str]:
    cols = ["time"]
    cols += [f"q:{j}" for j in joints]
    cols += [f"q_ref:{j}" for j in joints]
    cols += [f"muscle_force:{m}" for m in muscles]
    cols += [f"connector_force:{c}" for c in connectors]
    cols += [f"exo_torque:{a}" for a in actuated]
    return cols


def recompute_cost(run_dir) -> dict:
    """Rebuild the cost summary from ``rollout.csv`` and the stored weights alone."""
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "cost_summary.json").read_text(encoding="utf-8"))
    head, body = read_csv(run_dir / "rollout.csv")
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(head)))

    def block(prefix):
        idx = [i for i, h in enumerate(head) if h.startswith(prefix + ":")]
        return data[:, idx]

    t = data[:, 0]
    period, cycles, dt = summary["period_s"], summary["cycles"], summary["dt_s"]
    w = (t > period + 1e-9) & (t <= cycles * period + 1e-9)
    e = block("q")[w] - block("q_ref")[w]
    c_kin = float(np.mean(e ** 2)) if e.size else 0.0
    c_eff = float(np.sum(block("muscle_force")[w] ** 2) * dt)
    conn = block("connector_force")[w]
    c_int = float(np.max(conn)) if conn.size else 0.0
    wt = summary["weights"]
    if summary["diverged"]:
        total = summary["divergence_cost"]
    else:
        total = wt["w1"] * c_kin / wt["n1"] + wt["w2"] * c_eff / wt["n2"] + wt["w3"] * c_int / wt["n3"]
    return {"total": float(total), "c_kin": c_kin, "c_eff": c_eff, "c_int": c_int}


def finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None
