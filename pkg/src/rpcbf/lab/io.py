"""CSV and manifest output.

Floats are written with ``repr`` (shortest round-tripping form), so reading a
file back reproduces the in-memory arrays exactly and identical runs produce
identical bytes.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .experiments import GridResult, TrajectoryRecord


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    """Columns of a CSV written by :func:`write_csv`; numeric columns become float arrays."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    cols = {}
    for j, name in enumerate(header):
        raw = [row[j] for row in rows]
        try:
            cols[name] = np.array([float(s) for s in raw])
        except ValueError:
            cols[name] = np.array(raw, dtype=object)
    return cols


def state_names(n: int) -> list[str]:
    return [f"x{i}" for i in range(n)]


def write_boundary(path, grid: GridResult) -> Path:
    n = grid.states.shape[1]
    rows = ((c, *x, v) for c, (x, v) in enumerate(zip(grid.states, grid.values.ravel())))
    return write_csv(path, ["cell", *state_names(n), "value"], rows)


def write_safe_region(path, grid: GridResult) -> Path:
    n = grid.states.shape[1]
    rows = ((c, *x, v, s) for c, (x, v, s)
            in enumerate(zip(grid.states, grid.values.ravel(), grid.safe.ravel())))
    return write_csv(path, ["cell", *state_names(n), "value", "safe"], rows)


def write_trajectory(path, rec: TrajectoryRecord) -> Path:
    n, m = rec.states.shape[1], rec.controls.shape[1]
    header = (["t", *state_names(n)] + [f"u_nom{i}" for i in range(m)] + [f"u{i}" for i in range(m)]
              + ["value", "h", "status"])
    rows = ((t, *x, *un, *u, v, h, st) for t, x, un, u, v, h, st
            in zip(rec.times, rec.states, rec.nominal_controls, rec.controls, rec.values,
                   rec.h_values, rec.statuses))
    return write_csv(path, header, rows)


def write_grad_study(path, rows) -> Path:
    return write_csv(path, ["dt", "v0", "method", "grad_v0", "error"], rows)


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
