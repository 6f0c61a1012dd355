"""Append-only CSV metrics logs.

Fixed header (step, wall_ms, then named scalars). Scalars are recorded at
float32 precision with nine significant digits, which parses back exactly.
wall_ms is wall-clock bookkeeping and is excluded from reproducibility
comparisons.
"""

import os
import time

import numpy as np


class MetricsError(ValueError):
    """Header mismatch or non-monotone step index."""


def format_scalar(value):
    """Nine-significant-digit decimal, exact for float32 values."""
    return f"{float(np.float32(value)):.9g}"


class MetricsLog:
    """Appender for one run's metrics file.

    Reopening an existing file validates the header and resumes after the
    last recorded step; appending a step lower than the last recorded one is
    a step regression and raises. ``fresh=True`` truncates instead, for
    training runs that restart from step zero.
    """

    def __init__(self, path, fields, fresh=False):
        self.path = os.fspath(path)
        self.fields = list(fields)
        self.last_step = None
        self._t0 = time.perf_counter()
        header = ",".join(["step", "wall_ms"] + self.fields)
        if fresh:
            with open(self.path, "w") as fh:
                fh.write(header + "\n")
        elif os.path.exists(self.path) and os.path.getsize(self.path) > 0:
            existing_fields, rows = read_metrics(self.path)
            if existing_fields != self.fields:
                raise MetricsError(
                    f"existing header {existing_fields} != requested {self.fields}"
                )
            if rows:
                self.last_step = rows[-1]["step"]
        else:
            with open(self.path, "w") as fh:
                fh.write(header + "\n")

    def append(self, step, values, wall_ms=None):
        step = int(step)
        if self.last_step is not None and step < self.last_step:
            raise MetricsError(
                f"step regression: {step} after {self.last_step} in {self.path}"
            )
        missing = set(self.fields) - set(values)
        if missing:
            raise MetricsError(f"missing scalar(s) {sorted(missing)}")
        if wall_ms is None:
            wall_ms = (time.perf_counter() - self._t0) * 1e3
        row = [str(step), f"{wall_ms:.3f}"] + [
            format_scalar(values[f]) for f in self.fields
        ]
        with open(self.path, "a") as fh:
            fh.write(",".join(row) + "\n")
        self.last_step = step


def read_metrics(path):
    """Parse a metrics CSV into (scalar field names, list of row dicts)."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        return [], []
    header = lines[0].split(",")
    if header[:2] != ["step", "wall_ms"]:
        raise MetricsError(f"unexpected header {header} in {path}")
    fields = header[2:]
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            raise MetricsError(f"ragged row in {path}: {line!r}")
        row = {"step": int(cells[0]), "wall_ms": float(cells[1])}
        row.update({f: float(v) for f, v in zip(fields, cells[2:])})
        rows.append(row)
    return fields, rows


def metrics_equal(path_a, path_b, ignore=("wall_ms",)):
    """Row-for-row equality of two logs, skipping bookkeeping columns."""
    fields_a, rows_a = read_metrics(path_a)
    fields_b, rows_b = read_metrics(path_b)
    if fields_a != fields_b or len(rows_a) != len(rows_b):
        return False
    keys = ["step"] + [f for f in fields_a if f not in ignore]
    return all(
        all(ra[k] == rb[k] for k in keys) for ra, rb in zip(rows_a, rows_b)
    )
