"""Sensor layouts and the admissible box."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = ["SensorLayout", "LayoutFormatError", "project_box", "check_bounds",
           "read_layout_csv", "write_layout_csv", "layout_to_csv"]


class LayoutFormatError(ValueError):
    """Malformed layout file."""


def check_bounds(lower, upper):
    lower = np.asarray(lower, dtype=float).reshape(2)
    upper = np.asarray(upper, dtype=float).reshape(2)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("box bounds must be finite")
    if np.any(lower > upper):
        raise ValueError(f"lower bound {lower} exceeds upper bound {upper}")
    return lower, upper


def project_box(coords, lower, upper):
    """Clamp sensor coordinates ``(n, 2)`` into ``[lower, upper]`` elementwise."""
    lower, upper = check_bounds(lower, upper)
    return np.clip(np.asarray(coords, dtype=float), lower, upper)


@dataclass(frozen=True)
class SensorLayout:
    """``n`` sensor positions inside the box ``lower <= s <= upper``."""

    coords: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower, upper = check_bounds(self.lower, self.upper)
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(coords)):
            raise ValueError("sensor coordinates must be finite")
        slack = 1e-9 * max(1.0, float(np.abs(upper - lower).max()))
        if np.any(coords < lower - slack) or np.any(coords > upper + slack):
            raise ValueError("sensor layout lies outside the admissible box")
        object.__setattr__(self, "coords", np.clip(coords, lower, upper))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def __len__(self):
        return len(self.coords)

    @property
    def n_sensors(self):
        return len(self.coords)

    def with_coords(self, coords):
        return SensorLayout(project_box(coords, self.lower, self.upper), self.lower, self.upper)

    def project(self):
        return self.with_coords(self.coords)


def layout_to_csv(coords):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sensor", "x", "y"])
    for i, (x, y) in enumerate(np.asarray(coords, float).reshape(-1, 2)):
        w.writerow([i, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def write_layout_csv(path, coords):
    with open(path, "w", newline="") as fh:
        fh.write(layout_to_csv(coords))


def read_layout_csv(path):
    """Read a ``sensor,x,y`` CSV; returns coordinates ordered by sensor index."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["sensor", "x", "y"]:
            raise LayoutFormatError(f"{path}:1: expected header 'sensor,x,y'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise LayoutFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                idx, x, y = int(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise LayoutFormatError(f"{path}:{lineno}: {exc}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise LayoutFormatError(f"{path}:{lineno}: non-finite coordinate")
            if idx in rows:
                raise LayoutFormatError(f"{path}:{lineno}: duplicate sensor index {idx}")
            rows[idx] = (x, y)
    if not rows:
        raise LayoutFormatError(f"{path}: no sensors")
    if sorted(rows) != list(range(len(rows))):
        raise LayoutFormatError(f"{path}: sensor indices must be 0..n-1")
    return np.array([rows[i] for i in range(len(rows))])
