"""Orientation filtering of grid paths and pose-path serialization.

World frame: x = column, y = -row, so +x points right and +y points up in
the rendered map image.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .gridmap import Cell

MODES = ("heading", "literal")


class DegenerateSegmentError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]; angles already in range are returned as is."""
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if wrapped == -math.pi else wrapped


def to_world(cell: Cell) -> tuple[float, float]:
    r, c = cell
    return float(c), float(-r)


@dataclass(frozen=True)
class PosePath:
    """(row, col, theta) poses; theta in radians within (-pi, pi]."""

    poses: tuple[tuple[int, int, float], ...]
    start_theta: float
    goal_theta: float

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def cells(self) -> list[Cell]:
        return [(r, c) for r, c, _ in self.poses]

    @property
    def thetas(self) -> list[float]:
        return [t for _, _, t in self.poses]

    def world(self) -> list[tuple[float, float, float]]:
        return [(*to_world((r, c)), t) for r, c, t in self.poses]


def planar_heading(p, q) -> float:
    """Angle of the world-frame displacement p -> q, both given as (x, y)."""
    return wrap_angle(math.atan2(q[1] - p[1], q[0] - p[0]))


def heading(a: Cell, b: Cell) -> float:
    """Planar angle of the displacement between grid cells a -> b."""
    return planar_heading(to_world(a), to_world(b))


def vector_angle(u, v) -> float:
    """arccos of the normalised dot product of two position vectors."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateSegmentError("angle undefined for a zero-length position vector")
    return float(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))


def orient(path: Sequence[Cell], start_theta: float, goal_theta: float,
           mode: str = "heading") -> PosePath:
    """Attach an orientation to every cell of ``path``.

    The first and last poses take the supplied orientations. Interior pose i
    gets, in ``heading`` mode, the direction of travel towards waypoint i+1;
    in ``literal`` mode, the unsigned angle between the world position
    vectors of waypoints i and i+1.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cells = [(int(r), int(c)) for r, c in path]
    if len(cells) < 2:
        raise ValueError("path needs at least two cells")
    for a, b in zip(cells, cells[1:]):
        if a == b:
            raise DegenerateSegmentError(f"consecutive duplicate waypoint {a}")
    thetas = [wrap_angle(float(start_theta))]
    for i in range(1, len(cells) - 1):
        if mode == "heading":
            thetas.append(heading(cells[i], cells[i + 1]))
        else:
            thetas.append(vector_angle(to_world(cells[i]), to_world(cells[i + 1])))
    thetas.append(wrap_angle(float(goal_theta)))
    poses = tuple((r, c, t) for (r, c), t in zip(cells, thetas))
    return PosePath(poses, thetas[0], thetas[-1])


def _fmt(v: float) -> str:
    return format(v, ".17g")


def export_path(pose_path: PosePath, path, fmt: str | None = None) -> Path:
    """Write poses as world (x, y, theta); ``fmt`` is ``json`` or ``csv``
    (defaults to the file suffix)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "json").lower()
    rows = pose_path.world()
    if fmt == "json":
        path.write_text(json.dumps([{"x": x, "y": y, "theta": t} for x, y, t in rows], indent=1))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "y", "theta"])
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    else:
        raise ValueError(f"unknown path format {fmt!r}")
    return path


def read_path(path) -> list[tuple[float, float, float]]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            return [(float(r["x"]), float(r["y"]), float(r["theta"])) for r in csv.DictReader(fh)]
    return [(float(p["x"]), float(p["y"]), float(p["theta"])) for p in json.loads(path.read_text())]
