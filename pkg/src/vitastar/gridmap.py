"""Occupancy maps, map/grid/problem file I/O and random problem sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

Cell = tuple[int, int]

DEFAULT_CUTOFF = 128
DEFAULT_MIN_SEPARATION = 0.5
MAX_SAMPLING_RETRIES = 10_000


class MapFormatError(ValueError):
    pass


class GenerationExhaustedError(RuntimeError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OccupancyMap:
    """Binary grid, 1 = obstacle and 0 = free, indexed (row, col)."""

    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or cells.size == 0:
            raise MapFormatError(f"occupancy map must be a non-empty 2-D array, got shape {cells.shape}")
        if not np.isin(cells, (0, 1)).all():
            raise MapFormatError("occupancy values must be 0 or 1")
        object.__setattr__(self, "cells", _frozen(cells, np.uint8))

    @classmethod
    def empty(cls, height: int, width: int) -> "OccupancyMap":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.cells[cell] == 0

    @cached_property
    def rows(self) -> list[list[int]]:
        return self.cells.tolist()

    @cached_property
    def neighbour_cache(self) -> dict:
        """Per-connectivity memo of flat-index neighbour lists, filled by the planners."""
        return {}

    def free_cells(self) -> np.ndarray:
        return np.argwhere(self.cells == 0)

    def components(self) -> np.ndarray:
        """Label free-space components.

        4-connectivity is exact for both planners' move sets: a diagonal step
        is only legal when both cardinal cells beside it are free.
        """
        labels, _ = ndimage.label(self.cells == 0)
        return labels

    def __eq__(self, other) -> bool:
        return isinstance(other, OccupancyMap) and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash((self.shape, self.cells.tobytes()))


@dataclass(frozen=True, eq=False)
class ProbabilisticGrid:
    """Occupancy-grid payload: per-cell obstacle probability in [0, 100]."""

    height: int
    width: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.size != self.height * self.width:
            raise MapFormatError(f"expected {self.height * self.width} probabilities, got {probs.size}")
        if probs.size and (probs.min() < 0 or probs.max() > 100):
            raise MapFormatError("probabilities must lie within [0, 100]")
        object.__setattr__(self, "probs", _frozen(probs.reshape(self.height, self.width), np.int64))

    @classmethod
    def from_json(cls, payload: dict) -> "ProbabilisticGrid":
        return cls(int(payload["height"]), int(payload["width"]), np.asarray(payload["probs"]))

    def to_json(self) -> dict:
        return {"height": self.height, "width": self.width, "probs": self.probs.reshape(-1).tolist()}


@dataclass(frozen=True, eq=False)
class PathMap:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or not np.isin(cells, (0, 1)).all():
            raise MapFormatError("path map must be a binary 2-D array")
        object.__setattr__(self, "cells", _frozen(cells, np.uint8))

    @classmethod
    def from_path(cls, path: Sequence[Cell], shape: tuple[int, int]) -> "PathMap":
        cells = np.zeros(shape, dtype=np.uint8)
        for r, c in path:
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise ValueError(f"path cell {(r, c)} outside {shape}")
            cells[r, c] = 1
        return cls(cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def count(self) -> int:
        return int(self.cells.sum())

    def connects(self, start: Cell, goal: Cell) -> bool:
        """True when marked cells contain an 8-connected chain start -> goal."""
        if not (self.cells[start] and self.cells[goal]):
            return False
        labels, _ = ndimage.label(self.cells, structure=np.ones((3, 3)))
        return labels[start] == labels[goal]

    def __eq__(self, other) -> bool:
        return isinstance(other, PathMap) and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash((self.shape, self.cells.tobytes()))


@dataclass(frozen=True)
class PlanningProblem:
    map: OccupancyMap
    start: Cell
    goal: Cell
    truth: PathMap | None = field(default=None, compare=False)
    truth_path: tuple[Cell, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        start = tuple(int(v) for v in self.start)
        goal = tuple(int(v) for v in self.goal)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "goal", goal)
        for name, cell in (("start", start), ("goal", goal)):
            if not self.map.in_bounds(cell):
                raise ValueError(f"{name} {cell} is outside the {self.map.shape} map")
            if not self.map.is_free(cell):
                raise ValueError(f"{name} {cell} lies on an obstacle")
        if start == goal:
            raise ValueError("start and goal must differ")
        if self.truth is not None and self.truth.shape != self.map.shape:
            raise ValueError("truth path map dims differ from the map")

    @property
    def shape(self) -> tuple[int, int]:
        return self.map.shape

    def with_truth(self, path: Sequence[Cell]) -> "PlanningProblem":
        path = tuple((int(r), int(c)) for r, c in path)
        return PlanningProblem(self.map, self.start, self.goal,
                               PathMap.from_path(path, self.map.shape), path)


# conversion and ingestion ---------------------------------------------------

def from_probabilistic(grid: ProbabilisticGrid, t: float) -> OccupancyMap:
    """Binarize an occupancy grid: obstacle iff p_o >= t."""
    if not 0 <= t <= 100:
        raise ValueError(f"threshold {t} outside [0, 100]")
    return OccupancyMap((grid.probs >= t).astype(np.uint8))


def load_grid_json(path) -> ProbabilisticGrid:
    with open(path) as fh:
        return ProbabilisticGrid.from_json(json.load(fh))


def save_grid_json(grid: ProbabilisticGrid, path) -> None:
    with open(path, "w") as fh:
        json.dump(grid.to_json(), fh)


def load_image(path, obstacle_cutoff: int = DEFAULT_CUTOFF) -> OccupancyMap:
    """Read an 8-bit grayscale PGM/PNG; pixels darker than the cutoff are obstacles."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise MapFormatError(f"cannot read map image {path}: {exc}") from exc
    if img.mode in ("1", "P", "RGB", "RGBA", "LA"):
        img = img.convert("L")
    if img.mode != "L":
        raise MapFormatError(f"{path}: unsupported pixel format {img.mode!r}, need 8-bit grayscale")
    pixels = np.asarray(img, dtype=np.uint8)
    return OccupancyMap((pixels < obstacle_cutoff).astype(np.uint8))


def save_image(occ: OccupancyMap, path) -> None:
    """Write free cells white (255) and obstacles black (0); format from suffix."""
    pixels = np.where(occ.cells == 1, 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)


def load_map(path, obstacle_cutoff: int = DEFAULT_CUTOFF, threshold: float = 50) -> OccupancyMap:
    """Image files go through ``load_image``; ``.json`` grids through ``from_probabilistic``."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return from_probabilistic(load_grid_json(path), threshold)
    return load_image(path, obstacle_cutoff)


def load_problem(path, obstacle_cutoff: int = DEFAULT_CUTOFF) -> PlanningProblem:
    path = Path(path)
    with open(path) as fh:
        payload = json.load(fh)
    return problem_from_record(payload, base_dir=path.parent, obstacle_cutoff=obstacle_cutoff)


def problem_from_record(record: dict, base_dir=".", obstacle_cutoff: int = DEFAULT_CUTOFF,
                        cache: dict | None = None) -> PlanningProblem:
    map_path = Path(base_dir) / record["map_path"]
    if cache is not None and map_path in cache:
        occ = cache[map_path]
    else:
        occ = load_map(map_path, obstacle_cutoff)
        if cache is not None:
            cache[map_path] = occ
    problem = PlanningProblem(occ, tuple(record["start"]), tuple(record["goal"]))
    if record.get("truth_path"):
        problem = problem.with_truth(record["truth_path"])
    return problem


def problem_record(problem: PlanningProblem, map_path: str) -> dict:
    record = {"map_path": str(map_path), "start": list(problem.start), "goal": list(problem.goal)}
    if problem.truth_path is not None:
        record["truth_path"] = [list(c) for c in problem.truth_path]
    return record


def save_problem(problem: PlanningProblem, path, map_path: str) -> None:
    with open(path, "w") as fh:
        json.dump(problem_record(problem, map_path), fh, indent=1)


# generation -------------------------------------------------------------------

def random_map(height: int, width: int, density: float, rng: np.random.Generator,
               style: str = "noise") -> OccupancyMap:
    """Synthetic map.

    ``noise`` draws i.i.d. obstacle cells; ``blocks`` drops random
    rectangles until the target density is reached.
    """
    if style == "noise":
        return OccupancyMap((rng.random((height, width)) < density).astype(np.uint8))
    if style == "blocks":
        cells = np.zeros((height, width), dtype=np.uint8)
        target = density * height * width
        max_side = max(2, min(height, width) // 3)
        while cells.sum() < target:
            h = int(rng.integers(1, max_side + 1))
            w = int(rng.integers(1, max_side + 1))
            r = int(rng.integers(0, height - h + 1))
            c = int(rng.integers(0, width - w + 1))
            cells[r:r + h, c:c + w] = 1
        return OccupancyMap(cells)
    raise ValueError(f"unknown map style {style!r}")


def sample_problem(occ: OccupancyMap, min_separation: float = DEFAULT_MIN_SEPARATION,
                   rng: np.random.Generator | None = None,
                   max_retries: int = MAX_SAMPLING_RETRIES,
                   require_connected: bool = True) -> PlanningProblem:
    """Draw a start/goal pair on free cells at least ``min_separation`` map
    diagonals apart, resampling pairs that are not mutually reachable."""
    if rng is None:
        rng = np.random.default_rng()
    free = occ.free_cells()
    if len(free) < 2:
        raise GenerationExhaustedError("map has fewer than two free cells")
    labels = occ.components() if require_connected else None
    min_dist = min_separation * math.hypot(occ.height, occ.width)
    for _ in range(max_retries):
        i, j = rng.choice(len(free), size=2, replace=False)
        s, g = tuple(int(v) for v in free[i]), tuple(int(v) for v in free[j])
        if math.hypot(s[0] - g[0], s[1] - g[1]) < min_dist:
            continue
        if labels is not None and labels[s] != labels[g]:
            continue
        return PlanningProblem(occ, s, g)
    raise GenerationExhaustedError(
        f"no valid start/goal pair after {max_retries} draws (min distance {min_dist:.2f})")
