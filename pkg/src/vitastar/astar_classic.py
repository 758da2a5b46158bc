"""Heap-based A* and Dijkstra on occupancy grids."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gridmap import Cell, OccupancyMap, PathMap, PlanningProblem

SQRT2 = math.sqrt(2.0)

_CARDINAL = ((-1, 0), (0, -1), (0, 1), (1, 0))
_DIAGONAL = ((-1, -1), (-1, 1), (1, -1), (1, 1))


class SearchContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class Connectivity:
    kind: int = 8
    cardinal_cost: float = 1.0
    diagonal_cost: float = SQRT2

    def __post_init__(self):
        if self.kind not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.cardinal_cost <= 0 or self.diagonal_cost <= 0:
            raise ValueError("step costs must be positive")


FOUR = Connectivity(4)
EIGHT = Connectivity(8)


def connectivity(kind: int) -> Connectivity:
    return FOUR if int(kind) == 4 else EIGHT


def neighbors(occ: OccupancyMap, cell: Cell, conn: Connectivity = EIGHT) -> list[tuple[Cell, float]]:
    """Free neighbours of ``cell`` with their step lengths, in row-major order.

    Diagonal moves need both adjacent cardinal cells free (no corner cutting).
    """
    rows = occ.rows
    h, w = occ.shape
    r, c = cell
    out = []
    for dr, dc in _CARDINAL:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and rows[rr][cc] == 0:
            out.append(((rr, cc), conn.cardinal_cost))
    if conn.kind == 8:
        for dr, dc in _DIAGONAL:
            rr, cc = r + dr, c + dc
            if (0 <= rr < h and 0 <= cc < w and rows[rr][cc] == 0
                    and rows[r][cc] == 0 and rows[rr][c] == 0):
                out.append(((rr, cc), conn.diagonal_cost))
    out.sort()
    return out


def flat_neighbors(occ: OccupancyMap, idx: int, conn: Connectivity = EIGHT) -> list[tuple[int, float]]:
    """``neighbors`` on row-major flat indices, memoized on the map."""
    memo = occ.neighbour_cache.setdefault(conn, {})
    out = memo.get(idx)
    if out is None:
        w = occ.width
        out = [(r * w + c, ln) for (r, c), ln in neighbors(occ, divmod(idx, w), conn)]
        memo[idx] = out
    return out


def octile(a: Cell, b: Cell) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)


def manhattan(a: Cell, b: Cell) -> float:
    return float(abs(a[0] - b[0]) + abs(a[1] - b[1]))


def euclidean(a: Cell, b: Cell) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def zero(a: Cell, b: Cell) -> float:
    return 0.0


HEURISTICS: dict[str, Callable[[Cell, Cell], float]] = {
    "octile": octile, "manhattan": manhattan, "euclidean": euclidean, "zero": zero,
}


def default_heuristic(conn: Connectivity) -> str:
    return "octile" if conn.kind == 8 else "manhattan"


def octile_map(shape: tuple[int, int], goal: Cell) -> np.ndarray:
    rows, cols = np.indices(shape)
    dx, dy = np.abs(rows - goal[0]), np.abs(cols - goal[1])
    return np.maximum(dx, dy) + (SQRT2 - 1.0) * np.minimum(dx, dy)


@dataclass
class SearchResult:
    path: list[Cell]
    cost: float
    expansions: int
    wall_time: float
    found: bool
    expanded: list[Cell] = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return max(len(self.path) - 1, 0)


def path_length(path, conn: Connectivity = EIGHT) -> float:
    """Geometric length of a cell path under the step costs of ``conn``.

    Computed from the move counts, so equally long paths give bit-identical
    floats whatever the order of their moves.
    """
    diagonal = sum(1 for (r0, c0), (r1, c1) in zip(path, path[1:]) if r0 != r1 and c0 != c1)
    cardinal = max(len(path) - 1, 0) - diagonal
    return cardinal * conn.cardinal_cost + diagonal * conn.diagonal_cost


def astar(problem: PlanningProblem, conn: Connectivity = EIGHT,
          heuristic: str | Callable[[Cell, Cell], float] | None = None) -> SearchResult:
    """A* over the free cells of the problem map.

    The open list is ordered by (f, g, row-major index); each pop of a
    not-yet-closed node counts as one expansion.
    """
    if heuristic is None:
        heuristic = default_heuristic(conn)
    h_fn = HEURISTICS[heuristic] if isinstance(heuristic, str) else heuristic
    occ, start, goal = problem.map, problem.start, problem.goal
    w = occ.width
    t0 = time.perf_counter()

    s_idx, g_idx = start[0] * w + start[1], goal[0] * w + goal[1]
    g_best = {s_idx: 0.0}
    parents: dict[int, int] = {}
    closed: set[int] = set()
    expanded: list[int] = []
    heap = [(h_fn(start, goal), 0.0, s_idx)]
    while heap:
        _, g, idx = heapq.heappop(heap)
        if idx in closed:
            continue
        closed.add(idx)
        expanded.append(idx)
        if idx == g_idx:
            path = [idx]
            while path[-1] in parents:
                path.append(parents[path[-1]])
            path.reverse()
            cells = [divmod(i, w) for i in path]
            return SearchResult(cells, path_length(cells, conn), len(expanded),
                                time.perf_counter() - t0, True, [divmod(i, w) for i in expanded])
        for nb, step in flat_neighbors(occ, idx, conn):
            if nb in closed:
                continue
            cand = g + step
            if cand < g_best.get(nb, math.inf):
                g_best[nb] = cand
                parents[nb] = idx
                heapq.heappush(heap, (cand + h_fn(divmod(nb, w), goal), cand, nb))
    return SearchResult([], math.inf, len(expanded), time.perf_counter() - t0, False,
                        [divmod(i, w) for i in expanded])


def dijkstra(problem: PlanningProblem, conn: Connectivity = EIGHT) -> SearchResult:
    """Uniform-cost search; the exact-cost reference for A*."""
    return astar(problem, conn, heuristic=zero)


def distance_field(occ: OccupancyMap, source: Cell, conn: Connectivity = EIGHT) -> np.ndarray:
    """Exact shortest-path cost from ``source`` to every cell (inf if unreachable)."""
    dist = np.full(occ.shape, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, cell = heapq.heappop(heap)
        if d > dist[cell]:
            continue
        for nb, step in neighbors(occ, cell, conn):
            if d + step < dist[nb]:
                dist[nb] = d + step
                heapq.heappush(heap, (d + step, nb))
    return dist


def reconstruct_pathmap(result: SearchResult, dims: tuple[int, int]) -> PathMap:
    if not result.found:
        raise SearchContractError("cannot build a path map from an unsuccessful search")
    h, w = dims
    for r, c in result.path:
        if not (0 <= r < h and 0 <= c < w):
            raise SearchContractError(f"path cell {(r, c)} lies outside map dims {dims}")
    return PathMap.from_path(result.path, (h, w))
