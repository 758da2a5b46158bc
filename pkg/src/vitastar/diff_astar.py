"""Differentiable A* driven by a guidance map.

Node selection is the masked soft-min of ``G + H`` over the open list,
hardened by argmax in the forward pass. In the backward pass the hard
one-hot is treated as the soft distribution (straight-through).

The search runs as one fused graph node: the forward loop stores, per
step, the open cells, their soft weights and the relaxations it made; the
backward pass replays those records in reverse.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .astar_classic import EIGHT, Connectivity, SearchResult, flat_neighbors, octile_map
from .gridmap import PathMap, PlanningProblem
from .numcore import Tensor

NORMALIZERS = ("cells", "selections")
SUPERVISION = ("history", "path")
G_GRADIENTS = ("chain", "local")


class SearchContractError(RuntimeError):
    pass


@dataclass
class GuidanceMap:
    costs: Tensor

    def __post_init__(self):
        if not isinstance(self.costs, Tensor):
            self.costs = Tensor(self.costs)
        if self.costs.data.ndim != 2:
            raise ValueError("guidance must be a 2-D map")
        if not np.all(np.isfinite(self.costs.data)) or self.costs.data.min() <= 0:
            raise ValueError("guidance costs must be finite and strictly positive")

    @classmethod
    def uniform(cls, shape, value: float = 1.0) -> "GuidanceMap":
        return cls(Tensor(np.full(shape, float(value))))

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]


@dataclass
class _Step:
    selected: int
    open_idx: np.ndarray | None = None
    soft: np.ndarray | None = None
    steplen: np.ndarray | None = None
    relax: list = field(default_factory=list)


@dataclass
class SearchTrace:
    """Outcome of one guided search.

    ``history`` is the supervised map P: every selected cell (and the start),
    or only the final path cells when searching with ``supervise="path"``.
    """

    shape: tuple[int, int]
    start: tuple[int, int]
    goal: tuple[int, int]
    history: Tensor
    parents: np.ndarray
    selected: list[int]
    found: bool
    tau: float
    costs: np.ndarray
    wall_time: float = 0.0
    steps: list[_Step] = field(default_factory=list, repr=False)
    conn: Connectivity = EIGHT

    @property
    def expansions(self) -> int:
        """Closed-node count; the start is expanded at initialization."""
        return len(self.selected) + 1

    @property
    def selections(self) -> list[Tensor]:
        out = []
        for s in self.selected:
            onehot = np.zeros(self.shape)
            onehot.flat[s] = 1.0
            out.append(Tensor(onehot))
        return out

    def soft_selections(self) -> list[np.ndarray]:
        """Per-step soft distributions as dense maps (matrix engine only)."""
        out = []
        for st in self.steps:
            if st.soft is None:
                raise SearchContractError("soft weights are only kept by the matrix engine")
            dense = np.zeros(self.shape)
            dense.flat[st.open_idx] = st.soft
            out.append(dense)
        return out

    def expanded_cells(self) -> list[tuple[int, int]]:
        w = self.shape[1]
        return [self.start] + [divmod(s, w) for s in self.selected]

    def path(self) -> list[tuple[int, int]]:
        if not self.found:
            raise SearchContractError("goal was never selected")
        w = self.shape[1]
        idx = self.goal[0] * w + self.goal[1]
        out = [idx]
        while self.parents[out[-1]] >= 0:
            out.append(int(self.parents[out[-1]]))
        out.reverse()
        return [divmod(i, w) for i in out]


def default_tau(shape) -> float:
    return math.sqrt(shape[1])


def select_node(G, H, O, tau: float) -> Tensor:
    """One-hot over the open cells minimizing G + H.

    Gradients flow as if the output were the soft distribution.
    """
    soft = nc.masked_softmax(nc.add(G, H), O, tau)
    return nc.straight_through(nc.one_hot_argmax(soft.data), soft)


def _cheapest_enterable(problem: PlanningProblem, costs: np.ndarray) -> int:
    """Flat index of the cheapest free cell other than the start.

    Only those cells are ever entered, so their minimum cost bounds every
    edge cost from below.
    """
    w = problem.map.width
    masked = np.where(problem.map.cells.reshape(-1) == 0, costs, np.inf)
    masked[problem.start[0] * w + problem.start[1]] = np.inf
    return int(np.argmin(masked))


def search(problem: PlanningProblem, guidance: GuidanceMap, tau: float | None = None,
           conn: Connectivity = EIGHT, *, engine: str = "auto",
           supervise: str = "history", g_gradient: str = "chain",
           heuristic_gradient: bool = True) -> SearchTrace:
    """Guided A* from ``problem.start`` until the goal is selected.

    Edge cost into cell v is ``guidance[v] * step_length``; the heuristic is
    the octile distance scaled by the smallest guidance value over enterable
    cells, which keeps it admissible for any guidance map. ``engine="matrix"`` records the
    per-step soft selections needed for gradients; ``"heap"`` runs the same
    hard search with a priority queue. ``"auto"`` picks matrix only when
    the guidance requires gradients.
    """
    if guidance.shape != problem.shape:
        raise ValueError(f"guidance {guidance.shape} does not match map {problem.shape}")
    if supervise not in SUPERVISION:
        raise ValueError(f"supervise must be one of {SUPERVISION}")
    if g_gradient not in G_GRADIENTS:
        raise ValueError(f"g_gradient must be one of {G_GRADIENTS}")
    if tau is None:
        tau = default_tau(problem.shape)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if engine == "auto":
        engine = "matrix" if guidance.costs.requires_grad else "heap"
    if engine not in ("matrix", "heap"):
        raise ValueError(f"unknown engine {engine!r}")

    h, w = problem.shape
    n = h * w
    costs = guidance.costs.data.reshape(-1)
    octile_vec = octile_map(problem.shape, problem.goal).reshape(-1)
    argmin = _cheapest_enterable(problem, costs)
    hvec = octile_vec * float(costs[argmin])
    start = problem.start[0] * w + problem.start[1]
    goal = problem.goal[0] * w + problem.goal[1]
    occ = problem.map

    G = np.zeros(n)
    parents = np.full(n, -1, dtype=np.int64)
    steplen = np.zeros(n)
    is_open = np.zeros(n, dtype=bool)
    closed = np.zeros(n, dtype=bool)
    closed[start] = True
    matrix = engine == "matrix"
    steps: list[_Step] = []
    selected: list[int] = []

    def relax(s: int, log: list | None) -> list[int]:
        touched = []
        gs = G[s]
        for nb, ln in flat_neighbors(occ, s, conn):
            if closed[nb]:
                continue
            cand = gs + costs[nb] * ln
            if not is_open[nb] or cand < G[nb]:
                G[nb] = cand
                parents[nb] = s
                steplen[nb] = ln
                is_open[nb] = True
                touched.append(nb)
                if log is not None:
                    log.append((nb, s, ln))
        return touched

    t0 = time.perf_counter()
    init_relax: list = []
    touched = relax(start, init_relax)
    found = False
    if matrix:
        while is_open.any():
            open_idx = np.flatnonzero(is_open)
            f = G[open_idx] + hvec[open_idx]
            e = np.exp(-(f - f.min()) / tau)
            soft = e / e.sum()
            s = int(open_idx[int(np.argmax(soft))])
            step = _Step(s, open_idx, soft, steplen[open_idx] if g_gradient == "local" else None)
            steps.append(step)
            selected.append(s)
            is_open[s] = False
            closed[s] = True
            if s == goal:
                found = True
                break
            relax(s, step.relax)
    else:
        heap = [(G[i] + hvec[i], i) for i in touched]
        heapq.heapify(heap)
        while heap:
            fval, s = heapq.heappop(heap)
            if closed[s] or fval != G[s] + hvec[s]:
                continue
            selected.append(s)
            is_open[s] = False
            closed[s] = True
            if s == goal:
                found = True
                break
            for nb in relax(s, None):
                heapq.heappush(heap, (G[nb] + hvec[nb], nb))
    wall = time.perf_counter() - t0

    # supervised map P and the per-step weight each selection contributes to it
    hist = np.zeros(n)
    hist[start] = 1.0
    if supervise == "history":
        hist[selected] = 1.0
        weights = [1.0] * len(selected)
    else:
        on_path = set()
        if found:
            i = goal
            while i >= 0:
                on_path.add(i)
                i = int(parents[i])
        hist[list(on_path)] = 1.0
        weights = [1.0 if s in on_path else 0.0 for s in selected]

    trace = SearchTrace(problem.shape, problem.start, problem.goal, Tensor(hist.reshape(h, w)),
                        parents, selected, found, float(tau), costs.reshape(h, w).copy(), wall,
                        steps, conn)
    if matrix and guidance.costs.requires_grad:
        trace.history = nc.record(hist.reshape(h, w), (guidance.costs,),
                                  _search_backward(steps, weights, init_relax, n, tau, g_gradient,
                                                   problem.shape,
                                                   (argmin, octile_vec) if heuristic_gradient else None),
                                  "astar_search")
    return trace


def _search_backward(steps, weights, init_relax, n, tau, g_gradient, shape, heuristic):
    chain = g_gradient == "chain"

    def bw(grad_hist: np.ndarray):
        wv = grad_hist.reshape(-1)
        gG = np.zeros(n)
        gc = np.zeros(n)
        g_scale = 0.0
        for st, weight in zip(reversed(steps), reversed(weights)):
            if chain:
                for nb, s, ln in reversed(st.relax):
                    g = gG[nb]
                    if g != 0.0:
                        gc[nb] += g * ln
                        gG[s] += g
                        gG[nb] = 0.0
            if weight == 0.0:
                continue
            ws = wv[st.open_idx]
            p = st.soft
            gf = -(p * (ws - ws @ p)) * (weight / tau)
            if heuristic is not None:
                g_scale += gf @ heuristic[1][st.open_idx]
            if chain:
                gG[st.open_idx] += gf
            else:
                gc[st.open_idx] += gf * st.steplen
        if chain:
            for nb, _, ln in init_relax:
                gc[nb] += gG[nb] * ln
        if heuristic is not None:
            gc[heuristic[0]] += g_scale
        return (gc.reshape(shape),)

    return bw


def loss(trace: SearchTrace, truth: PathMap, normalizer: str = "cells") -> Tensor:
    """Mean absolute difference between the search map P and the target path map."""
    target = truth.cells if isinstance(truth, PathMap) else np.asarray(truth)
    if target.shape != trace.shape:
        raise ValueError(f"truth {target.shape} does not match search {trace.shape}")
    if normalizer == "cells":
        denom = trace.shape[0] * trace.shape[1]
    elif normalizer == "selections":
        denom = trace.expansions
    else:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    diff = nc.sub(trace.history, Tensor(target.astype(np.float64)))
    return nc.div_scalar(nc.sum_(nc.abs_(diff)), denom)


def backtrack(trace: SearchTrace, problem: PlanningProblem | None = None) -> SearchResult:
    """Path from the recorded parents; cost is the guidance-weighted length."""
    if not trace.found:
        raise SearchContractError("goal was never selected; nothing to backtrack")
    path = trace.path()
    if problem is not None and (path[0] != problem.start or path[-1] != problem.goal):
        raise SearchContractError("trace does not belong to this problem")
    cost = 0.0
    for a, b in zip(path, path[1:]):
        ln = trace.conn.diagonal_cost if (a[0] != b[0] and a[1] != b[1]) else trace.conn.cardinal_cost
        cost += trace.costs[b] * ln
    return SearchResult(path, cost, trace.expansions, trace.wall_time, True, trace.expanded_cells())


def plan(problem: PlanningProblem, guidance: GuidanceMap, tau: float | None = None,
         conn: Connectivity = EIGHT) -> SearchResult:
    """Inference-mode guided search returning a plain result (found=False if unreachable)."""
    trace = search(problem, guidance, tau, conn, engine="heap")
    if not trace.found:
        return SearchResult([], math.inf, trace.expansions, trace.wall_time, False,
                            trace.expanded_cells())
    return backtrack(trace, problem)
