"""Repeated-trial comparison of classic A*, uniform-guidance search and
ViT-guided search on a set of maps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .astar_classic import EIGHT, Connectivity, SearchResult, astar, path_length
from .diff_astar import GuidanceMap, plan
from .gridmap import DEFAULT_MIN_SEPARATION, OccupancyMap, PlanningProblem, sample_problem
from .vit_guidance import ModelParams, guidance_for

log = logging.getLogger(__name__)

PLANNERS = ("classic", "uniform", "vit")
DEFAULT_TRIALS = 25
ROW_FIELDS = ("map", "planner", "trials", "successes", "success_rate", "expansions_mean",
              "path_cost_mean", "wall_time_mean", "wall_time_std")
TIMING_FIELDS = ("wall_time_mean", "wall_time_std")


class BenchConfigError(ValueError):
    pass


@dataclass
class BenchRow:
    map: str
    planner: str
    trials: int
    successes: int
    success_rate: float
    expansions_mean: float
    path_cost_mean: float
    wall_time_mean: float
    wall_time_std: float


@dataclass
class BenchReport:
    seed: int
    trials: int
    rows: list[BenchRow]
    instance_hashes: dict[str, dict[str, str]] = field(default_factory=dict)
    hardware: str = ""
    config: dict = field(default_factory=dict)

    def row(self, map_name: str, planner: str) -> BenchRow:
        for r in self.rows:
            if r.map == map_name and r.planner == planner:
                return r
        raise KeyError((map_name, planner))

    def to_json(self) -> dict:
        return {"seed": self.seed, "trials": self.trials, "hardware": self.hardware,
                "config": self.config, "instance_hashes": self.instance_hashes,
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_json(cls, payload: dict) -> "BenchReport":
        return cls(int(payload["seed"]), int(payload["trials"]),
                   [BenchRow(**r) for r in payload["rows"]],
                   payload.get("instance_hashes", {}), payload.get("hardware", ""),
                   payload.get("config", {}))


def hardware_note() -> str:
    return f"{platform.machine() or 'unknown'}; {platform.system()}; python {platform.python_version()}"


def instance_hash(problems: Sequence[PlanningProblem]) -> str:
    h = hashlib.sha256()
    for p in problems:
        h.update(np.asarray(p.shape, dtype=np.int64).tobytes())
        h.update(p.map.cells.tobytes())
        h.update(np.asarray(p.start + p.goal, dtype=np.int64).tobytes())
    return h.hexdigest()


def problems_for_map(occ: OccupancyMap, trials: int, seed: int, map_index: int,
                     min_separation: float = DEFAULT_MIN_SEPARATION) -> list[PlanningProblem]:
    """The ``trials`` start/goal instances every planner sees on one map."""
    rng = np.random.default_rng([seed, map_index])
    return [sample_problem(occ, min_separation, rng) for _ in range(trials)]


Planner = Callable[[PlanningProblem], SearchResult]


def make_planner(name: str, params: ModelParams | None = None, tau: float | None = None,
                 conn: Connectivity = EIGHT) -> Planner:
    if name == "classic":
        return lambda p: astar(p, conn)
    if name == "uniform":
        return lambda p: plan(p, GuidanceMap.uniform(p.shape), tau, conn)
    if name == "vit":
        if params is None:
            raise BenchConfigError("the vit planner needs model parameters")

        def vit(p):
            with nc.no_grad():
                return plan(p, guidance_for(p, params), tau, conn)
        return vit
    raise BenchConfigError(f"unknown planner {name!r}; choose from {', '.join(PLANNERS)}")


def _timed(planner: Planner, problem: PlanningProblem) -> tuple[SearchResult | None, float]:
    """Run once; the clock covers guidance inference plus search."""
    t0 = time.perf_counter()
    try:
        result = planner(problem)
    except Exception as exc:  # a planner crash is a failed trial, not an aborted run
        log.warning("planner failed on %s -> %s: %s", problem.start, problem.goal, exc)
        result = None
    return result, time.perf_counter() - t0


def _valid(result: SearchResult | None, problem: PlanningProblem) -> bool:
    return (result is not None and result.found and bool(result.path)
            and tuple(result.path[0]) == problem.start and tuple(result.path[-1]) == problem.goal)


def run_benchmark(maps: Mapping[str, OccupancyMap] | Sequence[OccupancyMap],
                  planners: Sequence[str] = PLANNERS, trials: int = DEFAULT_TRIALS, seed: int = 0,
                  params: ModelParams | None = None, tau: float | None = None,
                  conn: Connectivity = EIGHT, min_separation: float = DEFAULT_MIN_SEPARATION,
                  config: dict | None = None) -> BenchReport:
    """Per map, draw ``trials`` problems once and run every planner on that
    same list. One untimed warm-up run per planner and map precedes the trials."""
    if trials < 1:
        raise BenchConfigError("trials must be positive")
    if not isinstance(maps, Mapping):
        maps = {f"map{i}": m for i, m in enumerate(maps)}
    runners = {name: make_planner(name, params, tau, conn) for name in planners}
    rows, hashes = [], {}
    for index, (map_name, occ) in enumerate(maps.items()):
        problems = problems_for_map(occ, trials, seed, index, min_separation)
        hashes[map_name] = {}
        for name, runner in runners.items():
            consumed = list(problems)
            hashes[map_name][name] = instance_hash(consumed)
            _timed(runner, consumed[0])
            times, expansions, costs, ok = [], [], [], 0
            for p in consumed:
                result, elapsed = _timed(runner, p)
                times.append(elapsed)
                if result is not None:
                    expansions.append(result.expansions)
                if _valid(result, p):
                    ok += 1
                    costs.append(path_length(result.path, conn))
            rows.append(BenchRow(
                map=map_name, planner=name, trials=len(consumed), successes=ok,
                success_rate=ok / len(consumed),
                expansions_mean=float(np.mean(expansions)) if expansions else math.nan,
                path_cost_mean=float(np.mean(costs)) if costs else math.nan,
                wall_time_mean=float(np.mean(times)), wall_time_std=float(np.std(times))))
    if any(len(set(h.values())) > 1 for h in hashes.values()):
        raise RuntimeError("planners consumed different problem instances")
    return BenchReport(seed, trials, rows, hashes, hardware_note(), dict(config or {}))


def export_report(report: BenchReport, path) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv`` next to ``path``."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix.lower() in (".json", ".csv") else path
    json_path, csv_path = base.with_suffix(".json"), base.with_suffix(".csv")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_json(), indent=1) + "\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("seed",) + ROW_FIELDS)
        for r in report.rows:
            d = asdict(r)
            writer.writerow([report.seed] + [repr(d[k]) if isinstance(d[k], float) else d[k]
                                             for k in ROW_FIELDS])
    return json_path, csv_path


def load_report(path) -> BenchReport:
    return BenchReport.from_json(json.loads(Path(path).read_text()))


def without_timing(payload: dict) -> dict:
    """Copy of a report payload with the wall-clock fields removed."""
    out = dict(payload)
    out["rows"] = [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in payload["rows"]]
    return out
