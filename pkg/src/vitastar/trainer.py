"""Dataset synthesis and RMSprop training of the guidance model through the
differentiable search."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .astar_classic import Connectivity, connectivity, dijkstra
from .diff_astar import GuidanceMap, loss as search_loss, search
from .gridmap import (OccupancyMap, PlanningProblem, problem_from_record, problem_record,
                      sample_problem, save_image)
from .vit_guidance import ModelConfig, ModelParams, guidance_for

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "val_expansions_mean")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Dataset:
    problems: list[PlanningProblem]
    splits: list[str]
    seed: int = 0
    map_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.problems) != len(self.splits):
            raise ValueError("one split tag per problem")
        for p in self.problems:
            if p.truth is None or not p.truth.connects(p.start, p.goal):
                raise ValueError("every problem needs a truth path connecting start and goal")

    def __len__(self) -> int:
        return len(self.problems)

    def split(self, name: str) -> list[PlanningProblem]:
        return [p for p, s in zip(self.problems, self.splits) if s == name]

    def counts(self) -> dict[str, int]:
        return {name: self.splits.count(name) for name in SPLITS}

    def records(self) -> list[dict]:
        out = []
        for i, (p, s) in enumerate(zip(self.problems, self.splits)):
            map_id = self.map_ids[i] if self.map_ids else i
            rec = problem_record(p, f"maps/map_{map_id:04d}.pgm")
            rec["split"] = s
            out.append(rec)
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p, s in zip(self.problems, self.splits):
            h.update(p.map.cells.tobytes())
            h.update(json.dumps([p.start, p.goal, list(p.truth_path), s]).encode())
        return h.hexdigest()[:16]

    def save(self, directory) -> Path:
        """Write ``maps/*.pgm`` and ``problems.json`` under ``directory``."""
        directory = Path(directory)
        (directory / "maps").mkdir(parents=True, exist_ok=True)
        written = set()
        for i, p in enumerate(self.problems):
            map_id = self.map_ids[i] if self.map_ids else i
            if map_id not in written:
                save_image(p.map, directory / "maps" / f"map_{map_id:04d}.pgm")
                written.add(map_id)
        out = directory / "problems.json"
        out.write_text(json.dumps({"seed": self.seed, "problems": self.records()}, indent=1))
        return out

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        if path.is_dir():
            path = path / "problems.json"
        payload = json.loads(path.read_text())
        cache: dict = {}
        problems, splits, ids = [], [], []
        for rec in payload["problems"]:
            problems.append(problem_from_record(rec, base_dir=path.parent, cache=cache))
            splits.append(rec.get("split", "train"))
            ids.append(list(cache).index(path.parent / rec["map_path"]))
        return cls(problems, splits, int(payload.get("seed", 0)), ids)


def build_dataset(maps: Sequence[OccupancyMap], per_map: int, seed: int,
                  fractions: tuple[float, float, float] = (0.65, 0.10, 0.25),
                  min_separation: float = 0.5, conn: Connectivity | None = None) -> Dataset:
    """Sample ``per_map`` problems on every map, label them with Dijkstra
    paths and tag train/val/test splits in the given proportions."""
    conn = conn or connectivity(8)
    rng = np.random.default_rng(seed)
    problems, ids = [], []
    for map_id, occ in enumerate(maps):
        for _ in range(per_map):
            p = sample_problem(occ, min_separation, rng)
            result = dijkstra(p, conn)
            problems.append(p.with_truth(result.path))
            ids.append(map_id)
    n = len(problems)
    n_test = int(round(fractions[2] * n))
    n_val = int(round(fractions[1] * n))
    order = rng.permutation(n)
    splits = ["train"] * n
    for rank, i in enumerate(order):
        if rank < n_test:
            splits[i] = "test"
        elif rank < n_test + n_val:
            splits[i] = "val"
    return Dataset(problems, splits, seed, ids)


def dihedral(problem: PlanningProblem, k: int) -> PlanningProblem:
    """Apply one of the 8 square symmetries (k//4 flips, k%4 quarter turns)."""
    if k == 0:
        return problem

    def tf(a):
        a = np.rot90(a, k % 4)
        return np.fliplr(a) if k >= 4 else a

    h, w = problem.shape
    moved = tf(np.arange(h * w).reshape(h, w))
    nw = moved.shape[1]
    where = np.empty(h * w, dtype=np.int64)
    where[moved.reshape(-1)] = np.arange(h * w)

    def cell(rc):
        return divmod(int(where[rc[0] * w + rc[1]]), nw)

    occ = OccupancyMap(np.ascontiguousarray(tf(problem.map.cells)))
    out = PlanningProblem(occ, cell(problem.start), cell(problem.goal))
    if problem.truth_path is not None:
        out = out.with_truth([cell(c) for c in problem.truth_path])
    return out


# optimization -----------------------------------------------------------------

@dataclass
class OptState:
    lr: float = 0.001
    rho: float = 0.99
    eps: float = 1e-8
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def rmsprop_step(params, grads: dict[str, np.ndarray], state: OptState, lr: float | None = None) -> bool:
    """One RMSprop update in place. Returns False (and leaves everything
    untouched) when any gradient is non-finite."""
    lr = state.lr if lr is None else lr
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {tensors[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("skipping update: non-finite gradient in %s", name)
            return False
    for name, g in grads.items():
        v = state.square_avg.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = state.rho * v + (1.0 - state.rho) * g * g
        state.square_avg[name] = v
        tensors[name].data -= lr * g / (np.sqrt(v) + state.eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.001
    rho: float = 0.99
    eps: float = 1e-8
    clip: float = 5.0
    patience: int = 25
    tau: float | None = None
    normalizer: str = "cells"
    supervise: str = "history"
    g_gradient: str = "chain"
    connectivity: int = 8
    augment: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    best_epoch: int
    stopped_early: bool


def evaluate(params: ModelParams, problems: Sequence[PlanningProblem], cfg: TrainConfig) -> tuple[float, float]:
    """Mean loss and mean node expansions over ``problems`` (no gradients)."""
    if not problems:
        return math.nan, math.nan
    conn = connectivity(cfg.connectivity)
    losses, expansions = [], []
    with nc.no_grad():
        for p in problems:
            g = guidance_for(p, params)
            trace = search(p, g, cfg.tau, conn, engine="heap", supervise=cfg.supervise)
            losses.append(search_loss(trace, p.truth, cfg.normalizer).item())
            expansions.append(trace.expansions)
    return float(np.mean(losses)), float(np.mean(expansions))


def train_step(params: ModelParams, problem: PlanningProblem, state: OptState, cfg: TrainConfig) -> float:
    conn = connectivity(cfg.connectivity)
    params.zero_grad()
    guidance = guidance_for(problem, params)
    trace = search(problem, guidance, cfg.tau, conn, engine="matrix",
                   supervise=cfg.supervise, g_gradient=cfg.g_gradient)
    loss = search_loss(trace, problem.truth, cfg.normalizer)
    value = loss.item()
    if not math.isfinite(value):
        return value
    nc.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    clip_global_norm(grads, cfg.clip)
    rmsprop_step(params, grads, state)
    return value


def metrics_csv(metrics: list[dict], header: dict | None = None) -> str:
    buf = io.StringIO()
    for key, value in (header or {}).items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in metrics:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def train(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig | None = None,
          out_dir=None, params: ModelParams | None = None) -> TrainResult:
    """Train until ``cfg.epochs`` or until validation expansions stop improving
    for ``cfg.patience`` epochs. Row 0 of the metrics evaluates the initial
    weights. Writes ``checkpoint.json`` (best validation epoch) and
    ``metrics.csv`` when ``out_dir`` is given."""
    cfg = cfg or TrainConfig()
    train_set = dataset.split("train")
    if not train_set:
        raise ValueError("dataset has no training problems")
    val_set = dataset.split("val") or train_set
    params = params or ModelParams.init(model_config)
    state = OptState(cfg.lr, cfg.rho, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    header = {"dataset": {"fingerprint": dataset.fingerprint(), "seed": dataset.seed, **dataset.counts()},
              "model": asdict(model_config), "train": asdict(cfg)}

    def flush(best: ModelParams, metrics: list[dict]) -> None:
        if out_dir is not None:
            best.save(out_dir / "checkpoint.json")
            (out_dir / "metrics.csv").write_text(metrics_csv(metrics, header))

    train_loss0, _ = evaluate(params, train_set, cfg)
    val_loss, val_exp = evaluate(params, val_set, cfg)
    metrics = [{"epoch": 0, "train_loss": train_loss0, "val_loss": val_loss, "val_expansions_mean": val_exp}]
    best, best_key, best_epoch, stale = params.copy(), (val_exp, val_loss), 0, 0
    stopped_early = False
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for i in rng.permutation(len(train_set)):
            problem = train_set[i]
            if cfg.augment:
                problem = dihedral(problem, int(rng.integers(8)))
            value = train_step(params, problem, state, cfg)
            if not math.isfinite(value):
                flush(best, metrics)
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}; best checkpoint kept")
            losses.append(value)
        val_loss, val_exp = evaluate(params, val_set, cfg)
        metrics.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_expansions_mean": val_exp})
        log.info("epoch %d train_loss %.5f val_loss %.5f val_exp %.2f",
                 epoch, metrics[-1]["train_loss"], val_loss, val_exp)
        stale = 0 if val_exp < best_key[0] else stale + 1
        if (val_exp, val_loss) < best_key:
            best, best_key, best_epoch = params.copy(), (val_exp, val_loss), epoch
        if stale >= cfg.patience:
            stopped_early = True
            break
    flush(best, metrics)
    return TrainResult(best, metrics, best_epoch, stopped_early)
