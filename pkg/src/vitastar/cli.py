"""Command-line interface: plan, train, bench, render, dataset.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import numcore as nc
from .astar_classic import astar, connectivity, path_length
from .bench import DEFAULT_TRIALS, PLANNERS, export_report, run_benchmark
from .diff_astar import GuidanceMap, plan
from .gridmap import DEFAULT_CUTOFF, DEFAULT_MIN_SEPARATION, MapFormatError, OccupancyMap, \
    PlanningProblem, load_map, random_map, save_image
from .pathpost import MODES, export_path, orient
from .trainer import Dataset, TrainConfig, TrainingDivergedError, build_dataset, train
from .vit_guidance import ModelConfig, ModelParams, guidance_for

log = logging.getLogger("vitastar")

MAP_SUFFIXES = (".pgm", ".png", ".json")

FREE_RGB = (255, 255, 255)
OBSTACLE_RGB = (0, 0, 0)
SEARCH_RGB = (144, 238, 144)
PATH_RGB = (220, 30, 30)
START_RGB = (30, 90, 220)
GOAL_RGB = (240, 160, 0)


class UsageError(Exception):
    pass


def parse_cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return r, c


def map_files(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in MAP_SUFFIXES)
        if not files:
            raise UsageError(f"no map files in {path}")
        return files
    if not path.exists():
        raise UsageError(f"map path {path} does not exist")
    return [path]


def load_params(path) -> ModelParams:
    if path is None:
        raise UsageError("--checkpoint is required for the vit planner")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return ModelParams.load(path)


def overlay(occ: OccupancyMap, path=(), expanded=(), start=None, goal=None) -> Image.Image:
    """RGB image at map resolution: search area tinted, path and endpoints marked."""
    rgb = np.empty(occ.shape + (3,), dtype=np.uint8)
    rgb[occ.cells == 0] = FREE_RGB
    rgb[occ.cells == 1] = OBSTACLE_RGB
    for cell in expanded:
        rgb[cell] = SEARCH_RGB
    for cell in path:
        rgb[cell] = PATH_RGB
    if start is not None:
        rgb[start] = START_RGB
    if goal is not None:
        rgb[goal] = GOAL_RGB
    return Image.fromarray(rgb, mode="RGB")


def guidance_image(guidance: GuidanceMap) -> Image.Image:
    values = np.clip(guidance.costs.data, 0.0, 1.0)
    return Image.fromarray(np.round(255 * values).astype(np.uint8), mode="L")


# subcommands ------------------------------------------------------------------

def _problem(args) -> PlanningProblem:
    if args.start is None or args.goal is None:
        raise UsageError("--start and --goal are required")
    occ = load_map(map_files(args.map)[0], args.cutoff)
    try:
        return PlanningProblem(occ, args.start, args.goal)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_plan(args) -> int:
    params = load_params(args.checkpoint) if args.planner == "vit" else None
    problem = _problem(args)
    conn = connectivity(args.connectivity)
    if args.planner == "classic":
        result = astar(problem, conn)
    elif args.planner == "uniform":
        result = plan(problem, GuidanceMap.uniform(problem.shape), args.tau, conn)
    else:
        with nc.no_grad():
            result = plan(problem, guidance_for(problem, params), args.tau, conn)
    if args.overlay:
        overlay(problem.map, result.path, result.expanded, problem.start, problem.goal).save(args.overlay)
    if not result.found:
        print(f"no path from {problem.start} to {problem.goal} "
              f"({result.expansions} expansions)", file=sys.stderr)
        return 1
    print(f"planner: {args.planner}")
    print(f"path cost: {path_length(result.path, conn):.6f}")
    print(f"steps: {result.steps}")
    print(f"expansions: {result.expansions}")
    print(f"wall time: {result.wall_time:.6f} s")
    if args.out:
        poses = orient(result.path, args.start_theta, args.goal_theta, args.orientation)
        export_path(poses, args.out)
    return 0


def _model_config(args) -> ModelConfig:
    return ModelConfig(patch_size=args.patch_size, hidden_dim=args.hidden_dim, blocks=args.blocks,
                       heads=args.heads, n_max=args.n_max, seed=args.seed)


def _dataset(args) -> Dataset:
    if args.data:
        path = Path(args.data)
        if not (path / "problems.json").exists() and not path.is_file():
            raise UsageError(f"no dataset at {path}")
        return Dataset.load(path)
    if not args.map:
        raise UsageError("either --data or --map is required")
    maps = [load_map(p, args.cutoff) for p in map_files(args.map)]
    return build_dataset(maps, args.per_map, args.seed, min_separation=args.min_separation)


def cmd_train(args) -> int:
    dataset = _dataset(args)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, patience=args.patience, tau=args.tau,
                      g_gradient=args.g_gradient, connectivity=args.connectivity,
                      augment=args.augment, seed=args.seed)
    out = Path(args.out or "run")
    try:
        result = train(dataset, _model_config(args), cfg, out)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    last = result.metrics[-1]
    print(f"epochs run: {last['epoch']}  best epoch: {result.best_epoch}")
    print(f"train loss: {result.metrics[0]['train_loss']:.6f} -> {last['train_loss']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def cmd_bench(args) -> int:
    planners = args.planner or ["classic", "uniform"]
    params = load_params(args.checkpoint) if "vit" in planners else None
    if args.map is None:
        raise UsageError("--map is required")
    maps = {p.stem: load_map(p, args.cutoff) for p in map_files(args.map)}
    config = {"maps": sorted(maps), "planners": list(planners), "trials": args.trials,
              "seed": args.seed, "tau": args.tau, "connectivity": args.connectivity,
              "checkpoint": args.checkpoint, "min_separation": args.min_separation}
    report = run_benchmark(maps, planners, args.trials, args.seed, params, args.tau,
                           connectivity(args.connectivity), args.min_separation, config)
    json_path, csv_path = export_report(report, args.out or "bench_report.json")
    for row in report.rows:
        print(f"{row.map:>16} {row.planner:>8}  expansions {row.expansions_mean:9.2f}  "
              f"cost {row.path_cost_mean:8.3f}  success {row.success_rate:.2f}  "
              f"time {row.wall_time_mean:.5f}s")
    print(f"report: {json_path} {csv_path}")
    return 0


def cmd_render(args) -> int:
    occ = load_map(map_files(args.map)[0], args.cutoff)
    out = Path(args.out or "render.png")
    if args.checkpoint:
        if args.start is None or args.goal is None:
            raise UsageError("--start and --goal are required to render guidance")
        params = load_params(args.checkpoint)
        with nc.no_grad():
            guidance_image(guidance_for(PlanningProblem(occ, args.start, args.goal), params)).save(out)
    else:
        overlay(occ, start=args.start, goal=args.goal).save(out)
    print(f"wrote {out}")
    return 0


def cmd_dataset(args) -> int:
    rng = np.random.default_rng(args.seed)
    h, w = args.size
    maps = [random_map(h, w, rng.uniform(*args.density), rng, args.style) for _ in range(args.maps)]
    dataset = build_dataset(maps, args.per_map, args.seed, min_separation=args.min_separation)
    path = dataset.save(args.out or "dataset")
    print(f"{len(dataset)} problems ({dataset.counts()}) -> {path}")
    return 0


# parser -----------------------------------------------------------------------

def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _range(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--cutoff", type=int, default=DEFAULT_CUTOFF,
                        help="gray level below which a pixel is an obstacle")
    common.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    common.add_argument("--tau", type=float, help="selection temperature (default sqrt(width))")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vitastar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["plan"] = sub.add_parser("plan", parents=[common], help="solve one planning problem")
    p.add_argument("--map", required=True)
    p.add_argument("--start", type=parse_cell)
    p.add_argument("--goal", type=parse_cell)
    p.add_argument("--planner", choices=PLANNERS, default="classic")
    p.add_argument("--checkpoint")
    p.add_argument("--overlay", help="write an RGB overlay of search area and path")
    p.add_argument("--orientation", choices=MODES, default="heading")
    p.add_argument("--start-theta", type=float, default=0.0)
    p.add_argument("--goal-theta", type=float, default=0.0)
    p.set_defaults(func=cmd_plan)

    p = subs["train"] = sub.add_parser("train", parents=[common], help="train the guidance model")
    p.add_argument("--data", help="dataset directory written by the dataset command")
    p.add_argument("--map", help="map file or directory (used when --data is absent)")
    p.add_argument("--per-map", type=int, default=5)
    p.add_argument("--min-separation", type=float, default=DEFAULT_MIN_SEPARATION)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--g-gradient", choices=("chain", "local"), default="chain")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--n-max", type=int, default=4096)
    p.set_defaults(func=cmd_train)

    p = subs["bench"] = sub.add_parser("bench", parents=[common], help="compare planners")
    p.add_argument("--map", help="map file or directory")
    p.add_argument("--planner", choices=PLANNERS, action="append",
                   help="repeat to select several (default classic and uniform)")
    p.add_argument("--checkpoint")
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--min-separation", type=float, default=DEFAULT_MIN_SEPARATION)
    p.set_defaults(func=cmd_bench)

    p = subs["render"] = sub.add_parser("render", parents=[common],
                                        help="render a map, or its guidance map with --checkpoint")
    p.add_argument("--map", required=True)
    p.add_argument("--start", type=parse_cell)
    p.add_argument("--goal", type=parse_cell)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_render)

    p = subs["dataset"] = sub.add_parser("dataset", parents=[common], help="synthesize a training corpus")
    p.add_argument("--maps", type=int, default=40)
    p.add_argument("--size", type=_size, default=(16, 16), help="HxW")
    p.add_argument("--density", type=_range, default=(0.2, 0.35), help="lo,hi obstacle fraction")
    p.add_argument("--style", choices=("noise", "blocks"), default="noise")
    p.add_argument("--per-map", type=int, default=5)
    p.add_argument("--min-separation", type=float, default=DEFAULT_MIN_SEPARATION)
    p.set_defaults(func=cmd_dataset)
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if args.command in ("plan",) and args.planner == "vit" and not args.checkpoint:
        subs[args.command].error("--planner vit requires --checkpoint")
    if args.command == "bench" and "vit" in (args.planner or []) and not args.checkpoint:
        subs[args.command].error("--planner vit requires --checkpoint")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vitastar {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MapFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"vitastar {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
