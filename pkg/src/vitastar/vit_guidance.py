"""Vision-transformer encoder/decoder producing per-cell guidance costs.

Maps of any size are padded to a multiple of the patch size, cut into
row-major patches, embedded with a learned positional table (capped at
``n_max`` tokens), passed through pre-norm transformer blocks and decoded
back to one cost per cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .diff_astar import GuidanceMap
from .gridmap import Cell, OccupancyMap, PlanningProblem
from .numcore import Tensor

CHECKPOINT_FORMAT = "vitastar-checkpoint"
CHECKPOINT_VERSION = 1


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    hidden_dim: int = 64
    blocks: int = 3
    heads: int = 4
    n_max: int = 4096
    mlp_ratio: int = 2
    c_min: float = 0.05
    map_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.hidden_dim < 1 or self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be a positive multiple of heads")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 < self.c_min < 1:
            raise ValueError("c_min must lie in (0, 1)")

    @property
    def channels(self) -> int:
        return 1 if self.map_only else 3

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PatchSequence:
    patches: np.ndarray
    n_rows: int
    n_cols: int
    pad_bottom: int
    pad_right: int
    height: int
    width: int
    patch_size: int
    channels: int

    @property
    def n(self) -> int:
        return self.n_rows * self.n_cols


def patchify(grid, patch_size: int, pad_value=1.0) -> PatchSequence:
    """Cut an (H, W) or (H, W, C) array into flattened row-major S x S patches.

    Bottom/right padding uses ``pad_value`` (per channel when a sequence);
    the default pads an occupancy map with obstacles.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    arr = grid.cells if isinstance(grid, OccupancyMap) else np.asarray(grid)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    s = patch_size
    pb, pr = (-h) % s, (-w) % s
    padded = np.empty((h + pb, w + pr, c))
    padded[...] = np.broadcast_to(np.asarray(pad_value, dtype=np.float64), (c,))
    padded[:h, :w] = arr
    nr, ncol = (h + pb) // s, (w + pr) // s
    patches = padded.reshape(nr, s, ncol, s, c).transpose(0, 2, 1, 3, 4).reshape(nr * ncol, s * s * c)
    return PatchSequence(patches, nr, ncol, pb, pr, h, w, s, c)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    s, c = seq.patch_size, seq.channels
    full = seq.patches.reshape(seq.n_rows, seq.n_cols, s, s, c).transpose(0, 2, 1, 3, 4)
    full = full.reshape(seq.n_rows * s, seq.n_cols * s, c)[:seq.height, :seq.width]
    return full[:, :, 0] if c == 1 else full


def input_planes(occ: OccupancyMap, start: Cell, goal: Cell, map_only: bool = False) -> np.ndarray:
    planes = [occ.cells.astype(np.float64)]
    if not map_only:
        for cell in (start, goal):
            p = np.zeros(occ.shape)
            p[cell] = 1.0
            planes.append(p)
    return np.stack(planes, axis=-1)


class ModelParams:
    """Named weight tensors for one ModelConfig; every tensor carries a grad slot."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        d, s2 = config.hidden_dim, config.patch_size ** 2
        f = config.mlp_ratio * d
        t: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            t[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            t[f"{name}.b"] = np.zeros(fan_out)

        lin("patch", config.patch_dim, d)
        t["pos"] = rng.uniform(-0.02, 0.02, (config.n_max, d))
        for i in range(config.blocks):
            p = f"blocks.{i}"
            t[f"{p}.ln1.g"], t[f"{p}.ln1.b"] = np.ones(d), np.zeros(d)
            lin(f"{p}.attn.qkv", d, 3 * d)
            lin(f"{p}.attn.out", d, d)
            t[f"{p}.ln2.g"], t[f"{p}.ln2.b"] = np.ones(d), np.zeros(d)
            lin(f"{p}.mlp.fc1", d, f)
            lin(f"{p}.mlp.fc2", f, d)
        t["norm.g"], t["norm.b"] = np.ones(d), np.zeros(d)
        lin("decoder", d, s2)
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        nc.zero_grad(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.tensors.items()})

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "weights": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                        for k, v in self.tensors.items()},
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ModelParams":
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a guidance-model checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        config = ModelConfig.from_dict(payload["config"])
        reference = cls.init(config)
        tensors = {}
        for name, ref in reference.items():
            entry = payload["weights"][name]
            data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if data.shape != ref.shape:
                raise ValueError(f"weight {name}: shape {data.shape}, expected {ref.shape}")
            if not np.all(np.isfinite(data)):
                raise ValueError(f"weight {name} has non-finite entries")
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def _attention(x: Tensor, params: ModelParams, prefix: str, heads: int, record: list | None) -> Tensor:
    n, d = x.shape
    dh = d // heads
    qkv = nc.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = nc.transpose(nc.reshape(qkv, (n, 3, heads, dh)), (1, 2, 0, 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = nc.softmax(scores)
    if record is not None:
        record.append(weights.data)
    out = nc.reshape(nc.transpose(nc.matmul(weights, v), (1, 0, 2)), (n, d))
    return nc.linear(out, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def encode_tokens(patches, positions, params: ModelParams, attention: list | None = None) -> Tensor:
    """Transformer over explicit patch vectors and positional rows."""
    cfg = params.config
    x = nc.add(nc.linear(nc.as_tensor(patches), params["patch.w"], params["patch.b"]), positions)
    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        h = nc.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = nc.add(x, _attention(h, params, f"{p}.attn", cfg.heads, attention))
        h = nc.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = nc.gelu(nc.linear(h, params[f"{p}.mlp.fc1.w"], params[f"{p}.mlp.fc1.b"]))
        x = nc.add(x, nc.linear(h, params[f"{p}.mlp.fc2.w"], params[f"{p}.mlp.fc2.b"]))
    return nc.layer_norm(x, params["norm.g"], params["norm.b"])


def encode(seq: PatchSequence, params: ModelParams, attention: list | None = None) -> Tensor:
    cfg = params.config
    if seq.n > cfg.n_max:
        raise CapacityError(f"input needs {seq.n} patches but the positional table holds "
                            f"{cfg.n_max}; use n_max >= {seq.n}")
    if seq.patches.shape[1] != cfg.patch_dim:
        raise ValueError(f"patch vectors have length {seq.patches.shape[1]}, model expects {cfg.patch_dim}")
    return encode_tokens(seq.patches, params["pos"][:seq.n], params, attention)


def decode(embedded: Tensor, seq: PatchSequence, params: ModelParams) -> GuidanceMap:
    """Project tokens to S*S costs, reassemble, crop padding, squash into [c_min, 1]."""
    cfg = params.config
    if embedded.shape[0] != seq.n:
        raise ValueError(f"{embedded.shape[0]} embeddings for {seq.n} patches")
    s = seq.patch_size
    z = nc.linear(embedded, params["decoder.w"], params["decoder.b"])
    z = nc.reshape(nc.transpose(nc.reshape(z, (seq.n_rows, seq.n_cols, s, s)), (0, 2, 1, 3)),
                   (seq.n_rows * s, seq.n_cols * s))
    if seq.pad_bottom or seq.pad_right:
        z = z[:seq.height, :seq.width]
    costs = nc.add_scalar(nc.scale(nc.sigmoid(z), 1.0 - cfg.c_min), cfg.c_min)
    return GuidanceMap(costs)


def forward(occ: OccupancyMap, start: Cell, goal: Cell, params: ModelParams,
            attention: list | None = None) -> GuidanceMap:
    cfg = params.config
    planes = input_planes(occ, start, goal, cfg.map_only)
    pad = (1.0,) + (0.0,) * (planes.shape[-1] - 1)
    seq = patchify(planes, cfg.patch_size, pad_value=pad)
    return decode(encode(seq, params, attention), seq, params)


def guidance_for(problem: PlanningProblem, params: ModelParams) -> GuidanceMap:
    return forward(problem.map, problem.start, problem.goal, params)
