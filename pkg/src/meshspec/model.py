"""Three-level hourglass decoder: configuration, weights, and storage.

The backbone processes the token stream at three resolutions. Coordinate
positions are grouped 3-at-a-time into point elements and 9-at-a-time
into face elements; each level runs its own causally-masked transformer
blocks with cross-attention to a fixed-length condition. Speculation
heads (one SP-Block per level, one HF-Block per level transition) and a
3-way point label head live alongside the backbone weights.

Weight layout notes:
  * a level with n blocks is split n//2 pre-shorten / n - n//2
    post-upsample (face blocks all sit in the middle),
  * matrices are stored (in_dim, out_dim) and applied as x @ W,
  * layer norms are non-affine, so every learnable tensor is either a
    matrix, an embedding table, a start vector, or a zero-initialized
    bias.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"MFLS"
FORMAT_VERSION = 1
FF_MULT = 4
ROPE_BASE = 10000.0

LEVEL_FACE = "face"
LEVEL_POINT = "point"
LEVEL_COORD = "coord"


class SplitKind(enum.Enum):
    FACE = "face"
    POINT = "point"
    COORD = "coord"


def split_schedule(position: int) -> set[SplitKind]:
    """Active split nodes when the coordinate at `position` (0-based index
    into the payload) has just been consumed."""
    if position < 0:
        raise ValueError("position must be >= 0")
    kinds = {SplitKind.COORD}
    if position % 3 == 0:
        kinds.add(SplitKind.POINT)
    if position % 9 == 0:
        kinds.add(SplitKind.FACE)
    return kinds


@dataclass(frozen=True)
class ModelConfig:
    layers_face: int = 1
    layers_point: int = 2
    layers_coord: int = 3
    model_dim: int = 64
    heads: int = 4
    bins: int = 128
    draft_face: int = 9
    draft_point: int = 3
    draft_coord: int = 2
    condition_len: int = 4
    gamma: float = 0.3

    @property
    def vocab(self) -> int:
        return self.bins + 3

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def ff_dim(self) -> int:
        return self.model_dim * FF_MULT

    def validate(self) -> None:
        if self.layers_face < 1 or self.layers_point < 1 or self.layers_coord < 1:
            raise ValueError("each level needs at least one transformer block")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if (self.model_dim // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary mixing")
        if self.draft_face % 9 != 0 or self.draft_face < 9:
            raise ValueError("draft_face must be a positive multiple of 9")
        if self.draft_point % 3 != 0 or self.draft_point < 3:
            raise ValueError("draft_point must be a positive multiple of 3")
        if self.draft_coord < 1:
            raise ValueError("draft_coord must be >= 1")
        if self.bins < 2 or self.condition_len < 1:
            raise ValueError("bins >= 2 and condition_len >= 1 required")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kwargs[key] = float(val) if key == "gamma" else int(val)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# block roles, in serialization order
BLOCK_GROUPS = ("coord_pre", "point_pre", "face", "point_post", "coord_post")
BLOCK_PARTS = (
    "sa.wq", "sa.wk", "sa.wv", "sa.wo",
    "ca.wq", "ca.wk", "ca.wv", "ca.wo",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)
SP_PARTS = ("sa.wq", "sa.wk", "sa.wv", "sa.wo", "ca.wq", "ca.wk", "ca.wv", "ca.wo", "lin")


def _group_counts(cfg: ModelConfig) -> dict[str, int]:
    return {
        "coord_pre": cfg.layers_coord // 2,
        "coord_post": cfg.layers_coord - cfg.layers_coord // 2,
        "point_pre": cfg.layers_point // 2,
        "point_post": cfg.layers_point - cfg.layers_point // 2,
        "face": cfg.layers_face,
    }


def sp_head_counts(cfg: ModelConfig) -> dict[str, int]:
    return {
        LEVEL_FACE: cfg.draft_face // 9,
        LEVEL_POINT: cfg.draft_point // 3,
        LEVEL_COORD: cfg.draft_coord,
    }


def _tensor_plan(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every tensor, in a fixed order."""
    d, ff, v = cfg.model_dim, cfg.ff_dim, cfg.vocab
    plan: list[tuple[str, tuple[int, ...], str]] = [
        ("embed", (v, d), "uniform"),
        ("start.point", (d,), "uniform"),
        ("start.face", (d,), "uniform"),
        ("shorten.point", (3 * d, d), "uniform"),
        ("shorten.face", (3 * d, d), "uniform"),
        ("up.point", (d, 3 * d), "uniform"),
        ("up.face", (d, 3 * d), "uniform"),
    ]
    counts = _group_counts(cfg)
    for group in BLOCK_GROUPS:
        for i in range(counts[group]):
            for part in BLOCK_PARTS:
                if part == "ffn.w1":
                    shape: tuple[int, ...] = (d, ff)
                elif part == "ffn.b1":
                    shape = (ff,)
                elif part == "ffn.w2":
                    shape = (ff, d)
                elif part == "ffn.b2":
                    shape = (d,)
                else:
                    shape = (d, d)
                kind = "zero" if part.startswith("ffn.b") else "uniform"
                plan.append((f"{group}.{i}.{part}", shape, kind))
    for level, n_heads in sp_head_counts(cfg).items():
        for hidx in range(n_heads):
            for part in SP_PARTS:
                plan.append((f"sp.{level}.{hidx}.{part}", (d, d), "uniform"))
    for level in (LEVEL_POINT, LEVEL_COORD):
        for t in range(3):
            plan.append((f"hf.{level}.q{t}", (d, d), "uniform"))
        plan.append((f"hf.{level}.k", (d, d), "uniform"))
        plan.append((f"hf.{level}.v", (d, d), "uniform"))
        for t in range(3):
            plan.append((f"hf.{level}.ffn{t}.w1", (d, ff), "uniform"))
            plan.append((f"hf.{level}.ffn{t}.b1", (ff,), "zero"))
            plan.append((f"hf.{level}.ffn{t}.w2", (ff, d), "uniform"))
            plan.append((f"hf.{level}.ffn{t}.b2", (d,), "zero"))
    plan.append(("head.w", (d, v), "uniform"))
    plan.append(("label.w", (d, 3), "uniform"))
    return plan


@dataclass
class BlockWeights:
    sa_wq: np.ndarray
    sa_wk: np.ndarray
    sa_wv: np.ndarray
    sa_wo: np.ndarray
    ca_wq: np.ndarray
    ca_wk: np.ndarray
    ca_wv: np.ndarray
    ca_wo: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class SpHeadWeights:
    sa_wq: np.ndarray
    sa_wk: np.ndarray
    sa_wv: np.ndarray
    sa_wo: np.ndarray
    ca_wq: np.ndarray
    ca_wk: np.ndarray
    ca_wv: np.ndarray
    ca_wo: np.ndarray
    lin: np.ndarray


@dataclass
class HfWeights:
    wq: list[np.ndarray]                       # one query projection per slot
    wk: np.ndarray
    wv: np.ndarray
    ffn: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


class HourglassModel:
    """Immutable-after-load weight container with structured views."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params = params
        self._build_views()

    def _build_views(self):
        cfg = self.config
        p = self.params
        counts = _group_counts(cfg)

        def block(group, i):
            g = lambda part: p[f"{group}.{i}.{part}"]
            return BlockWeights(
                g("sa.wq"), g("sa.wk"), g("sa.wv"), g("sa.wo"),
                g("ca.wq"), g("ca.wk"), g("ca.wv"), g("ca.wo"),
                g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"),
            )

        self.blocks = {
            group: [block(group, i) for i in range(counts[group])]
            for group in BLOCK_GROUPS
        }
        self.sp_heads = {}
        for level, n_heads in sp_head_counts(cfg).items():
            heads = []
            for hidx in range(n_heads):
                g = lambda part: p[f"sp.{level}.{hidx}.{part}"]
                heads.append(SpHeadWeights(
                    g("sa.wq"), g("sa.wk"), g("sa.wv"), g("sa.wo"),
                    g("ca.wq"), g("ca.wk"), g("ca.wv"), g("ca.wo"),
                    g("lin"),
                ))
            self.sp_heads[level] = heads
        self.hf = {}
        for level in (LEVEL_POINT, LEVEL_COORD):
            self.hf[level] = HfWeights(
                wq=[p[f"hf.{level}.q{t}"] for t in range(3)],
                wk=p[f"hf.{level}.k"],
                wv=p[f"hf.{level}.v"],
                ffn=[
                    (
                        p[f"hf.{level}.ffn{t}.w1"], p[f"hf.{level}.ffn{t}.b1"],
                        p[f"hf.{level}.ffn{t}.w2"], p[f"hf.{level}.ffn{t}.b2"],
                    )
                    for t in range(3)
                ],
            )
        self.embed = p["embed"]
        self.start_point = p["start.point"]
        self.start_face = p["start.face"]
        self.shorten_point = p["shorten.point"]
        self.shorten_face = p["shorten.face"]
        self.up_point = p["up.point"]
        self.up_face = p["up.face"]
        self.head_w = p["head.w"]
        self.label_w = p["label.w"]

    def fan_in(self, name: str) -> int:
        return self.params[name].shape[0]


def init_random(config: ModelConfig, seed: int) -> HourglassModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    keyed by a PCG64 stream so a given seed is bit-reproducible."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in _tensor_plan(config):
        if kind == "zero":
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return HourglassModel(config, params)


def serialize(model: HourglassModel, path=None) -> bytes:
    """Little-endian container: magic, version, config text block, then
    named tensors (u16 name length, name, u32 rows, u32 cols, f64 data)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_bytes = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    names = [name for name, _, _ in _tensor_plan(model.config)]
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        rows, cols = (arr.shape if arr.ndim == 2 else (1, arr.shape[0]))
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def deserialize(source) -> HourglassModel:
    """Load a model written by serialize(); rejects bad magic, unknown
    versions, and truncated files."""
    data = Path(source).read_bytes() if not isinstance(source, (bytes, bytearray)) else bytes(source)
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated model file")
        part = view[pos : pos + n]
        pos += n
        return part

    if bytes(take(4)) != MAGIC:
        raise ValueError("not a model file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_text(bytes(take(cfg_len)).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4))
    plan = {name: shape for name, shape, _ in _tensor_plan(config)}
    params: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(rows * cols * 8), dtype="<f8").astype(np.float64)
        if name not in plan:
            raise ValueError(f"unexpected tensor {name!r} in model file")
        params[name] = arr.reshape(plan[name])
    missing = set(plan) - set(params)
    if missing:
        raise ValueError(f"model file missing tensors: {sorted(missing)[:3]}...")
    if pos != len(view):
        raise ValueError("trailing bytes after last tensor")
    return HourglassModel(config, params)


# ---------------------------------------------------------------------------
# condition plumbing


def point_cloud_condition(model: HourglassModel, points: np.ndarray) -> np.ndarray:
    """Trivial point-cloud featurizer: quantize points onto the token
    grid, embed each coordinate via the token table, mean-pool each point,
    then mean-pool contiguous chunks into condition_len slots."""
    cfg = model.config
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point cloud")
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = hi - lo
    q = np.empty_like(points)
    for axis in range(3):
        if extent[axis] == 0.0:
            q[:, axis] = (cfg.bins - 1) // 2
        else:
            t = (points[:, axis] - lo[axis]) / extent[axis] * (cfg.bins - 1)
            q[:, axis] = np.clip(np.floor(t + 0.5), 0, cfg.bins - 1)
    per_point = model.embed[q.astype(np.int64)].mean(axis=1)  # (n, dim)
    slots = np.zeros((cfg.condition_len, cfg.model_dim), dtype=np.float64)
    bounds = np.linspace(0, len(points), cfg.condition_len + 1).astype(int)
    for s in range(cfg.condition_len):
        chunk = per_point[bounds[s] : bounds[s + 1]]
        if len(chunk):
            slots[s] = chunk.mean(axis=0)
    return slots


def random_condition(config: ModelConfig, seed: int) -> np.ndarray:
    """Seed-keyed random condition matrix, scaled like embeddings."""
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
    bound = 1.0 / np.sqrt(config.model_dim)
    return rng.uniform(-bound, bound, size=(config.condition_len, config.model_dim))
