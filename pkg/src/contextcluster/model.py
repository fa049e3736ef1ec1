"""Four-stage context cluster backbone: configs, presets, forward, accounting,
checkpoints."""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .cluster import CocBlock, center_pool_matrix
from .nn import GroupNorm, Linear, Module, param
from .points import (
    ConfigError, FormatError, GridMeta, PointSet, image_to_points, isqrt_exact,
    neighbor_index, reduce_points,
)

__all__ = [
    "StageConfig", "ModelConfig", "PRESETS", "preset", "Model", "build_model",
    "forward", "count_parameters", "count_macs", "save_checkpoint",
    "load_checkpoint", "CheckpointError", "write_config", "read_config",
]


@dataclass(frozen=True)
class StageConfig:
    k_neighbors: int
    downsample_r: int
    dim: int
    regions: int
    local_centers: int
    heads: int
    head_dim: int
    mlp_ratio: int
    depth: int


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple
    num_classes: int = 1000
    input_size: tuple = (224, 224)
    no_position: bool = False
    no_cluster_op: bool = False
    single_head: bool = False
    no_partition: bool = False
    center_update_iters: int = 0
    center_proposal: str = "grid"

    def effective_stages(self):
        """Stage configs with ablation flags applied."""
        out = []
        for s in self.stages:
            if self.single_head:
                s = replace(s, heads=1)
            if self.no_partition:
                s = replace(s, regions=1)
            out.append(s)
        return tuple(out)

    def grids(self):
        """Validate the stage schedule; return each stage's grid."""
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        if self.center_proposal not in ("grid", "fps"):
            raise ConfigError(f"unknown center_proposal {self.center_proposal!r}")
        grid = GridMeta(*self.input_size)
        grids = []
        for i, s in enumerate(self.effective_stages()):
            for f in dataclasses.fields(StageConfig):
                v = getattr(s, f.name)
                if f.name != "depth" and v < 1 or v < 0:
                    raise ConfigError(f"stage {i}: {f.name}={v} must be positive")
            try:
                _, grid = neighbor_index(grid, s.k_neighbors, s.downsample_r)
                if s.depth:
                    rs = isqrt_exact(s.regions, "regions")
                    if grid.height % rs or grid.width % rs:
                        raise ConfigError(
                            f"grid {grid.height}x{grid.width} not divisible into {s.regions} regions"
                        )
                    center_pool_matrix(GridMeta(grid.height // rs, grid.width // rs), s.local_centers)
            except ConfigError as exc:
                raise ConfigError(f"stage {i}: {exc}") from None
            grids.append(grid)
        return grids


def _stages(k, r, dims, regions, centers, heads, head_dim, mlp, depth):
    return tuple(
        StageConfig(k[i], r[i], dims[i], regions[i], centers[i], heads[i], head_dim[i], mlp[i], depth[i])
        for i in range(4)
    )


_K = [16, 9, 9, 9]
_R = [16, 4, 4, 4]

PRESETS = {
    "tiny": ModelConfig(_stages(
        _K, _R, [32, 64, 196, 320], [64, 16, 4, 1], [4] * 4, [4, 4, 8, 8], [24] * 4,
        [8, 8, 4, 4], [3, 4, 5, 2])),
    "tiny_dagger": ModelConfig(_stages(
        _K, _R, [32, 64, 196, 320], [49, 49, 1, 1], [16, 4, 49, 16], [4, 4, 8, 8], [24] * 4,
        [8, 8, 4, 4], [3, 4, 5, 2])),
    "small": ModelConfig(_stages(
        _K, _R, [64, 128, 320, 512], [64, 16, 4, 1], [4] * 4, [4, 4, 8, 8], [32] * 4,
        [8, 8, 4, 4], [2, 2, 6, 2])),
    "medium": ModelConfig(_stages(
        _K, _R, [64, 128, 320, 512], [64, 16, 4, 1], [4] * 4, [6, 6, 12, 12], [32] * 4,
        [8, 8, 4, 4], [4, 4, 12, 4])),
    "micro32": ModelConfig(_stages(
        [4, 9, 9, 9], [4, 4, 4, 4], [32, 64, 128, 256], [4, 4, 1, 1], [4] * 4, [2, 2, 4, 4],
        [16] * 4, [4] * 4, [1, 1, 2, 1]), num_classes=10, input_size=(32, 32)),
}


def preset(name, **overrides):
    key = name.lower().replace("-", "_")
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[key], **overrides)


class PointReducer(Module):
    def __init__(self, d_in, cfg, rng, dtype):
        self.proj = Linear(cfg.k_neighbors * d_in, cfg.dim, rng, dtype)
        self.norm = GroupNorm(cfg.dim, dtype)
        self._k = cfg.k_neighbors
        self._r = cfg.downsample_r

    def __call__(self, ps):
        return reduce_points(
            ps, self._k, self._r, self.proj.weight, self.proj.bias,
            self.norm.weight, self.norm.bias,
        )


class Stage(Module):
    def __init__(self, d_in, cfg, rng, dtype, use_cluster):
        self.reducer = PointReducer(d_in, cfg, rng, dtype)
        self.blocks = [
            CocBlock(cfg.dim, cfg.heads, cfg.head_dim, cfg.mlp_ratio, rng, dtype, use_cluster)
            for _ in range(cfg.depth)
        ]


class Model(Module):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        self._cfg = cfg
        self._grids = cfg.grids()
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d_in = 5
        stages = []
        for i, s in enumerate(cfg.effective_stages()):
            st = Stage(d_in, s, rng, dtype, not cfg.no_cluster_op)
            for j, blk in enumerate(st.blocks):
                if blk.cluster is not None:
                    blk.cluster.tag = (i, j)
            stages.append(st)
            d_in = s.dim
        self.stages = stages
        self.norm = GroupNorm(d_in, dtype)
        self.head = Linear(d_in, cfg.num_classes, rng, dtype)

    @property
    def config(self):
        return self._cfg

    @property
    def dtype(self):
        return self._dtype

    def state_dict(self):
        return dict(self.named_parameters())

    def features(self, images):
        """Backbone output points ``(b, n_last, d_last)`` for ``(b, h, w, 3)`` images."""
        cfg = self._cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:3] != tuple(cfg.input_size):
            raise FormatError(
                f"expected images of size {tuple(cfg.input_size)}, got shape {images.shape}"
            )
        ps = image_to_points(images, dtype=self._dtype)
        if cfg.no_position:
            ps = _position_free(ps)
        for s, stage in zip(cfg.effective_stages(), self.stages):
            ps = stage.reducer(ps)
            x = ps.features
            for blk in stage.blocks:
                x = blk(
                    x, ps.grid, s.regions, s.local_centers, partition=not cfg.no_partition,
                    center_update_iters=cfg.center_update_iters,
                    center_proposal=cfg.center_proposal,
                )
            ps = PointSet(x, ps.grid)
        return ps.features

    def __call__(self, images):
        x = self.norm(self.features(images))
        return self.head(T.mean(x, axis=-2))


def _position_free(ps):
    """Drop coordinates and put points in a content-defined order (colour
    lexicographic), so the result depends only on the multiset of pixels."""
    x = ps.features.data.copy()
    x[..., 3:] = 0.0
    flat = x.reshape(-1, x.shape[-2], x.shape[-1])
    for i in range(flat.shape[0]):
        order = np.lexsort(flat[i, :, 2::-1].T)
        flat[i] = flat[i, order]
    return PointSet(T.Tensor(flat.reshape(x.shape)), ps.grid, "rgb, position removed")


def build_model(cfg, seed=0, dtype=np.float32):
    return Model(cfg, seed, dtype)


def forward(model, images):
    return model(images)


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


def count_macs(model, input_size=None, by_category=False):
    """Multiply-accumulates of one single-image forward, counted by the
    instrumented matmuls."""
    h, w = input_size or model.config.input_size
    img = np.zeros((1, h, w, 3), dtype=model.dtype)
    with T.no_grad(), T.mac_counter() as macs:
        model(img)
    return dict(macs) if by_category else int(sum(macs.values()))


# -- checkpoints -------------------------------------------------------------

MAGIC = b"COC1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    params = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, p in params:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into an ordered ``{name: float32 array}``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file ({exc})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_checkpoint(path, cfg_or_model, seed=0):
    """Load parameters into ``cfg_or_model`` (a Model, or a ModelConfig to
    build one from). Names and shapes must match exactly."""
    model = cfg_or_model if isinstance(cfg_or_model, Model) else build_model(cfg_or_model, seed)
    tensors = read_checkpoint(path)
    params = model.state_dict()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name} missing from checkpoint")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tensors[name].shape} != model shape {p.shape}"
            )
    extra = set(tensors) - set(params)
    if extra:
        raise CheckpointError(f"unexpected tensor {sorted(extra)[0]} in checkpoint")
    for name, p in params.items():
        p.data = tensors[name].astype(p.dtype)
        p.grad = None
    return model


# -- flat key/value config files ---------------------------------------------

_TOP_KEYS = {
    "num_classes": int, "input_size": lambda v: tuple(int(x) for x in v.split(",")),
    "no_position": lambda v: _bool(v), "no_cluster_op": lambda v: _bool(v),
    "single_head": lambda v: _bool(v), "no_partition": lambda v: _bool(v),
    "center_update_iters": int, "center_proposal": str,
}


def _bool(v):
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def write_config(cfg, path, base=None):
    lines = []
    if base:
        lines.append(f"preset = {base}")
    for key in _TOP_KEYS:
        v = getattr(cfg, key)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
    for i, s in enumerate(cfg.stages):
        for f in dataclasses.fields(StageConfig):
            lines.append(f"stage{i}.{f.name} = {getattr(s, f.name)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path, base=None):
    """Parse ``key = value`` lines. A ``preset`` key (or ``base``) names the
    starting config; every other key overrides one field of it."""
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            items.append((k, v))
    name = dict(items).get("preset", base)
    cfg = preset(name) if name else None
    top = {}
    stage_over: dict[int, dict] = {}
    for k, v in items:
        if k == "preset":
            continue
        if k in _TOP_KEYS:
            top[k] = _TOP_KEYS[k](v)
        elif k.startswith("stage") and "." in k:
            idx, fname = k[5:].split(".", 1)
            if fname not in StageConfig.__dataclass_fields__:
                raise ConfigError(f"{path}: unknown stage field {fname!r}")
            stage_over.setdefault(int(idx), {})[fname] = int(v)
        else:
            raise ConfigError(f"{path}: unknown key {k!r}")
    if cfg is None:
        if sorted(stage_over) != [0, 1, 2, 3] or any(
            len(d) != len(StageConfig.__dataclass_fields__) for d in stage_over.values()
        ):
            raise ConfigError(f"{path}: without a preset every stage field must be given")
        stages = tuple(StageConfig(**stage_over[i]) for i in range(4))
        return ModelConfig(stages, **top)
    stages = list(cfg.stages)
    for i, over in stage_over.items():
        if not 0 <= i < 4:
            raise ConfigError(f"{path}: stage index {i} out of range")
        stages[i] = replace(stages[i], **over)
    return replace(cfg, stages=tuple(stages), **top)
