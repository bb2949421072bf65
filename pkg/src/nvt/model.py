"""Pre-norm Vision Transformer on top of :mod:`nvt.tensor`.

Parameters are a plain ``dict[str, Tensor]`` whose names and shapes are a
pure function of :class:`ViTConfig` (see :func:`param_shapes`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from nvt import container
from nvt.errors import ConfigError, DimensionError, FormatError
from nvt.noise import NoiseConfig, build_quality_matrix, inject
from nvt.tensor import (
    Tensor,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    parameter,
    reshape,
    softmax,
    transpose,
)

IN_CHANS = 3
LN_EPS = 1e-6
INIT_STD = 0.02

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    num_classes: int
    mlp_ratio: float = 4.0
    drop_rate: float = 0.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "depth", "num_heads", "num_classes"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError("must be a positive integer", f"model.{name}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}",
                "model.patch_size",
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}",
                "model.num_heads",
            )
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes", "model.num_classes")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", "model.drop_rate")
        if self.mlp_ratio <= 0 or int(self.embed_dim * self.mlp_ratio) < 1:
            raise ConfigError("must give a positive hidden width", "model.mlp_ratio")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def with_image_size(self, image_size: int) -> "ViTConfig":
        return ViTConfig(**{**asdict(self), "image_size": image_size})

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "model")
        missing = [n for n in ("image_size", "patch_size", "embed_dim", "depth", "num_heads", "num_classes")
                   if n not in obj]
        if missing:
            raise ConfigError("missing", f"model.{missing[0]}")
        return cls(**obj)


VIT_B16 = dict(patch_size=16, embed_dim=768, depth=12, num_heads=12, mlp_ratio=4.0)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (IN_CHANS * cfg.patch_size**2, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (1, cfg.seq_len, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,),
            p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, h),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (h, d),
            p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.weight": (d,),
        "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    })
    return shapes


def param_count(cfg: ViTConfig) -> int:
    """Closed-form number of learnable scalars."""
    c, p, d, h, k = IN_CHANS, cfg.patch_size, cfg.embed_dim, cfg.hidden_dim, cfg.num_classes
    embed = c * p * p * d + d + d + cfg.seq_len * d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    head = 2 * d + d * k + k
    return embed + cfg.depth * block + head


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ViTConfig, seed: int) -> Params:
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases and CLS, unit LN scales."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            arr = np.ones(shape)
        elif name.endswith(".bias") or name == "cls_token":
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, INIT_STD)
        params[name] = parameter(arr)
    return params


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[..., C, H, W] -> [..., num_patches, C * p * p], row-major patches, channel-first within."""
    *lead, c, h, w = images.shape
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    if h % patch_size:
        raise ConfigError(f"image size {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    n = len(lead)
    x = reshape(images, (*lead, c, g, patch_size, g, patch_size))
    axes = (*range(n), n + 1, n + 3, n, n + 2, n + 4)
    x = transpose(x, axes)
    return reshape(x, (*lead, g * g, c * patch_size * patch_size))


def _attention(x: Tensor, params: Params, prefix: str, cfg: ViTConfig) -> Tensor:
    b, t, d = x.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    qkv = matmul(x, params[prefix + "qkv.weight"]) + params[prefix + "qkv.bias"]
    qkv = transpose(reshape(qkv, (b, t, 3, nh, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = reshape(out, (b, t, d))
    return matmul(out, params[prefix + "proj.weight"]) + params[prefix + "proj.bias"]


def _mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = gelu(matmul(x, params[prefix + "fc1.weight"]) + params[prefix + "fc1.bias"])
    return matmul(h, params[prefix + "fc2.weight"]) + params[prefix + "fc2.bias"]


def forward(
    params: Params,
    cfg: ViTConfig,
    batch,
    noise: NoiseConfig | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Logits [B, num_classes] for images [B, 3, H, W].

    When ``noise`` is given, its quality matrix mixes the batch at the output
    of encoder layer ``noise.layer_index`` in both train and eval mode.
    ``trace``, if a list, receives the input shape of every encoder layer.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expect = (IN_CHANS, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"batch shape {x.shape} does not match [B, {', '.join(map(str, expect))}]")
    if params["pos_embed"].shape[1] != cfg.seq_len:
        raise DimensionError(
            f"positional table has {params['pos_embed'].shape[1]} rows, config needs {cfg.seq_len}"
        )
    if noise is not None:
        if noise.layer_index is None:
            noise = noise.resolve(cfg.depth)
        if not 0 <= noise.layer_index < cfg.depth:
            raise ConfigError(f"layer_index {noise.layer_index} >= depth {cfg.depth}", "noise.layer_index")
    training = mode == "train"
    p = cfg.drop_rate
    b = x.shape[0]

    tokens = matmul(patchify(x, cfg.patch_size), params["patch_embed.weight"]) + params["patch_embed.bias"]
    cls = params["cls_token"] * Tensor(np.ones((b, 1, 1)))
    h = concat([cls, tokens], axis=1) + params["pos_embed"]
    h = dropout(h, p, rng, training)

    for i in range(cfg.depth):
        if trace is not None:
            trace.append(h.shape)
        pre = f"blocks.{i}."
        a = layer_norm(h, params[pre + "norm1.weight"], params[pre + "norm1.bias"], LN_EPS)
        h = h + dropout(_attention(a, params, pre + "attn.", cfg), p, rng, training)
        m = layer_norm(h, params[pre + "norm2.weight"], params[pre + "norm2.bias"], LN_EPS)
        h = h + dropout(_mlp(m, params, pre + "mlp."), p, rng, training)
        if noise is not None and i == noise.layer_index:
            h = inject(h, build_quality_matrix(noise, b))

    h = layer_norm(h, params["norm.weight"], params["norm.bias"], LN_EPS)
    return matmul(h[:, 0, :], params["head.weight"]) + params["head.bias"]


def resize_pos_embed(table: np.ndarray, old_grid: int, new_grid: int) -> np.ndarray:
    """Bilinearly resample the patch rows of a [1, 1 + g*g, D] table; the CLS row is kept.

    Grid corners map onto corners, so fields linear in (row, col) are reproduced exactly.
    """
    table = np.asarray(table.data if isinstance(table, Tensor) else table, dtype=np.float64)
    squeeze = table.ndim == 2
    if squeeze:
        table = table[None]
    if table.shape[1] != 1 + old_grid * old_grid:
        raise DimensionError(f"table has {table.shape[1]} rows, grid {old_grid} needs {1 + old_grid**2}")
    if old_grid == new_grid:
        out = table.copy()
        return out[0] if squeeze else out
    d = table.shape[2]
    grid = table[0, 1:].reshape(old_grid, old_grid, d)
    if old_grid == 1:
        coords = np.zeros(new_grid)
    elif new_grid == 1:
        coords = np.array([(old_grid - 1) / 2.0])
    else:
        coords = np.arange(new_grid) * ((old_grid - 1) / (new_grid - 1))
    lo = np.clip(np.floor(coords).astype(int), 0, old_grid - 1)
    hi = np.minimum(lo + 1, old_grid - 1)
    frac = coords - lo
    rows = grid[lo] * (1 - frac)[:, None, None] + grid[hi] * frac[:, None, None]
    cols = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    out = np.concatenate([table[:, :1], cols.reshape(1, new_grid * new_grid, d)], axis=1)
    return out[0] if squeeze else out


def adapt_params(params: Params, cfg: ViTConfig, image_size: int) -> tuple[Params, ViTConfig]:
    """Params/config for a new input resolution, resampling the positional table."""
    new_cfg = cfg.with_image_size(image_size)
    if new_cfg.grid == cfg.grid:
        return params, new_cfg
    out = dict(params)
    out["pos_embed"] = Tensor(
        resize_pos_embed(params["pos_embed"].data, cfg.grid, new_cfg.grid),
        requires_grad=params["pos_embed"].requires_grad,
    )
    return out, new_cfg


# checkpoints ------------------------------------------------------------------


def save_checkpoint(params: Params, cfg: ViTConfig, noise: NoiseConfig | None, metadata: dict | None, path) -> None:
    meta: dict[str, Any] = {"config": cfg.to_json(), "metadata": metadata or {}}
    if noise is not None:
        meta["noise"] = noise.to_json()
    tensors = {name: params[name].data for name in param_shapes(cfg)}
    container.save_packed(path, tensors, meta)


def load_checkpoint(path) -> tuple[Params, ViTConfig, NoiseConfig | None, dict]:
    tensors, meta = container.load_packed(path)
    if meta is None or "config" not in meta:
        raise FormatError("checkpoint has no __meta__ config entry")
    cfg = ViTConfig.from_json(meta["config"])
    noise = NoiseConfig.from_json(meta.get("noise"))
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, config needs {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, dtype=tensors[name].dtype)
    return params, cfg, noise, meta.get("metadata", {})
