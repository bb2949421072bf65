"""AdamW + cosine schedule fine-tuning loop with best-by-val-Top-1 checkpointing."""

from __future__ import annotations

import json
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from nvt.data import AugmentConfig, ImageDataset, NormStats, sample_rng, train_preprocess
from nvt.errors import ConfigError, ContractError, DatasetError, TrainingAborted
from nvt.evaluate import evaluate, topk_accuracy
from nvt.model import Params, ViTConfig, forward, save_checkpoint
from nvt.noise import NoiseConfig
from nvt.tensor import label_smoothing_ce

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    base_lr: float = 1e-5
    epochs: int = 30
    smoothing: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("must be a positive integer", "train.batch_size")
        if not self.base_lr > 0:
            raise ConfigError("must be > 0", "train.base_lr")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("must lie in [0, 1)", "train.smoothing")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "train.weight_decay")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must lie in [0, 1)", f"train.{name}")
        if not self.adam_eps > 0:
            raise ConfigError("must be > 0", "train.adam_eps")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "TrainConfig":
        extra = set(obj) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "train")
        if "batch_size" not in obj:
            raise ConfigError("missing (the batch size has no default)", "train.batch_size")
        return cls(**obj)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total)) / 2, no warmup."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"need 0 <= step <= total_steps, total >= 1 (got {step}/{total_steps})")
    if step == total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update with decay decoupled from the adaptive step."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainHistory:
    rows: list[dict[str, Any]] = field(default_factory=list)
    best_epoch: int | None = None

    def best_row(self) -> dict[str, Any]:
        return self.rows[self.best_epoch]


def _thread_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(1)


def train(
    params: Params,
    model_cfg: ViTConfig,
    noise: NoiseConfig | None,
    train_data: ImageDataset,
    val_data: ImageDataset,
    cfg: TrainConfig,
    *,
    norm: NormStats,
    augment: AugmentConfig,
    out_dir,
    scale_range: tuple[float, float] = (0.7, 1.0),
    extra_meta: dict | None = None,
) -> tuple[Path, TrainHistory]:
    """Fine-tune ``params`` in place and keep the checkpoint with the best val Top-1.

    Writes ``history.jsonl`` (one object per epoch) and ``best.nvt`` to
    ``out_dir``. Returns the checkpoint path and the history.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise DatasetError("training and validation sets must be non-empty")
    if train_data.num_classes != model_cfg.num_classes:
        raise ConfigError(
            f"dataset has {train_data.num_classes} classes, model has {model_cfg.num_classes}",
            "model.num_classes",
        )
    if noise is not None:
        noise = noise.resolve(model_cfg.depth)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.nvt"
    history_path = out_dir / "history.jsonl"
    history_path.write_text("")

    n = len(train_data)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    state = OptimizerState.zeros_like(params)
    history = TrainHistory()
    best = -1.0
    step = 0
    size = model_cfg.image_size

    with _thread_limit(cfg.deterministic):
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            loss_sum, correct, lr = 0.0, 0, 0.0
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                x = np.stack([
                    train_preprocess(train_data.images[i], size, norm, augment,
                                     sample_rng(augment.seed + cfg.seed, epoch, int(i)), scale_range)
                    for i in idx
                ])
                y = train_data.labels[idx]
                lr = cosine_lr(step, total, cfg.base_lr)
                drop_rng = np.random.default_rng([cfg.seed, step, 0xD0])
                logits = forward(params, model_cfg, x, noise, "train", drop_rng)
                loss = label_smoothing_ce(logits, y, cfg.smoothing)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingAborted(epoch, bi, value, lr)
                for p in params.values():
                    p.grad = None
                loss.backward()
                adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None},
                           state, lr, cfg)
                loss_sum += value * len(idx)
                correct += int(round(topk_accuracy(logits.data, y, 1) * len(idx)))
                step += 1

            report = evaluate(params, model_cfg, noise, val_data, size, norm, cfg.batch_size)
            row = {
                "epoch": epoch,
                "train_loss": loss_sum / n,
                "train_acc": correct / n,
                "val_top1": report.top1,
                "val_top5": report.top5,
                "lr": lr,
            }
            improved = report.top1 > best
            if improved:
                best = report.top1
                history.best_epoch = epoch
                meta = {
                    "epoch": epoch,
                    "best_val_top1": report.top1,
                    "norm": norm.to_json(),
                    "eval_batch_size": cfg.batch_size,
                    **(extra_meta or {}),
                }
                save_checkpoint(params, model_cfg, noise, meta, ckpt_path)
            row["best_epoch"] = history.best_epoch
            history.rows.append(row)
            with history_path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            log.info("epoch %d loss %.4f train_acc %.3f val_top1 %.3f%s", epoch, row["train_loss"],
                     row["train_acc"], row["val_top1"], " *" if improved else "")
    for p in params.values():
        p.grad = None
    return ckpt_path, history
