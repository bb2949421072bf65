"""Top-k metrics, dataset evaluation, and single-image latency measurement."""

from __future__ import annotations

import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from nvt.data import ImageDataset, NormStats, eval_preprocess
from nvt.errors import ContractError
from nvt.model import Params, ViTConfig, adapt_params, forward, param_count
from nvt.noise import NoiseConfig
from nvt.tensor import no_grad


def topk_hits(logits: np.ndarray, labels, k: int) -> np.ndarray:
    """Boolean per row: is the label among the k best scores (lower index wins ties)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if b < 1:
        raise ContractError("topk needs at least one row")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c})")
    k = min(k, c)
    true = logits[np.arange(b), labels][:, None]
    cols = np.arange(c)[None, :]
    # classes ranked ahead of the label: strictly larger, or equal with a lower index
    ahead = (logits > true) | ((logits == true) & (cols < labels[:, None]))
    return ahead.sum(axis=1) < k


def topk_accuracy(logits, labels, k: int) -> float:
    return float(topk_hits(logits, labels, k).mean())


@dataclass
class MetricsReport:
    top1: float
    top5: float
    per_class_top1: list[float | None]
    per_class_count: list[int]
    sample_count: int
    k_top5: int = 5
    batch_size: int | None = None
    batch_sizes: list[int] = field(default_factory=list)
    noise: dict | None = None
    notes: list[str] = field(default_factory=list)
    latency_ms_per_image: float | None = None
    params: int | None = None

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def predict_logits(params: Params, cfg: ViTConfig, noise: NoiseConfig | None, data: ImageDataset,
                   out_size: int, stats: NormStats, batch_size: int) -> tuple[np.ndarray, list[int]]:
    """Eval-mode logits in dataset order; Q is realized for each actual batch."""
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if out_size != cfg.image_size:
        params, cfg = adapt_params(params, cfg, out_size)
    out, sizes = [], []
    with no_grad():
        for start in range(0, len(data), batch_size):
            imgs = data.images[start:start + batch_size]
            x = np.stack([eval_preprocess(img, out_size, stats) for img in imgs])
            out.append(forward(params, cfg, x, noise, "eval").data)
            sizes.append(len(imgs))
    return np.concatenate(out), sizes


def evaluate(params: Params, cfg: ViTConfig, noise: NoiseConfig | None, data: ImageDataset,
             out_size: int, stats: NormStats, batch_size: int, topk: int = 5) -> MetricsReport:
    """Top-1 / Top-k over ``data`` in dataset order (k defaults to 5, clamped to the class count)."""
    logits, sizes = predict_logits(params, cfg, noise, data, out_size, stats, batch_size)
    labels = data.labels
    hit1 = topk_hits(logits, labels, 1)
    hit5 = topk_hits(logits, labels, topk)
    per_class, counts = [], []
    for c in range(logits.shape[1]):
        mask = labels == c
        counts.append(int(mask.sum()))
        per_class.append(float(hit1[mask].mean()) if mask.any() else None)
    notes = []
    k5 = min(topk, logits.shape[1])
    if k5 < topk:
        notes.append(f"top{topk} clamped to k={k5} ({logits.shape[1]} classes)")
    if noise is not None and noise.kind in ("cyclic_mix", "cyclic_shift_add") and 1 in sizes:
        c0, c1 = noise.coefficients()
        notes.append(f"single-sample batch: cyclic Q degenerates to scaling by {c0 + c1:g}")
    return MetricsReport(
        top1=float(hit1.mean()),
        top5=float(hit5.mean()),
        per_class_top1=per_class,
        per_class_count=counts,
        sample_count=len(labels),
        k_top5=k5,
        batch_size=batch_size,
        batch_sizes=sizes,
        noise=None if noise is None else noise.to_json(),
        notes=notes,
    )


def environment_string() -> str:
    return f"{platform.python_implementation()} {platform.python_version()} numpy {np.__version__} " \
           f"{platform.machine()} {platform.processor() or platform.system()}"


def latency_bench(params: Params, cfg: ViTConfig, noise: NoiseConfig | None, resolution: int,
                  iterations: int = 20, warmup: int = 2, seed: int = 0) -> dict[str, Any]:
    """Median wall-clock milliseconds for one single-image eval forward."""
    if iterations < 10 or warmup < 1:
        raise ContractError("need iterations >= 10 and warmup >= 1")
    p, c = adapt_params(params, cfg, resolution)
    x = np.random.default_rng(seed).standard_normal((1, 3, resolution, resolution))
    times = []
    with no_grad():
        for i in range(warmup + iterations):
            t0 = time.perf_counter()
            forward(p, c, x, noise, "eval")
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    return {
        "resolution": resolution,
        "params": param_count(c),
        "median_ms": float(np.median(times) * 1e3),
        "iterations": iterations,
        "warmup": warmup,
        "environment": environment_string(),
    }
