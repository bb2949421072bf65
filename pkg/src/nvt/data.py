"""Image corpora, decoding, and the train/eval preprocessing chain.

Images are ``uint8`` arrays shaped ``[3, H, W]`` until :func:`normalize`
turns them into floats. Training images go through
``rand_augment -> random_resized_crop -> normalize``; evaluation images only
through ``resize_nearest -> normalize``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from nvt import container
from nvt.errors import ConfigError, DatasetError, FormatError

log = logging.getLogger(__name__)

FILL = 128
IMAGE_SUFFIXES = (".ppm",)


# PPM ----------------------------------------------------------------------------


def _ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise FormatError(f"unsupported PPM variant {buf[:2]!r}, only binary P6 is accepted", 0)
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _ppm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PPM {what} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, need 255", pos - len(str(maxval)))
    if width < 1 or height < 1:
        raise FormatError(f"empty image {width}x{height}", 2)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).copy()


def load_ppm(path) -> np.ndarray:
    """Decode a binary P6 file into ``uint8 [3, H, W]``."""
    return decode_ppm(Path(path).read_bytes())


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    _, h, w = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + image.transpose(1, 2, 0).tobytes()


def save_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


# datasets ---------------------------------------------------------------------


@dataclass
class DatasetManifest:
    class_names: list[str]
    entries: list[tuple[str, int]]
    split: str
    skipped: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "class_names": self.class_names,
            "entries": [[p, l] for p, l in self.entries],
            "skipped": self.skipped,
        }


def _readable(path: Path) -> bool:
    try:
        with path.open("rb") as fh:
            head = fh.read(64)
    except OSError:
        return False
    if head[:2] != b"P6":
        return False
    try:
        load_ppm(path)
    except (FormatError, OSError):
        return False
    return True


def scan_image_folder(root, split: str) -> DatasetManifest:
    """Index ``root/<split>/<class>/<file>.ppm``; classes are sorted by folder name."""
    base = Path(root) / split
    if not base.is_dir():
        raise DatasetError(f"split directory {base} does not exist")
    class_dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class folders under {base}")
    entries: list[tuple[str, int]] = []
    skipped = 0
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not _readable(f):
                skipped += 1
                continue
            entries.append((str(f), label))
            count += 1
        if count == 0:
            raise DatasetError(f"class {cdir.name!r} has no readable images")
    if skipped:
        log.warning("skipped %d unreadable image files under %s", skipped, base)
    return DatasetManifest([d.name for d in class_dirs], entries, split, skipped)


@dataclass
class ImageDataset:
    images: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        idx = list(indices)
        return ImageDataset(
            [self.images[i] for i in idx],
            self.labels[idx],
            list(self.class_names),
            [self.sources[i] for i in idx] if self.sources else [],
        )


def dataset_from_manifest(manifest: DatasetManifest) -> ImageDataset:
    images = [load_ppm(p) for p, _ in manifest.entries]
    return ImageDataset(images, [l for _, l in manifest.entries], list(manifest.class_names),
                        [p for p, _ in manifest.entries])


def save_packed_dataset(path, splits: dict[str, ImageDataset]) -> None:
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"kind": "dataset", "splits": {}}
    for split, ds in splits.items():
        for i, img in enumerate(ds.images):
            tensors[f"{split}/img/{i:07d}"] = np.asarray(img, dtype=np.uint8)
        tensors[f"{split}/labels"] = ds.labels.astype(np.int64)
        meta["splits"][split] = {"class_names": ds.class_names, "count": len(ds)}
    container.save_packed(path, tensors, meta)


def load_packed_dataset(path, split: str) -> ImageDataset:
    tensors, meta = container.load_packed(path)
    if not meta or meta.get("kind") != "dataset":
        raise FormatError(f"{path} is not a packed dataset")
    if split not in meta["splits"]:
        raise DatasetError(f"packed dataset {path} has no split {split!r} (has {sorted(meta['splits'])})")
    info = meta["splits"][split]
    images = [tensors[f"{split}/img/{i:07d}"] for i in range(info["count"])]
    return ImageDataset(images, tensors[f"{split}/labels"], list(info["class_names"]),
                        [f"{path}#{split}/{i}" for i in range(info["count"])])


def load_dataset(root, split: str) -> ImageDataset:
    """A split from either an image-folder tree or a packed ``.nvt`` file."""
    root = Path(root)
    if root.is_dir():
        return dataset_from_manifest(scan_image_folder(root, split))
    if root.is_file():
        return load_packed_dataset(root, split)
    raise DatasetError(f"dataset path {root} does not exist")


# geometry ---------------------------------------------------------------------


def resize_nearest(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Nearest-neighbour resize; output pixel i samples source floor((i + 0.5) * in / out)."""
    width = height if width is None else width
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return image[:, rows[:, None], cols[None, :]]


def _warp_nearest(image: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Sample ``image`` at ``inverse @ (x, y, 1)`` about the image centre; out-of-range -> FILL."""
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    sx = inverse[0, 0] * dx + inverse[0, 1] * dy + inverse[0, 2] + cx
    sy = inverse[1, 0] * dx + inverse[1, 1] * dy + inverse[1, 2] + cy
    ix, iy = np.rint(sx).astype(np.int64), np.rint(sy).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full_like(image, FILL)
    out[:, inside] = image[:, iy[inside], ix[inside]]
    return out


def rotate(image, degrees: float):
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return _warp_nearest(image, np.array([[c, s, 0.0], [-s, c, 0.0]]))


def shear_x(image, factor: float):
    return _warp_nearest(image, np.array([[1.0, factor, 0.0], [0.0, 1.0, 0.0]]))


def shear_y(image, factor: float):
    return _warp_nearest(image, np.array([[1.0, 0.0, 0.0], [factor, 1.0, 0.0]]))


def translate_x(image, pixels: float):
    return _warp_nearest(image, np.array([[1.0, 0.0, -pixels], [0.0, 1.0, 0.0]]))


def translate_y(image, pixels: float):
    return _warp_nearest(image, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -pixels]]))


# photometric ------------------------------------------------------------------


def _blend(degenerate: np.ndarray, image: np.ndarray, factor: float) -> np.ndarray:
    out = degenerate + factor * (image.astype(np.float64) - degenerate)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def brightness(image, factor: float):
    return _blend(np.zeros(image.shape), image, factor)


def contrast(image, factor: float):
    gray = image.astype(np.float64).mean()
    return _blend(np.full(image.shape, gray), image, factor)


def solarize(image, threshold: float):
    return np.where(image >= threshold, 255 - image, image).astype(np.uint8)


def posterize(image, bits: int):
    shift = 8 - bits
    return ((image >> shift) << shift).astype(np.uint8)


# RandAugment ------------------------------------------------------------------

OPS = ("rotate", "shear_x", "shear_y", "translate_x", "translate_y",
       "brightness", "contrast", "solarize", "posterize")
MAX_MAGNITUDE = 30


@dataclass(frozen=True)
class AugmentConfig:
    num_ops: int = 2
    magnitude: int = 9
    interpolation: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.num_ops < 0:
            raise ConfigError("must be >= 0", "data.augment.num_ops")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise ConfigError(f"must lie in [0, {MAX_MAGNITUDE}]", "data.augment.magnitude")
        if self.interpolation != "nearest":
            raise ConfigError("only 'nearest' is supported", "data.augment.interpolation")


def op_parameter(op: str, magnitude: int, width: int) -> float:
    """Unsigned strength of ``op`` at ``magnitude`` (0-30 scale)."""
    level = magnitude / MAX_MAGNITUDE
    if op == "rotate":
        return 30.0 * level
    if op in ("shear_x", "shear_y"):
        return 0.3 * level
    if op in ("translate_x", "translate_y"):
        return 0.45 * width * level
    if op in ("brightness", "contrast"):
        return 0.9 * level
    if op == "posterize":
        return int(round(8 - 4 * level))
    if op == "solarize":
        return 255.0 * (1.0 - level)
    raise KeyError(op)


def apply_op(image: np.ndarray, op: str, magnitude: int, sign: float = 1.0) -> np.ndarray:
    v = op_parameter(op, magnitude, image.shape[2])
    if op == "rotate":
        return rotate(image, sign * v)
    if op == "shear_x":
        return shear_x(image, sign * v)
    if op == "shear_y":
        return shear_y(image, sign * v)
    if op == "translate_x":
        return translate_x(image, sign * v)
    if op == "translate_y":
        return translate_y(image, sign * v)
    if op == "brightness":
        return brightness(image, 1.0 + sign * v)
    if op == "contrast":
        return contrast(image, 1.0 + sign * v)
    if op == "solarize":
        return solarize(image, v)
    if op == "posterize":
        return posterize(image, v)
    raise KeyError(op)


def rand_augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                 applied: list | None = None) -> np.ndarray:
    """Apply ``cfg.num_ops`` ops drawn uniformly with replacement, each with a random sign."""
    out = image
    for _ in range(cfg.num_ops):
        op = OPS[int(rng.integers(len(OPS)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = apply_op(out, op, cfg.magnitude, sign)
        if applied is not None:
            applied.append((op, sign))
    return out


def random_resized_crop(
    image: np.ndarray,
    out_size: int,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.7, 1.0),
    ratio_range: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    if out_size < 1:
        raise ConfigError("out_size must be >= 1")
    _, h, w = image.shape
    area = h * w
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*scale_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return resize_nearest(image[:, top:top + ch, left:left + cw], out_size)
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return resize_nearest(image[:, top:top + side, left:left + side], out_size)


# normalization ----------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("need 3 channel values", "data.norm")
        if any(not s > 0 for s in self.std):
            raise ConfigError("std must be positive per channel", "data.norm.std")

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(tuple(float(v) for v in obj["mean"]), tuple(float(v) for v in obj["std"]))


def compute_norm_stats(images: Sequence[np.ndarray]) -> NormStats:
    """Per-channel mean/std of intensities scaled to [0, 1], pooled over all pixels."""
    if not images:
        raise DatasetError("cannot compute normalization stats of an empty set")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        x = img.astype(np.float64) / 255.0
        total += x.sum(axis=(1, 2))
        total_sq += (x * x).sum(axis=(1, 2))
        count += x.shape[1] * x.shape[2]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()))


def normalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    return (image.astype(np.float64) / 255.0 - mean) / std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    return (x * std + mean) * 255.0


def eval_preprocess(image: np.ndarray, out_size: int, stats: NormStats) -> np.ndarray:
    return normalize(resize_nearest(image, out_size), stats)


def train_preprocess(image: np.ndarray, out_size: int, stats: NormStats, augment: AugmentConfig,
                     rng: np.random.Generator, scale_range=(0.7, 1.0)) -> np.ndarray:
    augmented = rand_augment(image, augment, rng)
    cropped = random_resized_crop(augmented, out_size, rng, scale_range)
    return normalize(cropped, stats)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream so a batch's bytes depend only on (seed, epoch, index)."""
    return np.random.default_rng([seed, epoch, index, 0xA06])


def iter_batches(n: int, batch_size: int, order: np.ndarray | None = None) -> Iterator[np.ndarray]:
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# synthetic corpus -------------------------------------------------------------

_FAMILIES = ("rows", "columns", "diagonal", "rings")


def _texture(family: str, cycles: float, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    if family == "rows":
        arg = ys
    elif family == "columns":
        arg = xs
    elif family == "diagonal":
        arg = (xs + ys) / math.sqrt(2)
    else:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        arg = np.hypot(ys - cy, xs - cx)
    return 0.5 + 0.5 * np.cos(2 * np.pi * cycles * arg + phase)


def synth_dataset(num_classes: int, per_class: int, image_size: int, seed: int) -> ImageDataset:
    """Procedural textures, one (pattern family, frequency band) pair per class.

    Phase, colours and pixel noise are random per image, so every class has
    the same expected image and a linear model on raw pixels cannot separate
    them; orientation and frequency must be detected.
    """
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng([seed, 0x5EED])
    images, labels = [], []
    for c in range(num_classes):
        family = _FAMILIES[c % len(_FAMILIES)]
        band = c // len(_FAMILIES)
        base_cycles = 2.0 + 2.5 * band
        for _ in range(per_class):
            cycles = base_cycles * rng.uniform(0.9, 1.1)
            t = _texture(family, cycles, image_size, rng)
            dark = rng.uniform(0, 90, size=3)
            light = rng.uniform(165, 255, size=3)
            if rng.random() < 0.5:
                dark, light = light, dark
            img = dark[:, None, None] + (light - dark)[:, None, None] * t[None]
            img = img + rng.normal(0, 12, size=img.shape)
            images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            labels.append(c)
    # zero-padded prefix keeps lexicographic folder order equal to label order
    names = [f"c{c:03d}_{_FAMILIES[c % len(_FAMILIES)]}{c // len(_FAMILIES)}" for c in range(num_classes)]
    return ImageDataset(images, labels, names, [f"synth:{seed}/{i}" for i in range(len(labels))])
