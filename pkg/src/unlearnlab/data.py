"""Datasets, on-disk formats, synthetic corpora, forget splits and augmentation."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ContractError, FormatError, IntegrityError

SCENARIOS = ("NoAug", "Default", "DefaultRA")
SPLITS = ("train", "val", "test")
DATASET_FORMAT = "unlearnlab-dataset/1"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    source: str = "memory"
    seed: int | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise IntegrityError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise IntegrityError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0]
            raise IntegrityError(f"{self.split}: label {int(bad)} outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise IntegrityError(f"{self.split}: pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            self.split,
            self.source,
            self.seed,
            self.class_names,
        )


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: np.dtype(np.uint8)}


def load_idx(path) -> np.ndarray:
    """Decode an IDX file.

    Layout: ``00 00 <type> <rank>`` then ``rank`` big-endian uint32 dimension
    sizes, then the row-major payload. Only type 0x08 (unsigned byte) is
    accepted. Rank-1 files are returned as int64 labels; rank-3 files become
    float32 images [N, 1, H, W] and rank-4 files [N, C, H, W], scaled by 1/255.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("truncated IDX header", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError("bad IDX magic: first two bytes must be zero", offset=0)
    type_byte, rank = raw[2], raw[3]
    if type_byte not in _IDX_TYPES:
        raise FormatError(f"unsupported IDX type byte 0x{type_byte:02X}", offset=2)
    if rank not in (1, 3, 4):
        raise FormatError(f"unsupported IDX rank {rank}", offset=3)
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError("truncated IDX dimension table", offset=len(raw))
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise FormatError(f"truncated IDX payload: need {count} bytes, have {len(raw) - header}", offset=len(raw))
    if len(raw) - header > count:
        raise FormatError("trailing bytes after IDX payload", offset=header + count)
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if rank == 1:
        return payload.astype(np.int64)
    if rank == 3:
        payload = payload[:, None, :, :]
    return payload.astype(np.float32) / np.float32(255.0)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"write_idx only writes unsigned bytes, got {array.dtype}")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def images_to_bytes(images: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] floats to uint8 so that ``load_idx`` inverts it exactly."""
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_idx_dataset(images_path, labels_path, num_classes: int, split: str = "train") -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 4 or labels.ndim != 1:
        raise IntegrityError(f"{split}: expected image and label IDX files, got ranks {images.ndim}/{labels.ndim}")
    return Dataset(images, labels, num_classes, split, source=f"idx:{Path(images_path).name}")


# ---------------------------------------------------------------- manifest directories


def write_manifest_dataset(directory, splits: dict[str, Dataset], pixel_dtype: str = "float32", class_names=None) -> Path:
    """Write a manifest dataset directory.

    ``manifest.json`` records the class count, class names, image shape
    [C, H, W], pixel dtype and per-split file names and counts. Images are
    raw little-endian float32 (or uint8) [N, C, H, W]; labels are raw
    little-endian int32.
    """
    if pixel_dtype not in ("float32", "uint8"):
        raise ConfigError(f"pixel_dtype must be float32 or uint8, got {pixel_dtype!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {
        "format": DATASET_FORMAT,
        "num_classes": first.num_classes,
        "class_names": class_names or first.class_names or [str(i) for i in range(first.num_classes)],
        "image_shape": list(first.images.shape[1:]),
        "pixel_dtype": pixel_dtype,
        "source": first.source,
        "seed": first.seed,
        "splits": {},
    }
    for name, ds in splits.items():
        img_file, lab_file = f"{name}_images.bin", f"{name}_labels.bin"
        if pixel_dtype == "uint8":
            pixels = images_to_bytes(ds.images)
        else:
            pixels = np.ascontiguousarray(ds.images, dtype="<f4")
        (directory / img_file).write_bytes(pixels.tobytes())
        (directory / lab_file).write_bytes(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
        manifest["splits"][name] = {"images": img_file, "labels": lab_file, "count": len(ds)}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_manifest_dataset(directory) -> dict[str, Dataset]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    num_classes = int(manifest["num_classes"])
    shape = tuple(int(s) for s in manifest["image_shape"])
    pixel_dtype = manifest.get("pixel_dtype", "float32")
    item = {"float32": 4, "uint8": 1}.get(pixel_dtype)
    if item is None:
        raise IntegrityError(f"unsupported pixel dtype {pixel_dtype!r}")
    out = {}
    for split, entry in manifest["splits"].items():
        img_path, lab_path = directory / entry["images"], directory / entry["labels"]
        for p in (img_path, lab_path):
            if not p.exists():
                raise FileNotFoundError(f"split {split!r}: missing file {p.name}")
        n = int(entry["count"])
        img_raw, lab_raw = img_path.read_bytes(), lab_path.read_bytes()
        if len(img_raw) != n * item * int(np.prod(shape)):
            raise IntegrityError(
                f"split {split!r}: image file has {len(img_raw)} bytes, manifest implies "
                f"{n} x {list(shape)} x {item} = {n * item * int(np.prod(shape))}"
            )
        if len(lab_raw) != 4 * n:
            raise IntegrityError(f"split {split!r}: label file has {len(lab_raw)} bytes, expected {4 * n}")
        if pixel_dtype == "uint8":
            images = np.frombuffer(img_raw, dtype=np.uint8).astype(np.float32) / np.float32(255.0)
        else:
            images = np.frombuffer(img_raw, dtype="<f4").astype(np.float32)
        labels = np.frombuffer(lab_raw, dtype="<i4").astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            bad = labels[(labels < 0) | (labels >= num_classes)][0]
            raise IntegrityError(f"split {split!r}: label {int(bad)} outside [0, {num_classes})")
        out[split] = Dataset(
            images.reshape((n,) + shape),
            labels,
            num_classes,
            split,
            source=manifest.get("source") or f"manifest:{directory.name}",
            seed=manifest.get("seed"),
            class_names=manifest.get("class_names"),
        )
    return out


# ---------------------------------------------------------------- synthetic corpora


def class_template(k: int, classes: int, size: int) -> np.ndarray:
    """Noise-free [size, size] pattern for class ``k``.

    Classes cycle through three families (oriented bar, off-centre blob,
    ring); the family parameters depend on ``k`` so every class differs.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    family, variant = k % 3, k // 3
    if family == 0:
        angle = math.pi * (k / classes + 0.125 * variant)
        d = -(xx - c) * math.sin(angle) + (yy - c) * math.cos(angle)
        pattern = np.exp(-((d / (0.09 * size)) ** 2))
    elif family == 1:
        phi = 2 * math.pi * k / classes
        r = 0.22 * size
        bx, by = c + r * math.cos(phi), c + r * math.sin(phi)
        pattern = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * (0.12 * size) ** 2))
    else:
        radius = size * (0.22 + 0.08 * (variant % 3))
        dist = np.hypot(xx - c, yy - c)
        pattern = np.exp(-(((dist - radius) / (0.07 * size)) ** 2))
    return (0.1 + 0.8 * pattern).astype(np.float32)


def generate_synthetic(
    classes: int,
    per_class: int,
    image_size: int = 16,
    noise: float = 0.1,
    seed: int = 0,
    channels: int = 1,
    fractions: tuple[float, float, float] = (0.625, 0.125, 0.25),
) -> tuple[Dataset, Dataset, Dataset]:
    """Template-plus-Gaussian-noise corpus split into (train, val, test).

    ``per_class`` images of each class are divided between the splits by
    ``fractions`` (default 5:1:2); pixels are clipped to [0, 1].
    """
    if classes < 2:
        raise ConfigError(f"classes must be >= 2, got {classes}")
    if per_class < 1 or image_size < 1 or channels < 1 or noise < 0:
        raise ConfigError("per_class, image_size and channels must be positive and noise non-negative")
    counts = [int(per_class * f) for f in fractions[:2]]
    counts.append(per_class - sum(counts))
    templates = np.stack([class_template(k, classes, image_size) for k in range(classes)])
    templates = np.repeat(templates[:, None], channels, axis=1)
    out = []
    for split, n in zip(SPLITS, counts):
        gen = rngmod.stream(seed, "synthetic", split)
        labels = np.repeat(np.arange(classes), n)
        labels = labels[gen.permutation(len(labels))]
        images = templates[labels] + noise * gen.standard_normal((len(labels), channels, image_size, image_size))
        images = np.clip(images, 0.0, 1.0).astype(np.float32)
        out.append(Dataset(images, labels, classes, split, source=f"synthetic-{classes}c-{image_size}px", seed=seed))
    return tuple(out)


def nearest_template_accuracy(data: Dataset, image_size: int | None = None) -> float:
    """Accuracy of assigning each image to the closest noise-free template."""
    size = image_size or data.images.shape[-1]
    templates = np.stack([class_template(k, data.num_classes, size) for k in range(data.num_classes)])
    flat = data.images.mean(axis=1).reshape(len(data), -1).astype(np.float64)
    tflat = templates.reshape(data.num_classes, -1).astype(np.float64)
    d = ((flat[:, None, :] - tflat[None]) ** 2).sum(-1)
    return 100.0 * float((d.argmin(1) == data.labels).mean())


# ---------------------------------------------------------------- forget split


@dataclass
class ForgetPartition:
    forget: np.ndarray
    retain: np.ndarray
    rate: float
    seed: int

    def __post_init__(self):
        self.forget = np.asarray(self.forget, dtype=np.int64)
        self.retain = np.asarray(self.retain, dtype=np.int64)


def forget_count(rate: float, n: int) -> int:
    """``floor(rate * n)`` using the decimal value of ``rate`` (so 0.29 * 100 is 29)."""
    return int(math.floor(Decimal(repr(float(rate))) * n))


def split_forget(train: Dataset | int, rate: float, seed: int, stratified: bool = False) -> ForgetPartition:
    """Uniformly sample ``floor(rate * N)`` forget indices without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"forget rate must lie in [0, 1], got {rate}")
    n = train if isinstance(train, int) else len(train)
    k = forget_count(rate, n)
    gen = rngmod.stream(seed, "forget")
    if stratified and not isinstance(train, int):
        forget = _stratified_sample(train.labels, k, gen)
    else:
        forget = gen.choice(n, size=k, replace=False) if k else np.empty(0, np.int64)
    forget = np.sort(forget)
    keep = np.ones(n, dtype=bool)
    keep[forget] = False
    return ForgetPartition(forget, np.flatnonzero(keep), float(rate), int(seed))


def _stratified_sample(labels: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * k / len(labels)
    take = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - take), kind="stable")[: k - take.sum()]:
        take[i] += 1
    picks = [gen.choice(np.flatnonzero(labels == c), size=t, replace=False) for c, t in zip(classes, take)]
    return np.concatenate(picks) if picks else np.empty(0, np.int64)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationScenario:
    kind: str = "NoAug"
    crop_pad: int = 4
    flip_p: float = 0.5
    ra_n: int = 2
    ra_m: int = 5

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown augmentation scenario {self.kind!r}; expected one of {SCENARIOS}")
        if not 0 <= self.ra_m <= 10 or self.ra_n < 1:
            raise ConfigError("RandAugment needs n >= 1 and 0 <= m <= 10")


def random_crop(img: np.ndarray, pad: int, rng: np.random.Generator, offset: tuple[int, int] | None = None) -> np.ndarray:
    """Zero-pad by ``pad`` on every side, then cut an H x W window."""
    if pad < 0:
        raise ConfigError(f"crop padding must be >= 0, got {pad}")
    if pad == 0:
        return img.copy()
    C, H, W = img.shape
    if offset is None:
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    dy, dx = offset
    padded = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=img.dtype)
    padded[:, pad : pad + H, pad : pad + W] = img
    return padded[:, dy : dy + H, dx : dx + W].copy()


def horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator, force: bool | None = None) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability must lie in [0, 1], got {p}")
    flip = force if force is not None else bool(rng.random() < p)
    return img[:, :, ::-1].copy() if flip else img.copy()


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    C, H, W = img.shape
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img.copy()
    C, H, W = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    t = math.radians(degrees)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sy = np.rint(cy + (yy - cy) * math.cos(t) - (xx - cx) * math.sin(t)).astype(int)
    sx = np.rint(cx + (yy - cy) * math.sin(t) + (xx - cx) * math.cos(t)).astype(int)
    valid = (sy >= 0) & (sy < H) & (sx >= 0) & (sx < W)
    out = np.zeros_like(img)
    out[:, valid] = img[:, sy[valid], sx[valid]]
    return out


def _smooth(img: np.ndarray) -> np.ndarray:
    # 3x3 kernel [[1,1,1],[1,5,1],[1,1,1]] / 13 on the interior; border kept
    out = img.copy()
    if img.shape[1] < 3 or img.shape[2] < 3:
        return out
    acc = 5.0 * img[:, 1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                acc = acc + img[:, 1 + dy : img.shape[1] - 1 + dy, 1 + dx : img.shape[2] - 1 + dx]
    out[:, 1:-1, 1:-1] = acc / 13.0
    return out


RA_OPS = ("identity", "rotate", "translate_x", "translate_y", "brightness", "contrast", "sharpness")


def apply_ra_op(img: np.ndarray, op: str, m: int, sign: int = 1) -> np.ndarray:
    """One RandAugment op at magnitude ``m`` in [0, 10]; ``sign`` picks the direction."""
    C, H, W = img.shape
    strength = 0.9 * m / 10.0
    if op not in RA_OPS:
        raise ConfigError(f"unknown RandAugment op {op!r}")
    if op == "identity" or m == 0:
        out = img.copy()
    elif op == "rotate":
        out = _rotate(img, sign * 3.0 * m)
    elif op == "translate_x":
        out = _shift(img, 0, sign * int(round(0.015 * m * W)))
    elif op == "translate_y":
        out = _shift(img, sign * int(round(0.015 * m * H)), 0)
    elif op == "brightness":
        out = img * (1.0 + sign * strength)
    elif op == "contrast":
        mean = img.mean()
        out = mean + (1.0 + sign * strength) * (img - mean)
    elif op == "sharpness":
        blurred = _smooth(img)
        out = blurred + (1.0 + sign * strength) * (img - blurred)
    else:
        raise ConfigError(f"unknown RandAugment op {op!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def rand_augment(img: np.ndarray, n: int, m: int, rng: np.random.Generator, ops: list[str] | None = None) -> np.ndarray:
    """Apply ``n`` ops drawn uniformly from ``RA_OPS`` (or the forced ``ops`` list)."""
    if n < 1 or not 0 <= m <= 10:
        raise ConfigError("RandAugment needs n >= 1 and 0 <= m <= 10")
    out = img
    for i in range(n):
        op = ops[i] if ops is not None else RA_OPS[int(rng.integers(len(RA_OPS)))]
        sign = 1 if rng.random() < 0.5 else -1
        out = apply_ra_op(out, op, m, sign)
    return out


def augment_image(img: np.ndarray, scenario: AugmentationScenario, rng: np.random.Generator) -> np.ndarray:
    if scenario.kind == "NoAug":
        return img
    out = random_crop(img, scenario.crop_pad, rng)
    out = horizontal_flip(out, scenario.flip_p, rng)
    if scenario.kind == "DefaultRA":
        out = rand_augment(out, scenario.ra_n, scenario.ra_m, rng)
    return out


def augment_batch(images: np.ndarray, indices, scenario, seed: int, epoch: int) -> np.ndarray:
    """Gather ``images[indices]`` and augment each sample.

    Every sample draws from a substream keyed by (seed, epoch, sample index),
    so the result does not depend on batch composition or worker count.
    """
    if not isinstance(scenario, AugmentationScenario):
        scenario = AugmentationScenario(scenario)
    batch = images[indices]
    if scenario.kind == "NoAug":
        return batch
    for row, i in enumerate(indices):
        batch[row] = augment_image(batch[row], scenario, rngmod.stream(seed, "augment", epoch, int(i)))
    return batch
