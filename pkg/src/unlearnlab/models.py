"""Classifier architectures, SGD training, accuracy evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .tensor import (
    RunningMoments,
    Tape,
    Tensor,
    backward_all,
    batchnorm2d,
    conv2d,
    flatten,
    global_avg_pool2d,
    linear,
    relu,
    add,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

ARCHITECTURES = ("MLP", "ResNetS")
SCHEDULES = ("constant", "cosine")
CHECKPOINT_FORMAT = "unlearnlab-checkpoint/1"


@dataclass(frozen=True)
class Architecture:
    kind: str = "ResNetS"
    in_channels: int = 1
    image_size: int = 16
    hidden: tuple[int, ...] = (64, 32)
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.kind!r}; expected one of {ARCHITECTURES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad architecture descriptor: {exc}") from None


@dataclass
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 0.1
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    seed: int = 0
    augmentation: str = "NoAug"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        from .data import SCENARIOS

        if self.augmentation not in SCENARIOS:
            raise ConfigError(f"augmentation must be one of {SCENARIOS}, got {self.augmentation!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


@dataclass
class ModelState:
    arch: Architecture
    num_classes: int
    params: dict[str, Tensor]
    moments: dict[str, RunningMoments] = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> "ModelState":
        return ModelState(
            self.arch,
            self.num_classes,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.params.items()},
            {k: m.copy() for k, m in self.moments.items()},
            self.seed,
        )

    def astype(self, dtype) -> "ModelState":
        out = self.copy()
        for t in out.params.values():
            t.data = t.data.astype(dtype)
        for m in out.moments.values():
            m.mean, m.var = m.mean.astype(dtype), m.var.astype(dtype)
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def __call__(self, x, train: bool = False) -> Tensor:
        return forward(self, x, train)


# ---------------------------------------------------------------- construction


def _kaiming(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    w = gen.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def _resnet_layout(arch: Architecture):
    """Yield (prefix, in_ch, out_ch, stride) for every residual block."""
    in_ch = arch.widths[0]
    for s, width in enumerate(arch.widths, start=1):
        for b in range(arch.blocks_per_stage):
            stride = 2 if (s > 1 and b == 0) else 1
            yield f"stage{s}.block{b}", in_ch, width, stride
            in_ch = width


def build_model(arch: Architecture, num_classes: int, seed: int) -> ModelState:
    """Fresh parameters: Kaiming fan-in weights, zero biases, unit/zero norm affines."""
    if not isinstance(arch, Architecture):
        if isinstance(arch, dict):
            arch = Architecture.from_dict(arch)
        elif isinstance(arch, str):
            arch = Architecture(kind=arch)
        else:
            raise ConfigError(f"unknown architecture descriptor {arch!r}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    gen = rngmod.stream(seed, "init")
    params: dict[str, Tensor] = {}
    moments: dict[str, RunningMoments] = {}

    def conv(name, cin, cout, k):
        params[f"{name}.weight"] = _kaiming(gen, (cout, cin, k, k), cin * k * k)

    def bn(name, ch):
        params[f"{name}.weight"] = Tensor(np.ones(ch, np.float32), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(ch, np.float32), requires_grad=True)
        moments[name] = RunningMoments.zeros(ch)

    def dense(name, fin, fout):
        params[f"{name}.weight"] = _kaiming(gen, (fout, fin), fin)
        params[f"{name}.bias"] = Tensor(np.zeros(fout, np.float32), requires_grad=True)

    if arch.kind == "MLP":
        fin = arch.in_channels * arch.image_size * arch.image_size
        for i, width in enumerate(arch.hidden):
            dense(f"fc{i}", fin, width)
            fin = width
        dense("head", fin, num_classes)
    else:
        conv("stem.conv", arch.in_channels, arch.widths[0], 3)
        bn("stem.bn", arch.widths[0])
        for prefix, cin, cout, stride in _resnet_layout(arch):
            conv(f"{prefix}.conv1", cin, cout, 3)
            bn(f"{prefix}.bn1", cout)
            conv(f"{prefix}.conv2", cout, cout, 3)
            bn(f"{prefix}.bn2", cout)
            if cin != cout or stride != 1:
                conv(f"{prefix}.shortcut.conv", cin, cout, 1)
                bn(f"{prefix}.shortcut.bn", cout)
        dense("head", arch.widths[-1], num_classes)
    return ModelState(arch, int(num_classes), params, moments, int(seed))


# ---------------------------------------------------------------- forward


def _conv_bn(state: ModelState, name: str, bn_name: str, x: Tensor, stride: int, pad: int, train: bool) -> Tensor:
    p = state.params
    y = conv2d(x, p[f"{name}.weight"], stride=stride, pad=pad)
    return batchnorm2d(y, p[f"{bn_name}.weight"], p[f"{bn_name}.bias"], state.moments[bn_name], train)


def forward(state: ModelState, x, train: bool = False) -> Tensor:
    """Logits for a batch ``x`` of shape [B, C, H, W]."""
    if not isinstance(x, Tensor):
        dtype = next(iter(state.params.values())).dtype
        x = Tensor(np.asarray(x, dtype=dtype))
    p = state.params
    if state.arch.kind == "MLP":
        h = flatten(x)
        for i in range(len(state.arch.hidden)):
            h = relu(linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
        return linear(h, p["head.weight"], p["head.bias"])

    h = relu(_conv_bn(state, "stem.conv", "stem.bn", x, 1, 1, train))
    for prefix, cin, cout, stride in _resnet_layout(state.arch):
        out = relu(_conv_bn(state, f"{prefix}.conv1", f"{prefix}.bn1", h, stride, 1, train))
        out = _conv_bn(state, f"{prefix}.conv2", f"{prefix}.bn2", out, 1, 1, train)
        if cin != cout or stride != 1:
            short = _conv_bn(state, f"{prefix}.shortcut.conv", f"{prefix}.shortcut.bn", h, stride, 0, train)
        else:
            short = h
        h = relu(add(out, short))
    return linear(global_avg_pool2d(h), p["head.weight"], p["head.bias"])


def predict_logits(state: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits, batch by batch, without recording a tape."""
    chunks = [forward(state, images[i : i + batch_size], train=False).data for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate(state: ModelState, data, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent (argmax ties go to the lowest class index)."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty split")
    logits = predict_logits(state, data.images, batch_size)
    correct = int((logits.argmax(axis=1) == data.labels).sum())
    return 100.0 * correct / len(data)


# ---------------------------------------------------------------- optimisation


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``update = lr * buf`` with ``buf <- momentum * buf + (grad + wd * theta)``;
    the first step initialises ``buf`` to the raw decayed gradient. When a
    ``mask`` is supplied the update is multiplied by it elementwise, so
    entries with mask 0 never change.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4, mask=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.mask = mask
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float, sign: float = 1.0) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            d = sign * p.grad
            if self.weight_decay:
                d = d + self.weight_decay * p.data
            buf = self.buffers.get(name)
            if buf is None or not self.momentum:
                buf = d
            else:
                buf = self.momentum * buf + d
            self.buffers[name] = buf
            update = (lr * buf).astype(p.dtype, copy=False)
            if self.mask is not None:
                update = update * self.mask[name]
            p.data = p.data - update


def learning_rate_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "cosine" and total_steps > 0:
        return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))
    return config.learning_rate


def batch_slices(n: int, batch_size: int):
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def train(state: ModelState, data, config: TrainConfig, history: list | None = None) -> tuple[ModelState, float]:
    """Minibatch SGD on ``data``; returns the trained copy and wall-clock seconds.

    Per-epoch mean losses are appended to ``history`` when given.
    """
    from .data import augment_batch

    if len(data) == 0:
        raise ContractError("cannot train on an empty split")
    if data.labels.min() < 0 or data.labels.max() >= state.num_classes:
        raise ContractError(f"labels must lie in [0, {state.num_classes})")
    state = state.copy()
    opt = SGD(state.params, config.momentum, config.weight_decay)
    n = len(data)
    slices = batch_slices(n, config.batch_size)
    total = config.epochs * len(slices)
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for b, sl in enumerate(slices):
            idx = order[sl]
            x = augment_batch(data.images, idx, config.augmentation, config.seed, epoch)
            with Tape() as tape:
                loss = softmax_cross_entropy(forward(state, x, train=True), data.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            state.zero_grad()
            backward_all(loss, tape)
            opt.step(learning_rate_at(config, step, total))
            step += 1
            epoch_loss += value * (sl.stop - sl.start)
        if history is not None:
            history.append(epoch_loss / n)
        log.debug("epoch %d loss %.5f", epoch, epoch_loss / n)
    state.zero_grad()
    return state, time.perf_counter() - start


# ---------------------------------------------------------------- checkpoints


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(f"{path.name}: expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def save_checkpoint(state: ModelState, directory, config: Any = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor."""
    directory = Path(directory)
    (directory / "blobs").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": state.arch.to_dict(),
        "num_classes": state.num_classes,
        "seed": state.seed,
        "config": config.to_dict() if hasattr(config, "to_dict") else config,
        "parameters": [],
        "moments": [],
    }
    if extra:
        manifest.update(extra)
    for i, (name, t) in enumerate(state.params.items()):
        fname = f"blobs/p{i:04d}.bin"
        _write_blob(directory / fname, t.data)
        manifest["parameters"].append({"path": name, "shape": list(t.shape), "file": fname})
    for i, (name, m) in enumerate(state.moments.items()):
        fm, fv = f"blobs/m{i:04d}_mean.bin", f"blobs/m{i:04d}_var.bin"
        _write_blob(directory / fm, m.mean)
        _write_blob(directory / fv, m.var)
        manifest["moments"].append(
            {"path": name, "channels": int(m.mean.size), "mean": fm, "var": fv, "momentum": m.momentum, "eps": m.eps}
        )
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_checkpoint(directory) -> tuple[ModelState, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    params = {
        e["path"]: Tensor(_read_blob(directory / e["file"], tuple(e["shape"])), requires_grad=True)
        for e in manifest["parameters"]
    }
    moments = {
        e["path"]: RunningMoments(
            _read_blob(directory / e["mean"], (e["channels"],)),
            _read_blob(directory / e["var"], (e["channels"],)),
            e["momentum"],
            e["eps"],
        )
        for e in manifest["moments"]
    }
    arch = Architecture.from_dict(manifest["architecture"])
    return ModelState(arch, manifest["num_classes"], params, moments, manifest["seed"]), manifest
