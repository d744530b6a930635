"""Unlearning methods: full retrain, saliency-masked random labelling (SalUn),
plain random labelling and gradient ascent."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .data import Dataset, augment_batch
from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .models import SGD, Architecture, ModelState, TrainConfig, batch_slices, build_model, forward, train
from .tensor import Tape, backward_all, softmax_cross_entropy

METHODS = ("Retrain", "SalUn", "RandomLabel", "GradientAscent")
ASCENT_LOSS_LIMIT = 1e4


@dataclass
class UnlearnConfig:
    method: str = "SalUn"
    epochs: int = 3
    learning_rate: float | None = None
    mask_fraction: float = 0.5
    seed: int = 0
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augmentation: str = "NoAug"
    freeze_bn_moments: bool = False

    def validate(self) -> "UnlearnConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ConfigError(f"unlearning epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ConfigError(f"mask_fraction must lie in (0, 1], got {self.mask_fraction}")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        return self

    def resolved_lr(self, train_lr: float = 0.1) -> float:
        """Unlearning rate; defaults to a tenth of the training rate."""
        return 0.1 * train_lr if self.learning_rate is None else self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad unlearn config: {exc}") from None


# ---------------------------------------------------------------- retrain


def retrain(
    retain: Dataset, config: TrainConfig, arch: Architecture, num_classes: int, init_seed: int
) -> tuple[ModelState, float]:
    """Train a freshly initialised model on the retain split only."""
    if len(retain) == 0:
        raise ContractError("retain split is empty")
    start = time.perf_counter()
    model = build_model(arch, num_classes, init_seed)
    state, _ = train(model, retain, config)
    return state, time.perf_counter() - start


# ---------------------------------------------------------------- saliency mask


@dataclass
class SaliencyMask:
    masks: dict[str, np.ndarray]
    threshold: float
    sparsity: float

    @classmethod
    def constant(cls, state: ModelState, value: float) -> "SaliencyMask":
        masks = {k: np.full(t.shape, value, dtype=np.float32) for k, t in state.params.items()}
        return cls(masks, 0.0 if value else math.inf, float(bool(value)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def count(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))


def mask_from_gradients(grads: dict[str, np.ndarray], fraction: float) -> SaliencyMask:
    """Keep entries whose |gradient| reaches the pooled top-``fraction`` cut.

    The threshold is the k-th largest magnitude over every tensor, with
    ``k = round(fraction * P)``; ties at the threshold are all kept.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"mask fraction must lie in (0, 1], got {fraction}")
    mags = {k: np.abs(np.asarray(g, dtype=np.float64)) for k, g in grads.items()}
    pooled = np.concatenate([m.reshape(-1) for m in mags.values()])
    total = pooled.size
    k = min(total, max(1, int(round(fraction * total))))
    threshold = float(np.partition(pooled, total - k)[total - k])
    masks = {name: (m >= threshold).astype(np.float32) for name, m in mags.items()}
    kept = sum(int(m.sum()) for m in masks.values())
    return SaliencyMask(masks, threshold, kept / total)


def forget_gradients(state: ModelState, forget: Dataset, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Sum over forget batches of the cross-entropy gradient (eval-mode batchnorm)."""
    if len(forget) == 0:
        raise ContractError("forget split is empty")
    work = state.copy()
    acc = {k: np.zeros(t.shape, dtype=np.float64) for k, t in work.params.items()}
    for sl in batch_slices(len(forget), batch_size):
        with Tape() as tape:
            loss = softmax_cross_entropy(forward(work, forget.images[sl], train=False), forget.labels[sl])
        work.zero_grad()
        backward_all(loss, tape)
        for k, t in work.params.items():
            if t.grad is not None:
                acc[k] += t.grad
    return acc


def compute_saliency_mask(state: ModelState, forget: Dataset, fraction: float = 0.5, batch_size: int = 256) -> SaliencyMask:
    return mask_from_gradients(forget_gradients(state, forget, batch_size), fraction)


def save_mask(mask: SaliencyMask, directory) -> None:
    directory = Path(directory)
    (directory / "mask").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, m) in enumerate(mask.masks.items()):
        fname = f"mask/k{i:04d}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
        entries.append({"path": name, "shape": list(m.shape), "file": fname})
    doc = {"threshold": mask.threshold, "sparsity": mask.sparsity, "entries": entries}
    tmp = directory / "mask.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2))
    os.replace(tmp, directory / "mask.json")


def load_mask(directory) -> SaliencyMask:
    directory = Path(directory)
    doc = json.loads((directory / "mask.json").read_text())
    masks = {}
    for e in doc["entries"]:
        raw = (directory / e["file"]).read_bytes()
        if len(raw) != int(np.prod(e["shape"])):
            raise FormatError(f"mask blob {e['file']} has {len(raw)} bytes", offset=len(raw))
        masks[e["path"]] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32).reshape(e["shape"])
    return SaliencyMask(masks, doc["threshold"], doc["sparsity"])


# ---------------------------------------------------------------- fine-tuning based methods


def random_incorrect_labels(labels: np.ndarray, num_classes: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform draw from the classes other than each true label."""
    offsets = gen.integers(1, num_classes, size=len(labels))
    return (labels + offsets) % num_classes


def _paired_slices(n_forget: int, n_retain: int, batch_size: int):
    """Batch the retain set normally and split the forget set into as many batches."""
    if n_retain == 0:
        f = batch_slices(n_forget, batch_size)
        return f, [None] * len(f)
    r = batch_slices(n_retain, batch_size)
    f_size = max(1, math.ceil(n_forget / len(r)))
    f = batch_slices(n_forget, f_size)
    f = f + [None] * (len(r) - len(f))
    return f, r


def _run_relabel(state, forget, retain, config, train_lr, mask):
    if len(forget) == 0:
        raise ContractError("forget split is empty")
    state = state.copy()
    lr = config.resolved_lr(train_lr)
    opt = SGD(state.params, config.momentum, config.weight_decay, mask=None if mask is None else mask.masks)
    f_slices, r_slices = _paired_slices(len(forget), len(retain), config.batch_size)
    f_seed = rngmod.derive_seed(config.seed, "forget-augment")
    r_seed = rngmod.derive_seed(config.seed, "retain-augment")
    start = time.perf_counter()
    for epoch in range(config.epochs):
        f_order = rngmod.stream(config.seed, "unlearn-forget-order", epoch).permutation(len(forget))
        r_order = rngmod.stream(config.seed, "unlearn-retain-order", epoch).permutation(len(retain))
        fake = random_incorrect_labels(
            forget.labels, state.num_classes, rngmod.stream(config.seed, "random-labels", epoch)
        )
        for b, (fs, rs) in enumerate(zip(f_slices, r_slices)):
            saved = {k: m.copy() for k, m in state.moments.items()} if config.freeze_bn_moments else None
            # mean over the union of the paired batches: every sample weighs the same
            n_f = 0 if fs is None else fs.stop - fs.start
            n_r = 0 if rs is None else rs.stop - rs.start
            with Tape() as tape:
                loss = None
                if fs is not None:
                    idx = f_order[fs]
                    x = augment_batch(forget.images, idx, config.augmentation, f_seed, epoch)
                    loss = softmax_cross_entropy(forward(state, x, train=True), fake[idx]) * (n_f / (n_f + n_r))
                if rs is not None:
                    idx = r_order[rs]
                    x = augment_batch(retain.images, idx, config.augmentation, r_seed, epoch)
                    term = softmax_cross_entropy(forward(state, x, train=True), retain.labels[idx]) * (n_r / (n_f + n_r))
                    loss = term if loss is None else loss + term
            if saved is not None:
                state.moments = saved
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite unlearning loss at epoch {epoch}, batch {b}",
                    epoch=epoch,
                    batch=b,
                    seconds=time.perf_counter() - start,
                )
            state.zero_grad()
            backward_all(loss, tape)
            opt.step(lr)
    state.zero_grad()
    return state, time.perf_counter() - start


def salun_unlearn(
    state: ModelState,
    forget: Dataset,
    retain: Dataset,
    mask: SaliencyMask,
    config: UnlearnConfig,
    train_lr: float = 0.1,
) -> tuple[ModelState, float]:
    """Random-label the forget set and fine-tune on forget + retain batches,
    moving only the weights selected by ``mask``."""
    missing = set(state.params) ^ set(mask.masks)
    if missing or any(mask.masks[k].shape != t.shape for k, t in state.params.items()):
        raise ContractError("saliency mask is not aligned with the model parameters")
    return _run_relabel(state, forget, retain, config, train_lr, mask)


def random_label_unlearn(
    state: ModelState, forget: Dataset, retain: Dataset, config: UnlearnConfig, train_lr: float = 0.1
) -> tuple[ModelState, float]:
    return _run_relabel(state, forget, retain, config, train_lr, None)


def gradient_ascent_unlearn(
    state: ModelState, forget: Dataset, config: UnlearnConfig, train_lr: float = 0.1
) -> tuple[ModelState, float]:
    """Maximise the forget-set cross-entropy with sign-flipped SGD.

    Raises ``DivergenceError`` (carrying the last finite state) once the
    loss exceeds ``ASCENT_LOSS_LIMIT``.
    """
    if len(forget) == 0:
        raise ContractError("forget split is empty")
    state = state.copy()
    lr = config.resolved_lr(train_lr)
    opt = SGD(state.params, config.momentum, config.weight_decay)
    slices = batch_slices(len(forget), config.batch_size)
    aug_seed = rngmod.derive_seed(config.seed, "forget-augment")
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, "unlearn-forget-order", epoch).permutation(len(forget))
        for b, sl in enumerate(slices):
            idx = order[sl]
            x = augment_batch(forget.images, idx, config.augmentation, aug_seed, epoch)
            with Tape() as tape:
                loss = softmax_cross_entropy(forward(state, x, train=True), forget.labels[idx])
            value = loss.item()
            if not math.isfinite(value) or value > ASCENT_LOSS_LIMIT:
                state.zero_grad()
                raise DivergenceError(
                    f"gradient ascent diverged at epoch {epoch}, batch {b} (loss {value:.4g})",
                    epoch=epoch,
                    batch=b,
                    state=state,
                    seconds=time.perf_counter() - start,
                )
            state.zero_grad()
            backward_all(loss, tape)
            opt.step(lr, sign=-1.0)
    state.zero_grad()
    return state, time.perf_counter() - start
