"""Dense tensors with a reverse-mode gradient tape.

Only the primitives the classifiers in this package need are provided.
Data is float32 by default; float64 tensors are accepted everywhere so that
finite-difference checks can run without single-precision round-off.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy(linear(x, w, b), labels)
    backward_all(loss, tape)
    w.grad  # populated
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence
import weakref

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelError, NumericError

_FLOAT_TYPES = (np.float32, np.float64)
_TAPES: list["Tape"] = []
_DETERMINISTIC = False
_THREAD_LIMITER = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.type in _FLOAT_TYPES else np.float32
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))


class Node:
    """One recorded primitive application.

    The output is held weakly: the output tensor owns its node, so a strong
    back-reference would form a cycle and keep whole graphs alive until the
    cyclic collector happens to run.
    """

    __slots__ = ("op", "inputs", "_output", "output_id", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self._output = weakref.ref(output)
        self.output_id = id(output)
        self.backward = backward

    @property
    def output(self) -> Tensor | None:
        return self._output()


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so inputs always precede the
    nodes that consume them. Entering the tape as a context manager makes it
    the active recorder for every op called inside the block.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward_all(loss, self)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def backward_all(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` and accumulate leaf ``.grad``.

    Returns a mapping ``id(leaf) -> gradient`` for the leaves touched by this
    call (the gradient of this call alone, before accumulation).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not any(n is loss._node for n in reversed(tape.nodes)):
        raise ContractError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        if node.output is None:
            continue
        g = pending.pop(node.output_id, None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            target = leaves if inp._node is None else pending
            key = id(inp)
            if key in target:
                target[key] = target[key] + ig
            else:
                target[key] = ig

    seen = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp._node is None and id(inp) in leaves:
                seen[id(inp)] = inp
    for key, tensor in seen.items():
        g = leaves[key].astype(tensor.dtype, copy=False).reshape(tensor.shape)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
    return leaves


# ---------------------------------------------------------------- determinism


def set_deterministic(flag: bool = True) -> None:
    """Pin BLAS to a single thread so every reduction runs in a fixed order."""
    global _DETERMINISTIC, _THREAD_LIMITER
    _DETERMINISTIC = bool(flag)
    if _THREAD_LIMITER is not None:
        _THREAD_LIMITER.restore_original_limits()
        _THREAD_LIMITER = None
    if flag:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:  # pragma: no cover
            return
        _THREAD_LIMITER = threadpool_limits(limits=1)


def is_deterministic() -> bool:
    return _DETERMINISTIC


@contextlib.contextmanager
def deterministic(flag: bool = True):
    previous = _DETERMINISTIC
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(previous)


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record("sum", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, 0).astype(x.dtype, copy=False)
    return _record("relu", out, (x,), lambda g: (g * positive,))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of [B, C, H, W] input with [F, C, kh, kw] kernels.

    Implemented as a channel-major im2col followed by a single GEMM.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if kh > Hp or kw > Wp or Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"conv2d output size is non-positive for input {x.shape}, kernel {kernel.shape}, "
            f"stride={stride}, pad={pad}"
        )
    dtype = np.result_type(x.dtype, kernel.dtype)
    xp = np.zeros((C, B, Hp, Wp), dtype=dtype)
    xp[:, :, pad : pad + H, pad : pad + W] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=dtype)
    hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hspan : stride, j : j + wspan : stride]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2 = kernel.data.reshape(F, -1)
    out = (w2 @ cols).reshape(F, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(F, -1)
        dkernel = (g2 @ cols.T).reshape(kernel.shape)
        dcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
        dxp = np.zeros((C, B, Hp, Wp), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[:, i, j]
        dx = dxp[:, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3)
        return dx, dkernel

    return _record("conv2d", out, (x, kernel), backward)


@dataclass
class RunningMoments:
    """Per-channel running mean/variance used by batchnorm in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32) -> "RunningMoments":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningMoments":
        return RunningMoments(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningMoments, train: bool) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} do not match C={C}")
    n = B * H * W
    axes = (0, 2, 3)
    shape = (1, C, 1, 1)
    if train:
        if n < 2:
            raise DegenerateBatchError(f"batchnorm2d in train mode needs B*H*W >= 2, got {n}")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        m = state.momentum
        state.mean = ((1 - m) * state.mean + m * mean).astype(state.mean.dtype)
        state.var = ((1 - m) * state.var + m * var * (n / (n - 1))).astype(state.var.dtype)
    else:
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        centered = x.data - mean.reshape(shape)
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if train:
            dx = (invstd / n).reshape(shape) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = dxhat * invstd.reshape(shape)
        return dx, dgamma, dbeta

    return _record("batchnorm2d", out, (x, gamma, beta), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (H * W)).reshape(B, C, 1, 1), x.shape),)

    return _record("global_avg_pool2d", out, (x,), backward)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LabelError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise LabelError(f"label {int(bad)} outside [0, {classes})")
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    The reduction runs in float64; the result has the logits' dtype.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B, C] logits, got {logits.shape}")
    B, C = logits.shape
    labels = _check_labels(labels, B, C)
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (float(g) / B)).astype(logits.dtype),)

    return _record("softmax_cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------- verification


def finite_difference_check(
    f: Callable[[], Tensor | float],
    params: Iterable[Tensor] | dict[str, Tensor],
    eps: float = 1e-3,
    coords_per_tensor: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` in place. Tensors with more
    than ``coords_per_tensor`` entries are checked on a random subset of that
    many coordinates. Returns ``max |analytic - numeric| / max(1e-8, |numeric|)``.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    def value() -> float:
        out = f()
        v = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(v):
            raise NumericError(f"function value is not finite: {v}")
        return v

    with Tape() as tape:
        out = f()
    if isinstance(out, Tensor) and out._node is not None:
        if not math.isfinite(out.item()):
            raise NumericError(f"function value is not finite: {out.item()}")
        backward_all(out, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if flat.base is not t.data and not np.shares_memory(flat, t.data):
            raise ContractError("finite_difference_check needs contiguous parameter storage")
        if flat.size <= coords_per_tensor:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=coords_per_tensor, replace=False))
        gflat = grad.reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            up = value()
            flat[c] = original - eps
            down = value()
            flat[c] = original
            numeric = (up - down) / (2 * eps)
            err = abs(float(gflat[c]) - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
