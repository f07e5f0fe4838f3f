"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block). Outside a tape, operations compute values only.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DROPOUT_RATE = 0.5


class NumericError(ArithmeticError):
    """Non-finite values produced by a forward operation."""


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class Tensor:
    """Row-major float64 array plus gradient bookkeeping.

    ``grad`` is ``None`` until a backward pass reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def is_leaf(self) -> bool:
        return self._tape is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; every operation whose inputs require gradients
    is appended in execution order, which is a topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        out._tape = self
        out._index = len(self.records)
        self.records.append(_Record(out, inputs, backward))


@contextlib.contextmanager
def no_tape():
    """Suspend recording; evaluation-only passes leave the active tape alone."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._index = -1
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape.get()
    if out.requires_grad and tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _finish(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    return _finish(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _finish(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``[m, k]`` and a ``[k, n]`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _finish(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def elementwise(kind: str, x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Apply ``relu``, ``leaky_relu``, ``sigmoid``, ``log`` or ``exp`` entrywise."""
    x = as_tensor(x)
    d = x.data
    if kind == "relu":
        mask = d > 0
        return _finish(np.where(mask, d, 0.0), (x,), lambda g: (g * mask,), kind)
    if kind == "leaky_relu":
        scale = np.where(d > 0, 1.0, slope)
        return _finish(d * scale, (x,), lambda g: (g * scale,), kind)
    if kind == "sigmoid":
        s = _sigmoid(d)
        return _finish(s, (x,), lambda g: (g * s * (1.0 - s),), kind)
    if kind == "log":
        if np.any(d <= 0):
            raise DomainError("log of non-positive entry")
        return _finish(np.log(d), (x,), lambda g: (g / d,), kind)
    if kind == "exp":
        with np.errstate(over="ignore"):  # overflow is reported by _finish
            e = np.exp(d)
        return _finish(e, (x,), lambda g: (g * e,), kind)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def _sigmoid(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x):
    return elementwise("relu", x)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return elementwise("leaky_relu", x, slope)


def sigmoid(x):
    return elementwise("sigmoid", x)


def log(x):
    return elementwise("log", x)


def exp(x):
    return elementwise("exp", x)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; clipped entries pass no gradient."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _finish(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _finish(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def reverse_grad(x: Tensor) -> Tensor:
    """Identity forward, negated gradient backward."""
    x = as_tensor(x)
    return _finish(x.data.copy(), (x,), lambda g: (-g,), "reverse_grad")


# ----------------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _finish(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    if axis >= x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _finish(x.data.sum(axis=axis), (x,), back, "sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over ``axis`` (all entries when ``None``)."""
    x = as_tensor(x)
    if axis is not None and not 0 <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    if axis is None:
        return _finish(
            np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean"
        )

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _finish(x.data.mean(axis=axis), (x,), back, "mean")


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.size == 0 and a.ndim == 1:
        return _finish(b.data.copy(), (a, b), lambda g: (np.zeros(a.shape), g), "concat")
    if b.size == 0 and b.ndim == 1:
        return _finish(a.data.copy(), (a, b), lambda g: (g, np.zeros(b.shape)), "concat")
    if a.ndim != b.ndim or any(
        i != axis and sa != sb for i, (sa, sb) in enumerate(zip(a.shape, b.shape))
    ):
        raise DimensionError(f"cannot concat shapes {a.shape} and {b.shape} on axis {axis}")
    cut = a.shape[axis]

    def back(g):
        ga, gb = np.split(g, [cut], axis=axis)
        return ga, gb

    return _finish(np.concatenate([a.data, b.data], axis=axis), (a, b), back, "concat")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _finish(x.data[index], (x,), back, "take_rows")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def back(g):
        out = np.zeros(x.shape)
        out[sl] = g
        return (out,)

    return _finish(x.data[sl].copy(), (x,), back, "slice")


# ----------------------------------------------------------------------------
# batchnorm / dropout
# ----------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, features: int) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(features), requires_grad=True),
            beta=Tensor(np.zeros(features), requires_grad=True),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-feature batch normalisation of a ``[batch, features]`` tensor.

    Train mode normalises with batch statistics (biased variance) and updates
    the running estimates with the unbiased variance; eval mode uses the
    running estimates.
    """
    x = as_tensor(x)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        normed = _finish((x.data - state.running_mean) * inv, (x,), lambda g: (g * inv,), "batchnorm")
        return normed * state.gamma + state.beta
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise DimensionError("train-mode batchnorm needs a batch of at least 2")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv

    def back(g):
        gx = inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
        return (gx,)

    normed = _finish(xhat, (x,), back, "batchnorm")
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    return normed * state.gamma + state.beta


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _finish(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def regularize_forward(kind: str, x: Tensor, state, mode: str, rng=None) -> Tensor:
    """Dispatch to :func:`batchnorm` (``state`` is a BatchNormState) or
    :func:`dropout` (``state`` is the rate)."""
    if kind == "batchnorm":
        return batchnorm(x, state, mode)
    if kind == "dropout":
        return dropout(x, state, mode, rng)
    raise ValueError(f"unknown regulariser {kind!r}")


# ----------------------------------------------------------------------------
# backward / optimiser
# ----------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every reachable ``requires_grad`` leaf.

    Returns a mapping leaf -> gradient and also stores it on ``leaf.grad``
    (overwriting, so repeated passes give identical results). Leaves the
    loss does not depend on are absent from the mapping.
    """
    if loss.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss._tape is None:
        loss.grad = np.ones(loss.shape)
        return {loss: loss.grad}
    if loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp._tape is None:
                leaves[key] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        out[leaf] = g
    return out


@dataclass
class SgdState:
    """Step-decay learning-rate state for plain SGD."""

    base_lr: float
    decay_factor: float = 10.0
    decay_epoch: int = 40
    current_epoch: int = 0

    def __post_init__(self):
        if self.base_lr < 0 or self.decay_factor <= 0 or self.decay_epoch < 0:
            raise ValueError("invalid SGD schedule")

    @property
    def lr(self) -> float:
        if self.current_epoch < self.decay_epoch:
            return self.base_lr
        return self.base_lr / self.decay_factor


def sgd_step(params: Iterable[Tensor], grads: dict[Tensor, np.ndarray], state: SgdState) -> list[Tensor]:
    """``p <- p - lr * g`` in place. Parameters without a gradient are skipped."""
    lr = state.lr
    params = list(params)
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if lr:
            p.data = p.data - lr * g
    return params


def make_rng(seed: int | np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Seeded PCG64 generator; ``key`` selects an independent child stream."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    if key:
        ss = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(key))
    return np.random.Generator(np.random.PCG64(ss))
