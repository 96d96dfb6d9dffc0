"""Minimal reverse-mode autodiff over dense 2-D arrays.

Every operation that sees a ``requires_grad`` input appends a node to the
current thread's :class:`Tape`. :func:`backward` replays the tape in reverse
recording order and then clears it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """An operation was configured with invalid constants."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block (inference)."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data``; record a node when any input needs a gradient.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    if loss.shape != (1, 1):
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad += gi
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
    tape.clear()


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = x.shape
    return _result(
        np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),)
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    value = x.data.sum() / n if n else 0.0
    return _result(np.array([[value]]), (x,), lambda g: (np.full(shape, g[0, 0] / max(n, 1)),))


# ---------------------------------------------------------------- structure


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    split = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def select(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[t, index[t]]`` for every row; returns T x 1."""
    rows = np.arange(x.shape[0])
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[rows, index] = g[:, 0]
        return (out,)

    return _result(x.data[rows, index][:, None], (x,), grad)


def temporal_diff(x: Tensor) -> Tensor:
    """Row differences ``x[t] - x[t-1]`` for t >= 1; (T-1) x C."""
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[1:] += g
        out[:-1] -= g
        return (out,)

    return _result(x.data[1:] - x.data[:-1], (x,), grad)


# ---------------------------------------------------------------- layers


def affine_projection(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"affine_projection: input {x.shape} does not match weight {weight.shape}"
        )
    if bias is not None and bias.shape != (1, weight.shape[1]):
        raise ShapeError(
            f"affine_projection: bias {bias.shape} does not match weight {weight.shape}"
        )
    y = x.data @ weight.data
    if bias is not None:
        y += bias.data

    def grad(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, keepdims=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, inputs, grad)


def _shift_rows(a: np.ndarray, offset: int) -> np.ndarray:
    """``out[t] = a[t + offset]`` with zeros outside ``[0, T)``."""
    out = np.zeros_like(a)
    n = a.shape[0]
    if offset >= 0:
        if offset < n:
            out[: n - offset] = a[offset:]
    elif -offset < n:
        out[-offset:] = a[: n + offset]
    return out


def dilated_conv1d(x: Tensor, kernel: Tensor, dilation: int, kernel_size: int = 3) -> Tensor:
    """Centered, zero-padded dilated convolution over time.

    ``kernel`` stacks the taps vertically: rows ``[k*d, (k+1)*d)`` hold the
    ``d x d'`` map applied to ``x[t + (k - (K-1)/2) * dilation]``.
    """
    if kernel_size % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kernel_size}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    d = x.shape[1]
    if kernel.shape[0] != kernel_size * d:
        raise ShapeError(
            f"dilated_conv1d: kernel {kernel.shape} does not fit input {x.shape} "
            f"with {kernel_size} taps"
        )
    half = (kernel_size - 1) // 2
    offsets = [(k - half) * dilation for k in range(kernel_size)]
    cols = np.concatenate([_shift_rows(x.data, o) for o in offsets], axis=1)

    def grad(g):
        gx = None
        if x.requires_grad:
            gcols = g @ kernel.data.T
            gx = np.zeros_like(x.data)
            for k, o in enumerate(offsets):
                gx += _shift_rows(gcols[:, k * d : (k + 1) * d], -o)
        gk = cols.T @ g if kernel.requires_grad else None
        return gx, gk

    return _result(cols @ kernel.data, (x, kernel), grad)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column over time; no affine parameters."""
    mu = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
    y = centered * inv_std

    def grad(g):
        gm = g.mean(axis=0, keepdims=True)
        gym = (g * y).mean(axis=0, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return _result(y, (x,), grad)


def channel_dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero whole columns with probability ``rate``; rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape[1]) >= rate)[None, :] / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over entries where ``mask`` is True; others are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    if not mask.any(axis=1).all():
        raise RuntimeError("masked_softmax: a row has no unmasked entry")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (scores,), grad)


def softmax(x: Tensor) -> Tensor:
    s = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), grad)


def log_softmax(x: Tensor) -> Tensor:
    s = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def grad(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), grad)


# ---------------------------------------------------------------- banded attention


def band_mask(length: int, half: int) -> np.ndarray:
    """Validity mask for a ``length x (2*half+1)`` band; column o is frame t+o-half."""
    t = np.arange(length)[:, None]
    j = t + np.arange(-half, half + 1)[None, :]
    return (j >= 0) & (j < length)


def _windows(a: np.ndarray, half: int) -> np.ndarray:
    """Read-only ``T x d x (2*half+1)`` view; ``[t, :, o]`` is row ``t+o-half`` (zero-padded)."""
    padded = np.pad(a, ((half, half), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1, axis=0)


def _band_dot(a: np.ndarray, b: np.ndarray, half: int) -> np.ndarray:
    # S[t, o] = a[t] . b[t + o - half]
    return np.einsum("td,tdo->to", a, _windows(b, half))


def _band_sum(p: np.ndarray, v: np.ndarray, half: int) -> np.ndarray:
    # out[t] = sum_o p[t, o] * v[t + o - half]
    return np.einsum("to,tdo->td", p, _windows(v, half))


def _band_transpose(p: np.ndarray, half: int) -> np.ndarray:
    """Band of the transposed ``T x T`` matrix: ``out[j, o] = p[j + o - half, 2*half - o]``."""
    n, width = p.shape
    src_row = np.arange(n)[:, None] + np.arange(width)[None, :] - half
    valid = (src_row >= 0) & (src_row < n)
    out = p[np.clip(src_row, 0, n - 1), (width - 1 - np.arange(width))[None, :]]
    return np.where(valid, out, 0.0)


def band_scores(q: Tensor, k: Tensor, half: int, scale_by: float = 1.0) -> Tensor:
    """``S[t, o] = scale_by * q[t] . k[t + o - half]``; out-of-range entries are 0."""
    if q.shape != k.shape:
        raise ShapeError(f"band_scores: query {q.shape} and key {k.shape} differ")
    qd, kd = q.data, k.data
    s = _band_dot(qd, kd, half) * scale_by

    def grad(g):
        g = g * scale_by
        gq = _band_sum(g, kd, half) if q.requires_grad else None
        gk = _band_sum(_band_transpose(g, half), qd, half) if k.requires_grad else None
        return gq, gk

    return _result(s, (q, k), grad)


def band_combine(weights: Tensor, v: Tensor, half: int) -> Tensor:
    """``out[t] = sum_o weights[t, o] * v[t + o - half]`` over in-range neighbors."""
    n = v.shape[0]
    width = 2 * half + 1
    if weights.shape != (n, width):
        raise ShapeError(f"band_combine: weights {weights.shape} do not match ({n}, {width})")
    p, vd = weights.data, v.data

    def grad(g):
        gp = _band_dot(g, vd, half) if weights.requires_grad else None
        gv = _band_sum(_band_transpose(p, half), g, half) if v.requires_grad else None
        return gp, gv

    return _result(_band_sum(p, vd, half), (weights, v), grad)
