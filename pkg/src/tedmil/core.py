"""Minimal reverse-mode differentiation for temporal feature grids.

Activations are float64 arrays laid out as ``(..., T, C)``: an optional
leading batch axis, then time steps, then channels. Every op below reads the
active :class:`Tape` (if any) and appends a record holding a closure that maps
the output gradient to input gradients. :func:`backward` replays the records
in reverse order.

    with Tape() as tape:
        h = conv1d_causal(x, layer)
        loss = sum_all(h)
    backward(tape, loss)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64

# Largest double strictly below one; keeps saturated sigmoid outputs inside (0, 1).
_BELOW_ONE = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(DTYPE).tiny)


class Tensor:
    """A value array with an optional gradient slot of the same shape."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def times(self) -> int:
        return self.value.shape[-2]

    @property
    def channels(self) -> int:
        return self.value.shape[-1]

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _temporal(x: Tensor, op: str):
    if x.value.ndim < 2 or x.times < 1 or x.channels < 1:
        raise ShapeError(f"{op}: expected a (..., T, C) grid with T, C >= 1, got {x.shape}")


@dataclass
class ConvLayerParams:
    """Kernel ``W`` of shape (F_out, C_d, F_in) and bias of shape (F_out,).

    Tap ``C_d - 1`` of the kernel multiplies the current time step, tap 0 the
    step ``C_d - 1`` positions earlier.
    """

    kernels: Tensor
    bias: Tensor

    def __post_init__(self):
        k, b = self.kernels.value, self.bias.value
        if k.ndim != 3 or min(k.shape) < 1:
            raise ShapeError(f"kernels must be (F_out, C_d, F_in), got {k.shape}")
        if b.shape != (k.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {k.shape[0]} filters")

    @property
    def out_channels(self) -> int:
        return self.kernels.value.shape[0]

    @property
    def kernel_length(self) -> int:
        return self.kernels.value.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernels.value.shape[2]


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed ops. Use as a context manager to activate."""

    _active: list = []

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self):
        return len(self.records)


def _emit(kind, inputs, out_value, backward_fn) -> Tensor:
    out = Tensor(out_value)
    if Tape._active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        Tape._active[-1].records.append(OpRecord(kind, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into the ``grad`` slot of every leaf tensor.

    Intermediate gradients live only for the duration of the call, so calling
    twice on the same tape adds the leaf gradients twice.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        if not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")
        _accumulate_leaf(loss, np.ones_like(loss.value))
        return

    pending = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if g.shape != t.value.shape:
        raise ShapeError(f"gradient shape {g.shape} != value shape {t.value.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# temporal ops


def conv1d_causal(x: Tensor, params: ConvLayerParams) -> Tensor:
    """Causal 1-D convolution over time with ``C_d - 1`` steps of left zero padding."""
    x = as_tensor(x)
    _temporal(x, "conv1d_causal")
    if x.channels != params.in_channels:
        raise ShapeError(
            f"conv1d_causal: input has {x.channels} channels, layer expects {params.in_channels}"
        )
    lead, T, C = x.shape[:-2], x.times, x.channels
    W, b = params.kernels, params.bias
    F, K = params.out_channels, params.kernel_length

    x3 = x.value.reshape(-1, T, C)
    padded = np.concatenate([np.zeros((x3.shape[0], K - 1, C)), x3], axis=1)
    cols = np.stack([padded[:, k:k + T, :] for k in range(K)], axis=2)  # (B, T, K, C)
    cols2 = cols.reshape(-1, K * C)
    wmat = W.value.reshape(F, K * C)
    out = (cols2 @ wmat.T + b.value).reshape(*lead, T, F)

    def grad_fn(g):
        g2 = g.reshape(-1, F)
        gw = (g2.T @ cols2).reshape(F, K, C)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(-1, T, K, C)
        gpad = np.zeros_like(padded)
        for k in range(K):
            gpad[:, k:k + T, :] += gcols[:, :, k, :]
        gx = gpad[:, K - 1:, :].reshape(x.shape)
        return gx, gw, gb

    return _emit("conv1d_causal", (x, W, b), out, grad_fn)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.value >= 0
    out = np.where(pos, x.value, slope * x.value)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, slope * g),))


def channel_norm(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Divide each time step by (largest absolute channel response + epsilon).

    The maximum is differentiated through; ties go to the lowest channel.
    """
    if epsilon <= 0:
        raise ContractError(f"channel_norm epsilon must be positive, got {epsilon}")
    x = as_tensor(x)
    _temporal(x, "channel_norm")
    v = x.value
    idx = np.argmax(np.abs(v), axis=-1)[..., None]
    picked = np.take_along_axis(v, idx, axis=-1)
    denom = np.abs(picked) + epsilon
    out = v / denom

    def grad_fn(g):
        gx = g / denom
        through_max = -np.sign(picked) * np.sum(g * v, axis=-1, keepdims=True) / denom**2
        np.put_along_axis(gx, idx, np.take_along_axis(gx, idx, axis=-1) + through_max, axis=-1)
        return (gx,)

    return _emit("channel_norm", (x,), out, grad_fn)


def max_pool_time(x: Tensor) -> Tensor:
    """Non-overlapping width-2 max over time; ties route to the earlier step."""
    x = as_tensor(x)
    _temporal(x, "max_pool_time")
    T = x.times
    if T % 2:
        raise ShapeError(f"max_pool_time needs an even number of time steps, got {T}")
    pairs = x.value.reshape(*x.shape[:-2], T // 2, 2, x.channels)
    first = pairs[..., 0, :] >= pairs[..., 1, :]
    out = np.where(first, pairs[..., 0, :], pairs[..., 1, :])

    def grad_fn(g):
        gp = np.stack([np.where(first, g, 0.0), np.where(first, 0.0, g)], axis=-2)
        return (gp.reshape(x.shape),)

    return _emit("max_pool_time", (x,), out, grad_fn)


def upsample_time(x: Tensor) -> Tensor:
    """Nearest-neighbour repeat: out[2t] = out[2t+1] = in[t]."""
    x = as_tensor(x)
    _temporal(x, "upsample_time")
    out = np.repeat(x.value, 2, axis=-2)

    def grad_fn(g):
        gp = g.reshape(*x.shape[:-2], x.times, 2, x.channels)
        return (gp.sum(axis=-2),)

    return _emit("upsample_time", (x,), out, grad_fn)


def delay_time(x: Tensor) -> Tensor:
    """Shift one step later in time, repeating the first step: out[0]=in[0], out[t]=in[t-1].

    Placed before :func:`max_pool_time` it aligns the pooling windows to
    (t-1, t), so a pool/upsample round trip never reads a later step.
    """
    x = as_tensor(x)
    _temporal(x, "delay_time")
    v = x.value
    out = np.concatenate([v[..., :1, :], v[..., :-1, :]], axis=-2)

    def grad_fn(g):
        gx = np.zeros_like(g)
        gx[..., :-1, :] += g[..., 1:, :]
        gx[..., 0, :] += g[..., 0, :]
        return (gx,)

    return _emit("delay_time", (x,), out, grad_fn)


def time_distributed_dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Apply the same affine map C -> 1 at every time step."""
    x = as_tensor(x)
    _temporal(x, "time_distributed_dense")
    if weights.value.shape != (x.channels,):
        raise ShapeError(
            f"time_distributed_dense: {weights.value.shape[0] if weights.value.ndim else 0} "
            f"weights for {x.channels} channels"
        )
    out = x.value @ weights.value[:, None] + bias.value.reshape(1)

    def grad_fn(g):
        gw = np.tensordot(x.value, g, axes=(range(x.value.ndim - 1), range(g.ndim - 1)))[:, 0]
        gb = np.full(bias.value.shape, g.sum())
        gx = g * weights.value
        return gx, gw, gb

    return _emit("time_distributed_dense", (x, weights, bias), out, grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.value
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _TINY, _BELOW_ONE)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (x,), x.value * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# scalar plumbing


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit("sum_all", (x,), np.array(x.value.sum()), lambda g: (np.full(x.shape, float(g)),))
