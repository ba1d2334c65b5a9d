"""Minimal reverse-mode differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Outside a tape context every operation is a plain
forward computation, which is what evaluation code relies on.

All values are float64. Batched variants of the network ops accept a
leading batch axis; the unbatched forms are kept for single samples.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "as_tensor",
    "conv2d",
    "maxpool2",
    "pointwise_conv1d",
    "dense",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "concat",
    "reshape",
    "sum",
    "mean",
    "elementwise_mul",
    "clamp",
    "dropout",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Values in row-major order."""
        return self.data.ravel().tolist()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic; operands must share a shape or be scalars
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(as_tensor(other)))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only defined by a scalar")
        return elementwise_mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return _index(self, idx)

    def backward(self) -> None:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() requires an active tape")
        tape.backward(self)


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, replayed in reverse to get gradients.

    Use as a context manager; tapes are thread-confined.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    ...     tape.backward(y)
    >>> float(x.grad)
    6.0
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(input) into ``.grad`` of every recorded tensor."""
        if seed is None:
            if output.data.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit seed")
            seed = np.ones_like(output.data)
        output.grad = seed.astype(np.float64) if output.grad is None else output.grad + seed
        for inputs, out, backward_fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient during backward")
                inp.grad = g if inp.grad is None else inp.grad + g


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and log its backward rule on the active tape.

    ``backward_fn`` maps the output gradient to a tuple of input gradients
    (``None`` where an input needs none).
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("operation produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.records.append((tuple(inputs), result, backward_fn))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape == () or np.prod(shape) == 1 else g


def _add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, sa).reshape(sa), _reduce_to(g, sb).reshape(sb)))


def _neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def _index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(a.data[idx]), (a,), backward)


def elementwise_mul(a, b) -> Tensor:
    """Hadamard product; either side may also be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "elementwise_mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_reduce_to(g * bd, sa).reshape(sa),
                             _reduce_to(g * ad, sb).reshape(sb)))


_COLS_CACHE_LIMIT = 1 << 25  # elements; larger im2col buffers are rebuilt in backward


def _im2col(xd: np.ndarray) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[N*H*W, 9*C]`` with columns ordered (tap row, tap col, channel)."""
    n, c, h, w = xd.shape
    xp = np.pad(xd.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [n, h, w, c, 3, 3]
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero "same" padding.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; kernels are
    ``[C_out, C_in, 3, 3]`` (cross-correlation, as in every DL framework).
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects [C,H,W] or [N,C,H,W], got {x.shape}")
    k = kernels.data
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernels must be [C_out, C_in, 3, 3], got {k.shape}")
    n, c_in, h, w = xd.shape
    c_out = k.shape[0]
    if k.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, kernels expect {k.shape[1]}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    k2 = k.transpose(0, 2, 3, 1).reshape(c_out, -1)
    cols = _im2col(xd)
    y = cols @ k2.T
    y += bias.data
    y = y.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y[0] if unbatched else y)
    saved = cols if cols.size <= _COLS_CACHE_LIMIT else None

    def backward(g):
        gd = g[None] if unbatched else g
        g2 = gd.transpose(0, 2, 3, 1).reshape(-1, c_out)
        c = saved if saved is not None else _im2col(xd)
        gk = (g2.T @ c).reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2).reshape(n, h, w, 3, 3, c_in)
            gxp = np.zeros((n, h + 2, w + 2, c_in))
            for di in range(3):
                for dj in range(3):
                    gxp[:, di:di + h, dj:dj + w, :] += gcols[:, :, :, di, dj, :]
            gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        return gx, np.ascontiguousarray(gk), g2.sum(axis=0)

    return record(y, (x, kernels, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties go to the first element in row-major scan of the window.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2 needs spatial dims >= 2, got {(h, w)}")
    ho, wo = h // 2, w // 2
    win = (xd[:, :, :2 * ho, :2 * wo]
           .reshape(n, c, ho, 2, wo, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, 4))
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if unbatched:
        y = y[0]

    def backward(g):
        gd = g[None] if unbatched else g
        gwin = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gwin, arg[..., None], gd[..., None], axis=-1)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * ho, :2 * wo] = (gwin.reshape(n, c, ho, wo, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, 2 * ho, 2 * wo))
        return (gx[0] if unbatched else gx,)

    return record(y, (x,), backward)


def pointwise_conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Kernel-size-1 convolution over landmark points.

    ``x`` is ``[l, 2]`` or ``[N, l, 2]``; output is ``[l, C_out]`` /
    ``[N, l, C_out]``.
    """
    if x.shape[-1] != 2:
        raise ValueError(f"pointwise_conv1d expects (x, y) pairs, got last extent {x.shape[-1]}")
    if kernels.ndim != 2 or kernels.shape[1] != 2:
        raise ValueError(f"pointwise_conv1d kernels must be [C_out, 2], got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ValueError("pointwise_conv1d: bias/kernel mismatch")
    xd, k = x.data, kernels.data
    y = xd @ k.T + bias.data

    def backward(g):
        flat_g = g.reshape(-1, k.shape[0])
        flat_x = xd.reshape(-1, 2)
        return g @ k, flat_g.T @ flat_x, flat_g.sum(axis=0)

    return record(y, (x, kernels, bias), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``[n_in]`` or ``[N, n_in]``."""
    W = weights.data
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} vs weights {W.shape}")
    if bias.shape != (W.shape[0],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({W.shape[0]},)")
    xd = x.data
    y = xd @ W.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = xd.reshape(-1, W.shape[1])
        return g @ W, g2.T @ x2, g2.sum(axis=0)

    return record(y, (x, weights, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # record() reports the inf as NonFiniteError
        e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    parts = [t.data for t in tensors]
    y = np.concatenate(parts, axis=axis)
    ax = axis % y.ndim
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return record(y, tensors, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    y = np.asarray(x.data.sum(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(y, (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return elementwise_mul(sum(x, axis), 1.0 / count)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only where unclipped."""
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` in training mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def grad_check(
    function: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``function`` must rebuild its scalar output from ``params`` on every
    call. With ``max_probes`` set, that many coordinates are sampled per
    parameter instead of probing all of them. The relative error of one
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = function()
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        tape.backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = function().item()
            flat[i] = orig - epsilon
            fm = function().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite function value during grad_check")
            numeric = (fp - fm) / (2.0 * epsilon)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
