"""Dense tensors with a reverse-mode tape.

Only the handful of operations the decoder and the trainer need are
provided. Parameters are stored in 32-bit floats; gradients are accumulated
in 64-bit.

Usage::

    with Tape() as tape:
        loss = mse_loss(forward(x), target)
    tape.backward(loss)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "backward",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "gelu",
    "sigmoid",
    "lerp_combine",
    "mse_loss",
    "permute",
    "sum_all",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense row-major array with an optional 64-bit gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of taped operations for one forward/backward pass.

    Tapes are thread-local: entering a tape in one thread never affects
    operations running in another.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: tuple, output: Tensor, vjp) -> None:
        output._tape = self
        output.requires_grad = True
        self.records.append(_Record(inputs, output, vjp))

    def clear(self) -> None:
        for rec in self.records:
            rec.output._tape = None
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        produced = {id(rec.output) for rec in self.records}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = np.asarray(g, dtype=np.float64)
                else:
                    inp.accumulate_grad(g)
        self.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` and clear its tape."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("backward called on a value that was not produced on a tape")
    loss._tape.backward(loss)


def _maybe_record(inputs: tuple, out: Tensor, vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, vjp)
    return out


def _wrap(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(arr, dtype=like.data.dtype)


# -- convolution --------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: C x (h+k-1) x (w+k-1) -> (C*k*k) x (h*w)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with same padding; kernel size 1 or 3."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be C x h x w, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be Cout x Cin x k x k, got shape {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1 or 3, got {k}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d input has {x.shape[0]} channels but weight expects {c_in} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    _, h, w = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, h, w) if k > 1 else x.data.reshape(c_in, h * w)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    result = _wrap(out.reshape(c_out, h, w), x)

    def vjp(g):
        g2 = g.reshape(c_out, h * w)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if k == 1:
                gx = gcols.reshape(c_in, h, w)
            else:
                gcols = gcols.reshape(c_in, k, k, h, w)
                gxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + h, j:j + w] += gcols[:, i, j]
                gx = gxp[:, pad:pad + h, pad:pad + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _maybe_record(inputs, result, vjp)


# -- pixel shuffle ------------------------------------------------------------


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    cs2, h, w = a.shape
    c = cs2 // (s * s)
    return a.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * s, w * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    c, hs, ws = a.shape
    h, w = hs // s, ws // s
    return a.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange (C*s*s) x h x w into C x (h*s) x (w*s).

    ``out[c, y, x] = in[c*s*s + (y % s)*s + (x % s), y // s, x // s]``
    """
    if s < 1:
        raise ShapeError(f"upscale factor must be >= 1, got {s}")
    if x.data.ndim != 3 or x.shape[0] % (s * s):
        raise ShapeError(f"pixel_shuffle needs channel count divisible by {s * s}, got shape {x.shape}")
    if s == 1:
        out = _wrap(x.data.copy(), x)
        return _maybe_record((x,), out, lambda g: (g,))
    out = _wrap(_shuffle(x.data, s), x)
    return _maybe_record((x,), out, lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.data.ndim != 3 or x.shape[1] % s or x.shape[2] % s:
        raise ShapeError(f"pixel_unshuffle needs spatial extents divisible by {s}, got shape {x.shape}")
    out = _wrap(_unshuffle(x.data, s), x)
    return _maybe_record((x,), out, lambda g: (_shuffle(g, s),))


# -- elementwise --------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    th = np.tanh(inner)
    out = _wrap(0.5 * a * (1.0 + th), x)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        d = 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * dinner
        return (g * d,)

    return _maybe_record((x,), out, vjp)


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    s = (0.5 * (1.0 + np.tanh(0.5 * a))).astype(a.dtype)
    out = _wrap(s, x)
    return _maybe_record((x,), out, lambda g: (g * s * (1.0 - s),))


def lerp_combine(v_l: Tensor, v_u: Tensor, w_l: float, w_u: float) -> Tensor:
    """``w_l * v_l + w_u * v_u`` with constant weights summing to one."""
    if v_l.shape != v_u.shape:
        raise ShapeError(f"lerp_combine operands differ in shape: {v_l.shape} vs {v_u.shape}")
    if abs(w_l + w_u - 1.0) > 1e-9:
        raise ValueError(f"interpolation weights must sum to 1, got {w_l} + {w_u}")
    dtype = np.result_type(v_l.data, v_u.data)
    out = Tensor(w_l * v_l.data.astype(dtype) + w_u * v_u.data.astype(dtype), dtype=dtype)
    return _maybe_record((v_l, v_u), out, lambda g: (g * w_l, g * w_u))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(np.ascontiguousarray(x.data.transpose(axes)), x)
    return _maybe_record((x,), out, lambda g: (g.transpose(inv),))


# -- reductions ---------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.float64(x.data.sum(dtype=np.float64)), dtype=np.float64)
    return _maybe_record((x,), out, lambda g: (np.full(x.shape, float(g), dtype=np.float64),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error accumulated in 64-bit; ``target`` is treated as constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    diff = pred.data.astype(np.float64) - t.astype(np.float64)
    n = diff.size
    out = Tensor(np.float64(np.dot(diff.ravel(), diff.ravel()) / n), dtype=np.float64)
    return _maybe_record((pred,), out, lambda g: (float(g) * 2.0 / n * diff,))
