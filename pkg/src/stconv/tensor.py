"""Dense 5-axis tensors (N, C, T, H, W) and the shape helpers built on them.

Tensors are plain C-contiguous numpy arrays with exactly five axes. The
functions here validate that contract and never mutate their inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

AXES = ("N", "C", "T", "H", "W")
DTYPES = (np.float32, np.float64)

# the dims a softmax may normalize over
_SOFTMAX_AXES = {"C": 1, "T": 2, 1: 1, 2: 2}


class ShapeError(ValueError):
    """A tensor does not satisfy a shape contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def check_shape(shape) -> tuple[int, int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected 5 extents (N, C, T, H, W), got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if math.prod(shape) > np.iinfo(np.intp).max:
        raise OverflowError(f"element count of {shape} overflows the index range")
    return shape


def as_tensor5(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a 5-axis float tensor, returning a contiguous array."""
    x = np.asarray(x)
    check_shape(x.shape)
    if dtype is None:
        dtype = x.dtype if x.dtype in DTYPES else np.float32
    return np.ascontiguousarray(x, dtype=dtype)


def ensure_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} contains {bad} non-finite values")
    return x


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def linear_index(shape, n: int, c: int, t: int, h: int, w: int) -> int:
    """Row-major offset of (n, c, t, h, w); W varies fastest."""
    _, C, T, H, W = shape
    return (((n * C + c) * T + t) * H + h) * W + w


def elementwise(op: str, a, b) -> np.ndarray:
    """Pointwise ``add``, ``sub``, ``mul``, ``scalar_mul`` or ``clamp``.

    ``clamp`` takes ``b`` as a ``(lo, hi)`` pair. Binary tensor ops require
    identical shapes; there is no broadcasting.
    """
    a = as_tensor5(a)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _pointwise(op, a, b)
    return ensure_finite(out, op)


def _pointwise(op, a, b):
    if op == "scalar_mul":
        out = a * a.dtype.type(b)
    elif op == "clamp":
        lo, hi = b
        out = np.clip(a, lo, hi)
    elif op in ("add", "sub", "mul"):
        b = as_tensor5(b, dtype=a.dtype)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return out


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x))


def softmax_axis_index(axis) -> int:
    try:
        return _SOFTMAX_AXES[axis]
    except KeyError:
        raise ValueError(f"softmax axis must be 'C' or 'T', got {axis!r}") from None


def softmax(x, axis="T") -> np.ndarray:
    """Max-stabilized softmax over the channel or time axis."""
    ax = softmax_axis_index(axis)
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True)


def dropout_mask(shape, rate: float, rng_seed, dtype=np.float32) -> np.ndarray:
    """Scaled keep-mask: 0 with probability ``rate``, else 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def dropout(x, rate: float, mode: str = "train", rng_seed=None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return x * dropout_mask(x.shape, rate, rng_seed, x.dtype.type)


def crop_window(extent: int, factor: int) -> tuple[int, int]:
    """(start, size) of the centered window of ``extent // factor`` cells."""
    if factor < 1:
        raise ValueError(f"crop factor must be positive, got {factor}")
    if extent % factor:
        raise ShapeError(f"extent {extent} is not divisible by crop factor {factor}")
    size = extent // factor
    return (extent - size) // 2, size


def crop_center_spatial(x, factor: int) -> np.ndarray:
    x = np.asarray(x)
    h0, hs = crop_window(x.shape[3], factor)
    w0, ws = crop_window(x.shape[4], factor)
    return np.ascontiguousarray(x[:, :, :, h0:h0 + hs, w0:w0 + ws])


def pad_center_spatial(x, factor: int) -> np.ndarray:
    """Zero-pad a cropped window back to its full extent; inverse placement of the crop."""
    x = np.asarray(x)
    n, c, t, hs, ws = x.shape
    H, W = hs * factor, ws * factor
    out = np.zeros((n, c, t, H, W), dtype=x.dtype)
    h0, _ = crop_window(H, factor)
    w0, _ = crop_window(W, factor)
    out[:, :, :, h0:h0 + hs, w0:w0 + ws] = x
    return out


def fold_channels_into_time(x) -> np.ndarray:
    """(N, C', T, H, W) -> (N, 1, C'*T, H, W) with output frame t*C' + c.

    Frames belonging to one source time step stay adjacent, ordered by
    channel.
    """
    x = np.asarray(x)
    n, c, t, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(n, 1, t * c, h, w)


def unfold_time_into_channels(x, channels: int) -> np.ndarray:
    """Inverse of :func:`fold_channels_into_time`."""
    x = np.asarray(x)
    n, one, tc, h, w = x.shape
    if one != 1 or tc % channels:
        raise ShapeError(f"cannot unfold {x.shape} into {channels} channels")
    t = tc // channels
    return np.ascontiguousarray(x.reshape(n, t, channels, h, w).transpose(0, 2, 1, 3, 4))
