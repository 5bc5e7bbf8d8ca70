"""Dense array arithmetic and the elementary neural ops used across the package.

Arrays are plain numpy arrays. Storage precision is float32; reductions
accumulate in float64 and round back once at the end.
"""

import math

import numpy as np

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector was given where a direction is required."""


def _out_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else STORAGE_DTYPE


def as_tensor(data, dtype=STORAGE_DTYPE) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to the operands' precision."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a.astype(ACCUM_DTYPE) @ b.astype(ACCUM_DTYPE)
    return out.astype(_out_dtype(a, b))


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape} elementwise")
    return a * b


def softmax_rows(a, axis=-1) -> np.ndarray:
    """Max-subtracted softmax along ``axis`` (rows for a 2-D input).

    ``-inf`` entries (masked positions) get probability exactly 0.
    """
    a = np.asarray(a)
    dt = _out_dtype(a)
    z = a.astype(ACCUM_DTYPE, copy=False)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(dt, copy=False)


def log_softmax(a, axis=-1) -> np.ndarray:
    z = np.asarray(a, dtype=ACCUM_DTYPE)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def vector_norm(v) -> float:
    v = np.asarray(v, dtype=ACCUM_DTYPE).ravel()
    return float(math.sqrt(float(np.dot(v, v))))


def angle_degrees(u, v) -> float:
    """Angle between two vectors in degrees, in [0, 180]."""
    u = np.asarray(u, dtype=ACCUM_DTYPE).ravel()
    v = np.asarray(v, dtype=ACCUM_DTYPE).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"vector lengths differ: {u.shape} vs {v.shape}")
    nu, nv = vector_norm(u), vector_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("angle undefined for a zero-norm vector")
    # half-angle form; arccos of the cosine loses digits near 0 and 180 degrees
    a, b = u / nu, v / nv
    return math.degrees(2.0 * math.atan2(vector_norm(a - b), vector_norm(a + b)))


def rms_norm(x, weight=None, eps=1e-6):
    """RMS-normalize the last axis, optionally scaling by ``weight``."""
    x = np.asarray(x)
    ms = np.mean(np.square(x, dtype=ACCUM_DTYPE), axis=-1, keepdims=True)
    out = x * (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    if weight is not None:
        out = out * weight
    return out


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x)
    return x * sigmoid(x)


def cross_entropy(logits, targets) -> float:
    """Mean negative log-likelihood of integer ``targets`` under row-wise ``logits``."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 1:
        logits = logits[None, :]
        targets = targets.reshape(1)
    if logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    lp = log_softmax(logits)
    return float(-np.mean(lp[np.arange(len(targets)), targets]))
