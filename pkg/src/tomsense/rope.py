"""Rotary position encoding: angles, 2-D rotations and the feature -> frequency map.

Frequency index ``m`` rotates at ``base ** (-2m / d_h)`` radians per position,
so lower ``m`` is a higher frequency.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numeric import DimensionError

INTERLEAVED = "interleaved-pairs"
HALF_SPLIT = "half-split"
LAYOUTS = (INTERLEAVED, HALF_SPLIT)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 50000.0
    layout: str = HALF_SPLIT
    # False forces every angle to 0 (the base -> infinity limit, including m = 0)
    rotate: bool = True

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"rope base must exceed 1, got {self.base}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown rope layout {self.layout!r}; expected one of {LAYOUTS}")

    @property
    def n_freqs(self) -> int:
        return self.head_dim // 2


def _check_m(m, cfg):
    if not 0 <= m < cfg.n_freqs:
        raise IndexError(f"frequency index {m} outside [0, {cfg.n_freqs})")


def angular_rate(m: int, cfg: RopeConfig) -> float:
    _check_m(m, cfg)
    if not cfg.rotate:
        return 0.0
    return cfg.base ** (-2.0 * m / cfg.head_dim)


def angular_rates(cfg: RopeConfig) -> np.ndarray:
    if not cfg.rotate:
        return np.zeros(cfg.n_freqs)
    m = np.arange(cfg.n_freqs, dtype=np.float64)
    return cfg.base ** (-2.0 * m / cfg.head_dim)


def theta(p, m: int, cfg: RopeConfig) -> float:
    if p < 0:
        raise ValueError(f"position must be non-negative, got {p}")
    return p * angular_rate(m, cfg)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def encode_pair(x, p, m: int, cfg: RopeConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise DimensionError(f"expected a 2-vector, got shape {x.shape}")
    return rotation_matrix(theta(p, m, cfg)) @ x


def pair_indices(m: int, cfg: RopeConfig) -> tuple[int, int]:
    """Feature positions (within a head) of the two components of pair ``m``."""
    _check_m(m, cfg)
    if cfg.layout == INTERLEAVED:
        return 2 * m, 2 * m + 1
    return m, m + cfg.n_freqs


def split_pairs(x, cfg: RopeConfig):
    """Return (first, second) components of every rotary pair along the last axis."""
    x = np.asarray(x)
    if x.shape[-1] != cfg.head_dim:
        raise DimensionError(f"last axis {x.shape[-1]} != head_dim {cfg.head_dim}")
    if cfg.layout == INTERLEAVED:
        return x[..., 0::2], x[..., 1::2]
    h = cfg.n_freqs
    return x[..., :h], x[..., h:]


def merge_pairs(a, b, cfg: RopeConfig):
    if cfg.layout == INTERLEAVED:
        out = np.empty(a.shape[:-1] + (cfg.head_dim,), dtype=np.result_type(a, b))
        out[..., 0::2] = a
        out[..., 1::2] = b
        return out
    return np.concatenate([a, b], axis=-1)


def pair_norms(x, cfg: RopeConfig) -> np.ndarray:
    a, b = split_pairs(x, cfg)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return np.sqrt(a * a + b * b)


def cos_sin_table(n_positions: int, cfg: RopeConfig, dtype=np.float64):
    """cos/sin of theta(p, m) for p < n_positions, each shaped (n_positions, n_freqs)."""
    ang = np.outer(np.arange(n_positions, dtype=np.float64), angular_rates(cfg))
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotate(x, cfg: RopeConfig, positions=None, inverse=False, table=None):
    """Apply Enc to every pair of ``x`` shaped (..., T, head_dim).

    Positions default to 0..T-1. ``inverse`` applies the transpose rotation,
    which is also the backward pass of the forward rotation.
    """
    x = np.asarray(x)
    T = x.shape[-2]
    if table is None:
        if positions is None:
            cos, sin = cos_sin_table(T, cfg, x.dtype)
        else:
            ang = np.outer(np.asarray(positions, dtype=np.float64), angular_rates(cfg))
            cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    else:
        cos, sin = table
        cos, sin = cos[:T], sin[:T]
    if inverse:
        sin = -sin
    a, b = split_pairs(x, cfg)
    return merge_pairs(a * cos - b * sin, a * sin + b * cos, cfg)


def rope_interaction(q, k, i: int, j: int, cfg: RopeConfig, relative=True) -> float:
    """Score between query ``q`` at position ``i`` and key ``k`` at position ``j``.

    ``relative=True`` evaluates sum_m q_m^T M(j - i, m) k_m; otherwise both
    vectors are rotated to their absolute positions and dotted.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (cfg.head_dim,) or k.shape != (cfg.head_dim,):
        raise DimensionError(f"expected two {cfg.head_dim}-vectors, got {q.shape} and {k.shape}")
    total = 0.0
    for m in range(cfg.n_freqs):
        a, b = pair_indices(m, cfg)
        qm = np.array([q[a], q[b]])
        km = np.array([k[a], k[b]])
        if relative:
            # M(p)^T M(p') = M(p' - p); angle may be negative here
            rel = (j - i) * angular_rate(m, cfg)
            total += float(qm @ rotation_matrix(rel) @ km)
        else:
            total += float(encode_pair(qm, i, m, cfg) @ encode_pair(km, j, m, cfg))
    return total


def feature_to_frequency(index: int, cfg: RopeConfig, n_heads: int) -> tuple[int, int]:
    """Map an output-feature index of W_Q/W_K to (head, frequency index)."""
    if not 0 <= index < n_heads * cfg.head_dim:
        raise IndexError(f"feature index {index} outside [0, {n_heads * cfg.head_dim})")
    head, within = divmod(index, cfg.head_dim)
    if cfg.layout == INTERLEAVED:
        return head, within // 2
    return head, within % cfg.n_freqs
