"""Mechanistic analyses over captured traces.

* per-frequency activation norms of Q/K and the dominant frequency
* where masked W_Q/W_K entries fall in frequency space
* q / k_BOS geometry before RoPE, after RoPE and after perturbation
* attention-sink shift detection
* the exact three-term decomposition of a change in attention scores
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric
from .masking import SparsityMask
from .model import Checkpoint, ForwardTrace, ModelConfig
from .rope import RopeConfig, feature_to_frequency, pair_indices, pair_norms

UNDEFINED = -1
SINK_THRESHOLD = 0.01


class AnalysisError(ValueError):
    pass


def _valid_positions(trace: ForwardTrace):
    T = trace.tokens.shape[1]
    return np.arange(T)[None, :] < trace.lengths[:, None]  # (B, T)


def activation_spectrum(trace: ForwardTrace, which: str = "Q", post_rotation: bool = False, rope: RopeConfig = None) -> np.ndarray:
    """Mean (over batch rows and valid positions) 2-norm of every rotary pair.

    Returns an array shaped (n_layers, n_heads, n_freqs).
    """
    if not trace.captured:
        raise AnalysisError("trace was run without capture")
    if which not in ("Q", "K"):
        raise AnalysisError(f"which must be 'Q' or 'K', got {which!r}")
    acts = {("Q", False): trace.q_pre, ("Q", True): trace.q_post, ("K", False): trace.k_pre, ("K", True): trace.k_post}[
        (which, post_rotation)
    ]
    if rope is None:
        raise AnalysisError("rope config required to pair features")
    valid = _valid_positions(trace)  # (B, T)
    w = valid[:, None, :, None].astype(np.float64)  # broadcast over heads and freqs
    out = []
    for a in acts:
        pn = pair_norms(a, rope)  # (B, H, T, F)
        out.append(np.sum(pn * w, axis=(0, 2)) / valid.sum())
    return np.stack(out)


def dominant_frequency(norms) -> int:
    """argmax over frequencies, ties to the lower index; UNDEFINED if every norm is 0."""
    norms = np.asarray(norms)
    if not np.any(norms > 0):
        return UNDEFINED
    return int(np.argmax(norms))


def mask_frequency_histogram(mask: SparsityMask, cfg: ModelConfig, kinds=("W_Q", "W_K")) -> dict:
    """Counts of masked entries per (layer, head, frequency), keyed by matrix kind.

    Each masked entry is attributed through its row (output feature) index.
    """
    rc = cfg.rope
    out = {k: np.zeros((cfg.n_layers, cfg.n_heads, rc.n_freqs), dtype=np.int64) for k in kinds}
    for name, m in mask.masks.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[2] not in kinds:
            continue
        layer = int(parts[1])
        rows = np.nonzero(m)[0]
        for r in rows:
            h, f = feature_to_frequency(int(r), rc, cfg.n_heads)
            out[parts[2]][layer, h, f] += 1
    return out


def top_frequencies(counts, k: int = 3) -> list:
    """Up to ``k`` most frequently masked frequencies (count > 0), ties to lower index."""
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    return [int(i) for i in order[:k] if counts[i] > 0]


@dataclass
class SpectrumRow:
    layer: int
    head: int
    matrix: str
    activation_norms: list
    dominant: int
    mask_counts: list
    top3: list
    alignment_distance: int  # UNDEFINED when either side is undefined

    @property
    def scored(self) -> bool:
        return self.alignment_distance != UNDEFINED


def spectrum_report(trace: ForwardTrace, mask: SparsityMask, cfg: ModelConfig, post_rotation: bool = False) -> list:
    hist = mask_frequency_histogram(mask, cfg)
    rows = []
    for kind, which in (("W_Q", "Q"), ("W_K", "K")):
        spec = activation_spectrum(trace, which, post_rotation, cfg.rope)
        for l in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                dom = dominant_frequency(spec[l, h])
                counts = hist[kind][l, h]
                top = top_frequencies(counts)
                dist = UNDEFINED if dom == UNDEFINED or not top else min(abs(f - dom) for f in top)
                rows.append(SpectrumRow(l, h, kind, spec[l, h].tolist(), dom, counts.tolist(), top, dist))
    return rows


def alignment_summary(rows, max_distance: int = 2) -> dict:
    scored = [r for r in rows if r.alignment_distance != UNDEFINED]
    hits = [r for r in scored if r.alignment_distance <= max_distance]
    # a (layer, head) pair counts as aligned only if all its scored rows are
    pairs = {}
    for r in scored:
        pairs.setdefault((r.layer, r.head), []).append(r.alignment_distance <= max_distance)
    return {
        "n_pairs_scored": len(pairs),
        "n_pairs_aligned": sum(all(v) for v in pairs.values()),
        "n_rows": len(rows),
        "n_scored": len(scored),
        "n_aligned": len(hits),
        "fraction_aligned": len(hits) / len(scored) if scored else float("nan"),
        "max_distance": max_distance,
    }


@dataclass
class SinkShiftReport:
    threshold: float
    ratio: list  # per layer
    mean_change: list  # per layer, signed
    n_rows: list
    n_shifted: list
    per_head_ratio: list  # per layer, list over heads
    shifted: list = field(default_factory=list)  # (layer, batch, head, query) tuples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shifted"] = [list(map(int, s)) for s in self.shifted]
        return d


def _as_bhtt(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
        raise AnalysisError(f"attention maps must be (B, H, T, T) or (H, T, T), got {a.shape}")
    return a


def sink_shift(attn_base, attn_perturbed, threshold: float = SINK_THRESHOLD, lengths=None) -> SinkShiftReport:
    """Flag query rows whose first-column (BOS) attention moved by more than ``threshold``."""
    if len(attn_base) != len(attn_perturbed):
        raise AnalysisError("different number of layers")
    ratio, mean_change, n_rows, n_shift, per_head, shifted = [], [], [], [], [], []
    for l, (a0, a1) in enumerate(zip(attn_base, attn_perturbed)):
        a0, a1 = _as_bhtt(a0), _as_bhtt(a1)
        if a0.shape != a1.shape:
            raise AnalysisError(f"layer {l}: shape mismatch {a0.shape} vs {a1.shape}")
        B, H, T, _ = a0.shape
        lens = np.full(B, T) if lengths is None else np.asarray(lengths)
        valid = np.arange(T)[None, :] < lens[:, None]  # (B, T)
        vmask = np.broadcast_to(valid[:, None, :], (B, H, T))
        for a in (a0, a1):
            sums = a.sum(axis=-1)
            if np.any(np.abs(sums[vmask] - 1.0) > 1e-4):
                raise AnalysisError(f"layer {l}: attention rows are not normalized")
        delta = a1[..., 0] - a0[..., 0]  # (B, H, T)
        flag = (np.abs(delta) > threshold) & vmask
        n = int(vmask.sum())
        ratio.append(float(flag.sum() / n))
        mean_change.append(float(delta[vmask].mean()))
        n_rows.append(n)
        n_shift.append(int(flag.sum()))
        per_head.append([float(flag[:, h].sum() / vmask[:, h].sum()) for h in range(H)])
        shifted.extend((l, b, h, t) for b, h, t in zip(*np.nonzero(flag)))
    return SinkShiftReport(threshold, ratio, mean_change, n_rows, n_shift, per_head, shifted)


STAT_KEYS = ("q_norm", "k_bos_norm", "k_others_norm", "angle_q_k_bos", "angle_q_k_others")


@dataclass
class GeometryReport:
    states: dict  # state name -> {stat: mean}
    delta_01: dict
    delta_12: dict
    n_selected: int
    per_layer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _row_stats(q, keys, i):
    kb = keys[0]
    others = keys[1 : i + 1]
    st = {
        "q_norm": numeric.vector_norm(q),
        "k_bos_norm": numeric.vector_norm(kb),
        "angle_q_k_bos": numeric.angle_degrees(q, kb),
        "k_others_norm": np.nan,
        "angle_q_k_others": np.nan,
    }
    if len(others):
        st["k_others_norm"] = float(np.mean([numeric.vector_norm(k) for k in others]))
        st["angle_q_k_others"] = float(np.mean([numeric.angle_degrees(q, k) for k in others]))
    return st


def _mean_stats(rows):
    out = {}
    for k in STAT_KEYS:
        vals = [r[k] for r in rows if not np.isnan(r[k])]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


def geometry_report(trace_base: ForwardTrace, trace_rotated: ForwardTrace, trace_perturbed: ForwardTrace, selection=None) -> GeometryReport:
    """Norm/angle statistics of selected queries against k_BOS and the other visible keys.

    States: 0 = before RoPE (``trace_base`` pre-rotation activations),
    1 = after RoPE (``trace_rotated``), 2 = after perturbation
    (``trace_perturbed``, post-rotation). ``selection`` lists
    (layer, batch, head, query position); by default every valid row.
    """
    for t in (trace_base, trace_rotated, trace_perturbed):
        if not t.captured:
            raise AnalysisError("all traces need captured activations")
    if not (
        np.array_equal(trace_base.tokens, trace_rotated.tokens)
        and np.array_equal(trace_base.tokens, trace_perturbed.tokens)
    ):
        raise AnalysisError("traces were produced from different inputs")
    if selection is None:
        selection = []
        for l in range(len(trace_base.q_pre)):
            B, H, _, _ = trace_base.q_pre[l].shape
            for b in range(B):
                for h in range(H):
                    selection.extend((l, b, h, i) for i in range(int(trace_base.lengths[b])))
    selection = [tuple(int(x) for x in s) for s in selection]
    sources = {
        "before_rope": (trace_base.q_pre, trace_base.k_pre),
        "after_rope": (trace_rotated.q_post, trace_rotated.k_post),
        "after_perturbation": (trace_perturbed.q_post, trace_perturbed.k_post),
    }
    states, per_layer = {}, {}
    for state, (Q, K) in sources.items():
        rows = []
        by_layer = {}
        for l, b, h, i in selection:
            st = _row_stats(Q[l][b, h, i], K[l][b, h], i)
            rows.append(st)
            by_layer.setdefault(l, []).append(st)
        states[state] = _mean_stats(rows)
        per_layer[state] = {l: _mean_stats(r) for l, r in sorted(by_layer.items())}
    s0, s1, s2 = (states[k] for k in sources)
    d01 = {k: s1[k] - s0[k] for k in STAT_KEYS}
    d12 = {k: s2[k] - s1[k] for k in STAT_KEYS}
    return GeometryReport(states, d01, d12, len(selection), per_layer)


@dataclass
class DeltaAttnDecomposition:
    delta: np.ndarray
    term1: np.ndarray  # Q dK^T
    term2: np.ndarray  # dQ K^T
    term3: np.ndarray  # dQ dK^T
    residual: float

    def summary(self) -> dict:
        def mx(a):
            return float(np.max(np.abs(a))) if a.size else 0.0

        return {
            "max_abs_delta": mx(self.delta),
            "max_abs_term1": mx(self.term1),
            "max_abs_term2": mx(self.term2),
            "max_abs_term3": mx(self.term3),
            "residual": self.residual,
        }


def delta_attention(Q, K, dQ, dK) -> DeltaAttnDecomposition:
    """(Q + dQ)(K + dK)^T - Q K^T split into Q dK^T + dQ K^T + dQ dK^T."""
    Q, K, dQ, dK = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (Q, K, dQ, dK))
    if Q.shape != dQ.shape or K.shape != dK.shape or Q.shape[1] != K.shape[1]:
        raise AnalysisError(f"incompatible shapes Q{Q.shape} K{K.shape} dQ{dQ.shape} dK{dK.shape}")
    A = Q @ K.T
    delta = (Q + dQ) @ (K + dK).T - A
    t1 = Q @ dK.T
    t2 = dQ @ K.T
    t3 = dQ @ dK.T
    resid = float(np.max(np.abs(t1 + t2 + t3 - delta))) if delta.size else 0.0
    return DeltaAttnDecomposition(delta, t1, t2, t3, resid)


def restrict_to_frequencies(x, freqs, rope: RopeConfig):
    """Zero every feature of ``x`` (last axis = head_dim) outside the given rotary pairs."""
    x = np.asarray(x)
    keep = np.zeros(rope.head_dim, dtype=bool)
    for m in freqs:
        a, b = pair_indices(int(m), rope)
        keep[a] = keep[b] = True
    return np.where(keep, x, 0.0)


def head_delta_attention(trace: ForwardTrace, trace_perturbed: ForwardTrace, layer: int, head: int, batch: int = 0, freqs_q=None, freqs_k=None, rope: RopeConfig = None) -> DeltaAttnDecomposition:
    """Decompose the score change of one head, optionally keeping only some frequencies of dQ/dK."""
    n = int(trace.lengths[batch])
    Q = trace.q_post[layer][batch, head, :n]
    K = trace.k_post[layer][batch, head, :n]
    dQ = trace_perturbed.q_post[layer][batch, head, :n] - Q
    dK = trace_perturbed.k_post[layer][batch, head, :n] - K
    if freqs_q is not None:
        dQ = restrict_to_frequencies(dQ, freqs_q, rope)
    if freqs_k is not None:
        dK = restrict_to_frequencies(dK, freqs_k, rope)
    return delta_attention(Q, K, dQ, dK)


def perturbed_weight_magnitudes(ckpt: Checkpoint, mask: SparsityMask) -> dict:
    """Mean and max |w| of the masked (to-be-perturbed) entries, per matrix."""
    out = {}
    for name, m in mask.masks.items():
        vals = np.abs(ckpt.params[name][m].astype(np.float64))
        all_abs = np.abs(ckpt.params[name].astype(np.float64))
        out[name] = {
            "count": int(vals.size),
            "mean_abs": float(vals.mean()) if vals.size else float("nan"),
            "max_abs": float(vals.max()) if vals.size else float("nan"),
            "matrix_mean_abs": float(all_abs.mean()),
        }
    return out
