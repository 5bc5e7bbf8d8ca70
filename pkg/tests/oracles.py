"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code; each oracle is written
straight from the defining formulas with plain loops.
"""

import math
from fractions import Fraction

import numpy as np


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r, k = a.shape
    k2, c = b.shape
    assert k == k2
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def rot2(angle):
    return np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])


def pair_slots(m, d_h, layout):
    if layout == "interleaved-pairs":
        return 2 * m, 2 * m + 1
    return m, m + d_h // 2


def rope_vector(x, pos, base, layout, rotate=True):
    """Rotate every pair of ``x`` by pos * base^(-2m/d_h), one explicit 2x2 matrix at a time."""
    d_h = len(x)
    out = np.array(x, dtype=np.float64)
    if not rotate:
        return out
    for m in range(d_h // 2):
        a, b = pair_slots(m, d_h, layout)
        ang = pos * base ** (-2.0 * m / d_h)
        out[[a, b]] = rot2(ang) @ np.array([x[a], x[b]], dtype=np.float64)
    return out


def rope_score(q, k, i, j, base, layout):
    return float(np.dot(rope_vector(q, i, base, layout), rope_vector(k, j, base, layout)))


def _rms(x, g, eps=1e-6):
    return x / math.sqrt(sum(v * v for v in x) / len(x) + eps) * g


def _silu(a):
    return a / (1.0 + math.exp(-a))


def reference_logits(cfg, params, tokens):
    """Straight-line decoder: per-position loops, float64, explicit causal softmax."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    D, H = cfg.d_model, cfg.n_heads
    d_h = D // H
    T = len(tokens)
    xs = [P["embed"][t].copy() for t in tokens]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        hs = [_rms(x, P[pre + "attn_norm"]) for x in xs]
        qs = [P[pre + "W_Q"] @ h for h in hs]
        ks = [P[pre + "W_K"] @ h for h in hs]
        vs = [P[pre + "W_V"] @ h for h in hs]
        outs = []
        for t in range(T):
            o = np.zeros(D)
            for hd in range(H):
                sl = slice(hd * d_h, (hd + 1) * d_h)
                qt = rope_vector(qs[t][sl], t, cfg.rope_base, cfg.rope_layout, cfg.rope_rotate)
                scores = []
                for j in range(t + 1):
                    kj = rope_vector(ks[j][sl], j, cfg.rope_base, cfg.rope_layout, cfg.rope_rotate)
                    scores.append(float(qt @ kj) / math.sqrt(d_h))
                mx = max(scores)
                ex = [math.exp(s - mx) for s in scores]
                z = sum(ex)
                for j in range(t + 1):
                    o[sl] += ex[j] / z * vs[j][sl]
            outs.append(o)
        xs = [x + P[pre + "W_O"] @ o for x, o in zip(xs, outs)]
        new = []
        for x in xs:
            h2 = _rms(x, P[pre + "mlp_norm"])
            a = P[pre + "W_Gate"] @ h2
            u = P[pre + "W_Up"] @ h2
            m = np.array([_silu(ai) * ui for ai, ui in zip(a, u)])
            new.append(x + P[pre + "W_Down"] @ m)
        xs = new
    head = P["embed"] if cfg.tie_embeddings else P["head"]
    return np.stack([head @ _rms(x, P["final_norm"]) for x in xs])


def reference_nll(logits_rows, targets):
    """Sum of -log softmax(row)[target], via math.fsum of exps."""
    total = 0.0
    for row, t in zip(logits_rows, targets):
        mx = max(row)
        lse = mx + math.log(math.fsum(math.exp(v - mx) for v in row))
        total += lse - row[t]
    return total


def rational_rank(mat) -> int:
    """Gauss-Jordan over Fractions."""
    rows = [[Fraction(int(x)) for x in r] for r in np.asarray(mat)]
    if not rows:
        return 0
    n_cols = len(rows[0])
    rank = 0
    for c in range(n_cols):
        piv = next((r for r in range(rank, len(rows)) if rows[r][c] != 0), None)
        if piv is None:
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        pv = rows[rank][c]
        rows[rank] = [x / pv for x in rows[rank]]
        for r in range(len(rows)):
            if r != rank and rows[r][c] != 0:
                f = rows[r][c]
                rows[r] = [x - f * y for x, y in zip(rows[r], rows[rank])]
        rank += 1
    return rank


def hypergeom_tail(N, K, n, k_min) -> float:
    """P(X >= k_min) for X ~ Hypergeometric(population N, K successes, n draws), exact."""
    denom = math.comb(N, n)
    return sum(Fraction(math.comb(K, k) * math.comb(N - K, n - k), denom) for k in range(k_min, min(K, n) + 1)).__float__()
