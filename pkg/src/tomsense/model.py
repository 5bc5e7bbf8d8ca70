"""A small pre-norm RoPE decoder with hand-written backprop.

Each block is

    h  = rms(x) * g_attn
    x += Attn(h W_Q^T, h W_K^T, h W_V^T) W_O^T      (RoPE on q and k, causal)
    h  = rms(x) * g_mlp
    x += (silu(h W_Gate^T) * h W_Up^T) W_Down^T

and the head reads rms(x) * g_final. Weight matrices are stored
out_features x in_features. Batches are right-padded; with a causal mask the
padding never influences real positions, so it needs no extra masking.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numeric
from .rope import HALF_SPLIT, RopeConfig, cos_sin_table, rotate

SENSITIVE_MATRICES = ("W_Q", "W_K", "W_V", "W_O", "W_Gate", "W_Up", "W_Down")
FINAL_TOKEN = "final-token"
ALL_TOKENS = "all-tokens"
LOSS_MODES = (FINAL_TOKEN, ALL_TOKENS)
RMS_EPS = 1e-6


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    """Token ids, lengths or target alignment are invalid."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    rope_base: float = 50000.0
    rope_layout: str = HALF_SPLIT
    rope_rotate: bool = True
    tie_embeddings: bool = False
    dtype: str = "float32"
    architecture: str = "rope-decoder"

    def __post_init__(self):
        if self.architecture != "rope-decoder":
            # state-space / hybrid architectures are not implemented
            raise ConfigError(
                f"architecture {self.architecture!r} is not supported; only 'rope-decoder' is implemented"
            )
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            self.rope
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def d_h(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.d_h, self.rope_base, self.rope_layout, self.rope_rotate)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def matrix_name(layer: int, kind: str) -> str:
    return f"layers.{layer}.{kind}"


def param_shapes(cfg: ModelConfig) -> dict:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (V, D)}
    for l in range(cfg.n_layers):
        shapes[f"layers.{l}.attn_norm"] = (D,)
        for k in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[matrix_name(l, k)] = (D, D)
        shapes[f"layers.{l}.mlp_norm"] = (D,)
        shapes[matrix_name(l, "W_Gate")] = (F, D)
        shapes[matrix_name(l, "W_Up")] = (F, D)
        shapes[matrix_name(l, "W_Down")] = (D, F)
    shapes["final_norm"] = (D,)
    if not cfg.tie_embeddings:
        shapes["head"] = (V, D)
    return shapes


def sensitive_names(cfg: ModelConfig) -> list:
    return [matrix_name(l, k) for l in range(cfg.n_layers) for k in SENSITIVE_MATRICES]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = set(shapes) - set(self.params)
            extra = set(self.params) - set(shapes)
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in shapes.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            arr.setflags(write=False)

    @property
    def matrix_names(self) -> list:
        return sensitive_names(self.config)

    def with_params(self, updates: dict, meta=None) -> "Checkpoint":
        params = dict(self.params)
        params.update(updates)
        return Checkpoint(self.config, params, dict(self.meta if meta is None else meta))

    def astype(self, dtype: str) -> "Checkpoint":
        cfg = replace(self.config, dtype=dtype)
        return Checkpoint(cfg, {k: v.astype(dtype) for k, v in self.params.items()}, dict(self.meta))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_checkpoint(cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=dt)
        elif name in ("embed", "head"):
            params[name] = (rng.standard_normal(shape) * 0.02 * math.sqrt(64 / cfg.d_model) * 5).astype(dt)
        else:
            fan_in = shape[1]
            std = 1.0 / math.sqrt(fan_in)
            if name.endswith(("W_O", "W_Down")):
                std /= math.sqrt(2 * cfg.n_layers)
            params[name] = (rng.standard_normal(shape) * std).astype(dt)
    return Checkpoint(cfg, params, {"seed": seed, "trained_steps": 0})


@dataclass
class ForwardTrace:
    """Captured activations for a right-padded batch.

    Per layer: ``q_pre``/``k_pre`` (before RoPE), ``q_post``/``k_post`` (after)
    and ``attn``, each shaped (B, H, T, .). ``lengths`` marks the valid prefix
    of every row.
    """

    tokens: np.ndarray
    lengths: np.ndarray
    logits: np.ndarray
    q_pre: list = field(default_factory=list)
    k_pre: list = field(default_factory=list)
    q_post: list = field(default_factory=list)
    k_post: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    captured: bool = False

    @property
    def final_logits(self) -> np.ndarray:
        return self.logits[np.arange(len(self.lengths)), self.lengths - 1]

    def token_logprobs(self) -> np.ndarray:
        """log p(tokens[t+1] | tokens[:t+1]) shaped (B, T-1); padded slots are NaN."""
        lp = numeric.log_softmax(self.logits[:, :-1])
        nxt = self.tokens[:, 1:]
        out = np.take_along_axis(lp, nxt[..., None], axis=-1)[..., 0]
        valid = np.arange(out.shape[1])[None, :] < (self.lengths[:, None] - 1)
        return np.where(valid, out, np.nan)


def pad_batch(seqs, cfg: ModelConfig, pad_id: int = 0):
    if len(seqs) == 0:
        raise InputError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() < 1:
        raise InputError("empty token sequence")
    if lengths.max() > cfg.max_seq_len:
        raise InputError(f"sequence length {lengths.max()} exceeds max_seq_len {cfg.max_seq_len}")
    tokens = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= cfg.vocab_size):
            raise InputError(f"token id out of range [0, {cfg.vocab_size}) in sequence {i}")
        tokens[i, : len(s)] = s
    return tokens, lengths


def _rms_forward(x, g):
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    r = (1.0 / np.sqrt(ms + RMS_EPS)).astype(x.dtype)
    xn = x * r
    return xn * g, (xn, r)


def _rms_backward(dy, g, cache):
    xn, r = cache
    dg = (dy * xn).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxn = dy * g
    dot = np.mean(dxn * xn, axis=-1, keepdims=True)
    return r * (dxn - xn * dot), dg


def _causal_bias(T, dtype):
    bias = np.zeros((T, T), dtype=dtype)
    bias[np.triu_indices(T, 1)] = -np.inf
    return bias


def _head(params, cfg):
    return params["embed"] if cfg.tie_embeddings else params["head"]


def _forward(ckpt: Checkpoint, tokens: np.ndarray):
    cfg = ckpt.config
    p = ckpt.params
    dt = cfg.np_dtype
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_h
    rc = cfg.rope
    table = cos_sin_table(T, rc, dt)
    bias = _causal_bias(T, dt)
    scale = dt.type(1.0 / math.sqrt(dh))

    x = p["embed"][tokens].astype(dt)
    layers = []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        h, n1 = _rms_forward(x, p[pre + "attn_norm"])
        q = (h @ p[pre + "W_Q"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ p[pre + "W_K"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ p[pre + "W_V"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        qr = rotate(q, rc, table=table)
        kr = rotate(k, rc, table=table)
        s = (qr @ kr.transpose(0, 1, 3, 2)) * scale + bias
        P = numeric.softmax_rows(s)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x1 = x + o @ p[pre + "W_O"].T
        h2, n2 = _rms_forward(x1, p[pre + "mlp_norm"])
        a = h2 @ p[pre + "W_Gate"].T
        u = h2 @ p[pre + "W_Up"].T
        sa = numeric.silu(a)
        m = sa * u
        x = x1 + m @ p[pre + "W_Down"].T
        layers.append(
            dict(h=h, n1=n1, q=q, k=k, v=v, qr=qr, kr=kr, P=P, o=o, h2=h2, n2=n2, a=a, u=u, sa=sa, m=m)
        )
    hf, nf = _rms_forward(x, p["final_norm"])
    logits = hf @ _head(p, cfg).T
    cache = dict(tokens=tokens, layers=layers, hf=hf, nf=nf, table=table, scale=scale)
    return logits, cache


def forward_batch(ckpt: Checkpoint, seqs, capture: bool = True, pad_id: int = 0) -> ForwardTrace:
    tokens, lengths = pad_batch(seqs, ckpt.config, pad_id)
    logits, cache = _forward(ckpt, tokens)
    trace = ForwardTrace(tokens=tokens, lengths=lengths, logits=logits, captured=capture)
    if capture:
        for c in cache["layers"]:
            trace.q_pre.append(c["q"])
            trace.k_pre.append(c["k"])
            trace.q_post.append(c["qr"])
            trace.k_post.append(c["kr"])
            trace.attn.append(c["P"])
    return trace


def forward(ckpt: Checkpoint, tokens, capture: bool = True) -> ForwardTrace:
    """Single-sequence forward pass."""
    return forward_batch(ckpt, [list(tokens)], capture=capture)


def _backward(ckpt: Checkpoint, cache, dlogits, per_sample: bool = False, only_sensitive: bool = False):
    """Reverse pass from dL/dlogits.

    With ``per_sample`` the seven named matrices get one gradient per batch row,
    shaped (B, out, in); everything else is summed over the batch.
    """
    cfg = ckpt.config
    p = ckpt.params
    B, T, _ = dlogits.shape
    H, dh = cfg.n_heads, cfg.d_h
    rc = cfg.rope
    table = cache["table"]
    scale = cache["scale"]
    tokens = cache["tokens"]
    grads = {}

    def wgrad(dy, x):
        if per_sample:
            return np.einsum("bto,bti->boi", dy, x)
        return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])

    head = _head(p, cfg)
    dhf = dlogits @ head
    if not only_sensitive:
        dhead = dlogits.reshape(-1, dlogits.shape[-1]).T @ cache["hf"].reshape(-1, cfg.d_model)
    dx, dgf = _rms_backward(dhf, p["final_norm"], cache["nf"])
    if not only_sensitive:
        grads["final_norm"] = dgf
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        c = cache["layers"][l]
        # MLP
        grads[pre + "W_Down"] = wgrad(dx, c["m"])
        dm = dx @ p[pre + "W_Down"]
        dsa = dm * c["u"]
        du = dm * c["sa"]
        sig = numeric.sigmoid(c["a"])
        da = dsa * (sig * (1 + c["a"] * (1 - sig)))
        grads[pre + "W_Gate"] = wgrad(da, c["h2"])
        grads[pre + "W_Up"] = wgrad(du, c["h2"])
        dh2 = da @ p[pre + "W_Gate"] + du @ p[pre + "W_Up"]
        dx1, dg2 = _rms_backward(dh2, p[pre + "mlp_norm"], c["n2"])
        dx1 = dx1 + dx
        # attention
        grads[pre + "W_O"] = wgrad(dx1, c["o"])
        do = (dx1 @ p[pre + "W_O"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        P = c["P"]
        dP = do @ c["v"].transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ do
        ds = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
        dqr = ds @ c["kr"]
        dkr = ds.transpose(0, 1, 3, 2) @ c["qr"]
        dq = rotate(dqr, rc, inverse=True, table=table)
        dk = rotate(dkr, rc, inverse=True, table=table)

        def flat(t):
            return t.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)

        dq, dk, dv = flat(dq), flat(dk), flat(dv)
        grads[pre + "W_Q"] = wgrad(dq, c["h"])
        grads[pre + "W_K"] = wgrad(dk, c["h"])
        grads[pre + "W_V"] = wgrad(dv, c["h"])
        dhn = dq @ p[pre + "W_Q"] + dk @ p[pre + "W_K"] + dv @ p[pre + "W_V"]
        dx0, dg1 = _rms_backward(dhn, p[pre + "attn_norm"], c["n1"])
        dx = dx0 + dx1
        if not only_sensitive:
            grads[pre + "mlp_norm"] = dg2
            grads[pre + "attn_norm"] = dg1
    if not only_sensitive:
        dE = np.zeros_like(p["embed"])
        np.add.at(dE, tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
        if cfg.tie_embeddings:
            dE = dE + dhead
        else:
            grads["head"] = dhead
        grads["embed"] = dE
    return grads


@dataclass
class Sample:
    """Input tokens plus aligned targets.

    all-tokens: ``targets[t]`` is the token following ``tokens[t]``.
    final-token: a single target for the position after the last input token.
    """

    tokens: list
    targets: list


def _check_sample(sample: Sample, mode: str):
    if mode not in LOSS_MODES:
        raise InputError(f"unknown loss mode {mode!r}")
    if mode == FINAL_TOKEN and len(sample.targets) != 1:
        raise InputError(f"final-token mode needs exactly one target, got {len(sample.targets)}")
    if mode == ALL_TOKENS and len(sample.targets) != len(sample.tokens):
        raise InputError(
            f"all-tokens mode needs one target per input token ({len(sample.tokens)}), got {len(sample.targets)}"
        )


def _loss_weights(samples, mode, lengths, T):
    """Target ids and per-position weights so each sample's loss is a mean over its selection."""
    B = len(samples)
    tgt = np.zeros((B, T), dtype=np.int64)
    w = np.zeros((B, T), dtype=np.float64)
    for b, s in enumerate(samples):
        _check_sample(s, mode)
        if mode == FINAL_TOKEN:
            tgt[b, lengths[b] - 1] = s.targets[0]
            w[b, lengths[b] - 1] = 1.0
        else:
            tgt[b, : lengths[b]] = s.targets
            w[b, : lengths[b]] = 1.0 / lengths[b]
    return tgt, w


def _loss_and_dlogits(logits, tgt, w, vocab_size):
    """Per-sample losses and dL_b/dlogits (not yet batch-averaged)."""
    if tgt.max() >= vocab_size or tgt.min() < 0:
        raise InputError("target id out of vocabulary range")
    lp = numeric.log_softmax(logits)
    B, T = tgt.shape
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    losses = -np.sum(np.where(w > 0, picked, 0.0) * w, axis=1)
    probs = np.exp(lp)
    probs[np.arange(B)[:, None], np.arange(T)[None, :], tgt] -= 1.0
    dlogits = probs * w[..., None]
    return losses, dlogits.astype(logits.dtype)


def sample_losses(ckpt: Checkpoint, samples, mode: str) -> np.ndarray:
    tokens, lengths = pad_batch([s.tokens for s in samples], ckpt.config)
    logits, _ = _forward(ckpt, tokens)
    tgt, w = _loss_weights(samples, mode, lengths, tokens.shape[1])
    losses, _ = _loss_and_dlogits(logits, tgt, w, ckpt.config.vocab_size)
    return losses


def loss(ckpt: Checkpoint, tokens, targets, mode: str) -> float:
    """Mean cross-entropy over the positions selected by ``mode``."""
    return float(sample_losses(ckpt, [Sample(list(tokens), list(targets))], mode)[0])


def per_sample_grads_batch(ckpt: Checkpoint, samples, mode: str) -> dict:
    """Gradients of each sample's own loss for the seven named matrices, stacked on axis 0."""
    tokens, lengths = pad_batch([s.tokens for s in samples], ckpt.config)
    logits, cache = _forward(ckpt, tokens)
    tgt, w = _loss_weights(samples, mode, lengths, tokens.shape[1])
    _, dlogits = _loss_and_dlogits(logits, tgt, w, ckpt.config.vocab_size)
    return _backward(ckpt, cache, dlogits, per_sample=True, only_sensitive=True)


def per_sample_grad(ckpt: Checkpoint, sample: Sample, mode: str) -> dict:
    """Gradient of one sample's loss w.r.t. every W_Q..W_Down, keyed by matrix name."""
    _check_sample(sample, mode)
    tokens, lengths = pad_batch([sample.tokens], ckpt.config)
    logits, cache = _forward(ckpt, tokens)
    tgt, w = _loss_weights([sample], mode, lengths, tokens.shape[1])
    _, dlogits = _loss_and_dlogits(logits, tgt, w, ckpt.config.vocab_size)
    return _backward(ckpt, cache, dlogits, per_sample=False, only_sensitive=True)


def loss_and_grads(ckpt: Checkpoint, samples, mode: str):
    """Batch-mean loss and its gradient for every parameter (used for training)."""
    tokens, lengths = pad_batch([s.tokens for s in samples], ckpt.config)
    logits, cache = _forward(ckpt, tokens)
    tgt, w = _loss_weights(samples, mode, lengths, tokens.shape[1])
    losses, dlogits = _loss_and_dlogits(logits, tgt, w, ckpt.config.vocab_size)
    dlogits = dlogits / len(samples)
    return float(np.mean(losses)), _backward(ckpt, cache, dlogits)


def greedy_next(ckpt: Checkpoint, seqs) -> np.ndarray:
    """argmax next token after each sequence (ties go to the lowest id)."""
    trace = forward_batch(ckpt, seqs, capture=False)
    return np.argmax(trace.final_logits, axis=-1)


def sequence_to_sample(seq) -> Sample:
    """Next-token sample from a full sequence: predict seq[1:] from seq[:-1]."""
    seq = list(seq)
    if len(seq) < 2:
        raise InputError("need at least two tokens to form a next-token sample")
    return Sample(seq[:-1], seq[1:])


@dataclass
class AdamConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    warmup: int = 100
    grad_clip: float = 1.0


def train_toy(cfg: ModelConfig, corpus, steps: int, seed: int = 0, adam: AdamConfig = None, log_every=0, logger=None):
    """Train from a seeded init on ``corpus`` (a list of token sequences) with Adam.

    Linear warmup, global-norm clipping and cosine decay to 10% of the peak
    learning rate. Deterministic given ``seed``. Batches are drawn uniformly with replacement;
    the loss is next-token cross-entropy averaged over each sequence.
    """
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise InputError("empty training corpus")
    adam = adam or AdamConfig()
    ckpt = init_checkpoint(cfg, seed)
    if steps == 0:
        return ckpt
    rng = np.random.default_rng([seed, 1])
    params = {k: v.copy() for k, v in ckpt.params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    samples = [sequence_to_sample(s) for s in corpus]
    history = []
    loss_val = float("nan")
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(samples), size=adam.batch_size)
        batch = [samples[i] for i in idx]
        cur = Checkpoint(cfg, params, {})
        loss_val, grads = loss_and_grads(cur, batch, ALL_TOKENS)
        params = {k: v.copy() for k, v in params.items()}
        gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        clip = min(1.0, adam.grad_clip / (gnorm + 1e-12)) if adam.grad_clip else 1.0
        lr = adam.lr * min(1.0, step / adam.warmup) if adam.warmup else adam.lr
        # cosine decay to 10% over the run
        lr *= 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / steps))
        b1c = 1 - adam.beta1**step
        b2c = 1 - adam.beta2**step
        for k in params:
            g = grads[k] * clip
            m[k] = adam.beta1 * m[k] + (1 - adam.beta1) * g
            v2[k] = adam.beta2 * v2[k] + (1 - adam.beta2) * g * g
            params[k] -= (lr * (m[k] / b1c) / (np.sqrt(v2[k] / b2c) + adam.eps)).astype(params[k].dtype)
        if step == 1 or step == steps or (log_every and step % log_every == 0):
            history.append((step, loss_val))
            if logger is not None:
                logger.info("step %d loss %.4f", step, loss_val)
    meta = {
        "seed": seed,
        "trained_steps": steps,
        "final_train_loss": loss_val,
        "loss_history": history,
        "adam": asdict(adam),
    }
    return Checkpoint(cfg, params, meta)
