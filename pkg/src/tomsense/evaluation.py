"""Behavioral evaluations: perplexity, contextual localization, toy-ToM accuracy and the kappa sweep."""

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from decimal import Decimal

import numpy as np

from . import numeric
from .data import TASK_CONDITIONS, Vocab, localization_prompt
from .masking import build_topk_mask, combine_masks
from .model import Checkpoint, forward_batch, pad_batch
from .perturbation import apply_mean_perturbation, revert

DEFAULT_KAPPA_GRID = "0:5e-5:2e-6"
DEFAULT_LOCALIZATION_LENGTHS = (2, 4, 6, 8, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


class EvalError(ValueError):
    pass


def parse_grid(spec: str) -> list:
    """``start:stop:step`` (inclusive stop) or a comma list. Decimal arithmetic, so 0:5e-5:2e-6 has 26 points."""
    spec = spec.strip()
    if ":" not in spec:
        vals = [float(x) for x in spec.split(",") if x.strip()]
        if not vals:
            raise EvalError("empty kappa grid")
        return vals
    try:
        start, stop, step = (Decimal(x) for x in spec.split(":"))
    except Exception:
        raise EvalError(f"bad grid spec {spec!r}; expected start:stop:step") from None
    if step <= 0 or stop < start:
        raise EvalError(f"bad grid spec {spec!r}")
    n = int((stop - start) / step) + 1
    return [float(start + i * step) for i in range(n)]


def _batched(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def sequence_nll(ckpt: Checkpoint, inputs, targets, batch_size: int = 32) -> tuple:
    """Sum of next-token NLL and token count over (inputs, targets) pairs."""
    total, count = 0.0, 0
    pairs = list(zip(inputs, targets))
    for chunk in _batched(pairs, batch_size):
        trace = forward_batch(ckpt, [p[0] for p in chunk], capture=False)
        lp = numeric.log_softmax(trace.logits)
        for b, (_, tg) in enumerate(chunk):
            tg = np.asarray(tg)
            total -= float(np.sum(lp[b, np.arange(len(tg)), tg]))
            count += len(tg)
    return total, count


def perplexity(ckpt: Checkpoint, stream, window: int, bos_id=None, batch_size: int = 32) -> float:
    """exp(mean NLL) over non-overlapping windows of ``window`` tokens.

    With ``bos_id`` each window is scored in full after a BOS token; otherwise
    its first token only serves as context.
    """
    stream = list(stream)
    if window < 2 and bos_id is None:
        raise EvalError("window must be >= 2 without a BOS token")
    if len(stream) < window:
        raise EvalError(f"token stream ({len(stream)}) shorter than window ({window})")
    inputs, targets = [], []
    for start in range(0, len(stream) - window + 1, window):
        w = stream[start : start + window]
        if bos_id is not None:
            inputs.append([bos_id] + w[:-1])
            targets.append(w)
        else:
            inputs.append(w[:-1])
            targets.append(w[1:])
    total, count = sequence_nll(ckpt, inputs, targets, batch_size)
    return math.exp(total / count)


def similarity(x, y) -> float:
    """Fraction of input positions whose token occurs anywhere in the output."""
    if len(x) == 0:
        raise EvalError("empty input sequence")
    ys = set(int(t) for t in y)
    return sum(1 for t in x if int(t) in ys) / len(x)


def greedy_generate(ckpt: Checkpoint, prompts, max_new: int, eos_id=None) -> list:
    """Greedy continuation for a batch of prompts; generation stops at EOS or max_seq_len."""
    seqs = [list(p) for p in prompts]
    out = [[] for _ in seqs]
    done = [False] * len(seqs)
    limit = ckpt.config.max_seq_len
    for _ in range(max_new):
        live = [i for i, d in enumerate(done) if not d and len(seqs[i]) < limit]
        if not live:
            break
        trace = forward_batch(ckpt, [seqs[i] for i in live], capture=False)
        nxt = np.argmax(trace.final_logits, axis=-1)
        for i, t in zip(live, nxt):
            t = int(t)
            if eos_id is not None and t == eos_id:
                done[i] = True
                continue
            seqs[i].append(t)
            out[i].append(t)
    return out


@dataclass
class LocalizationCase:
    x: list
    y: list
    s: float


def localization_eval(ckpt: Checkpoint, corpus, vocab: Vocab, lengths=DEFAULT_LOCALIZATION_LENGTHS, n_per_length: int = 100, seed: int = 0, keep_cases: bool = False) -> dict:
    """Mean similarity per segment length for the repeat-the-text task.

    Segments are sampled uniformly from ``corpus`` (a token stream); the model
    gets up to 2n+8 new tokens.
    """
    corpus = list(corpus)
    rng = np.random.default_rng([seed, 17])
    curve, cases = {}, {}
    for n in lengths:
        if len(corpus) < n:
            raise EvalError(f"corpus of {len(corpus)} tokens cannot supply segments of length {n}")
        starts = rng.integers(0, len(corpus) - n + 1, size=n_per_length)
        segs = [corpus[s : s + n] for s in starts]
        prompts = [localization_prompt(seg, vocab) for seg in segs]
        if len(prompts[0]) >= ckpt.config.max_seq_len:
            raise EvalError(f"prompt for length {n} does not fit max_seq_len {ckpt.config.max_seq_len}")
        ys = greedy_generate(ckpt, prompts, 2 * n + 8, vocab.eos_id)
        scores = [similarity(x, y) for x, y in zip(segs, ys)]
        curve[int(n)] = float(np.mean(scores))
        if keep_cases:
            cases[int(n)] = [LocalizationCase(x, y, s) for x, y, s in zip(segs, ys, scores)]
    return {"curve": curve, "cases": cases} if keep_cases else {"curve": curve}


def tom_eval(ckpt: Checkpoint, dataset, vocab: Vocab, batch_size: int = 64) -> dict:
    """Exact greedy next-token accuracy per (task, condition).

    Buckets with no prompts are absent from the result. ``mean`` averages the
    present buckets; ``overall`` pools every prompt.
    """
    items = []
    for ex in dataset:
        for ids, tid in ex.encoded_prompts(vocab):
            items.append((ex.task, ex.condition, ids, tid))
    if not items:
        raise EvalError("empty ToM dataset")
    preds = []
    for chunk in _batched(items, batch_size):
        trace = forward_batch(ckpt, [it[2] for it in chunk], capture=False)
        preds.extend(int(t) for t in np.argmax(trace.final_logits, axis=-1))
    hits = defaultdict(list)
    for (task, cond, _, tid), p in zip(items, preds):
        hits[(task, cond)].append(p == tid)
    per = {}
    for task, conds in TASK_CONDITIONS.items():
        for cond in conds:
            if (task, cond) in hits:
                per[f"{task}/{cond}"] = float(np.mean(hits[(task, cond)]))
    correct = sum(sum(h) for h in hits.values())
    return {
        "per_condition": per,
        "mean": float(np.mean(list(per.values()))),
        "overall": correct / len(items),
        "n_prompts": len(items),
    }


@dataclass
class EvalConfig:
    tom_dataset: list
    vocab: Vocab
    ppl_stream: list
    ppl_window: int = 64
    localization_corpus: list = None
    localization_lengths: tuple = (2, 4, 6, 8, 10)
    localization_n: int = 20
    seed: int = 0
    general_kappa_scale: float = 1.0


@dataclass
class SweepPoint:
    kappa: float
    tom: dict
    perplexity: float
    localization: dict = None
    mask_total: int = 0
    mask_fingerprint: str = ""


@dataclass
class SweepResult:
    points: list
    selected_kappa: float
    baseline: dict = field(default_factory=dict)

    @property
    def grid(self):
        return [p.kappa for p in self.points]

    def point(self, kappa) -> SweepPoint:
        for p in self.points:
            if p.kappa == kappa:
                return p
        raise KeyError(kappa)

    def to_dict(self) -> dict:
        return {
            "selected_kappa": self.selected_kappa,
            "baseline": self.baseline,
            "points": [asdict(p) for p in self.points],
        }


def evaluate(ckpt: Checkpoint, cfg: EvalConfig) -> dict:
    out = {
        "tom": tom_eval(ckpt, cfg.tom_dataset, cfg.vocab),
        "perplexity": perplexity(ckpt, cfg.ppl_stream, cfg.ppl_window, cfg.vocab.bos_id),
    }
    if cfg.localization_corpus is not None:
        out["localization"] = localization_eval(
            ckpt, cfg.localization_corpus, cfg.vocab, cfg.localization_lengths, cfg.localization_n, cfg.seed
        )["curve"]
    return out


def kappa_sweep(ckpt: Checkpoint, sens_task, sens_general, grid, cfg: EvalConfig, force: bool = False) -> SweepResult:
    """Evaluate the combined mask at every kappa and pick the most ToM-degrading one.

    Each point perturbs a copy of ``ckpt`` and reverts it afterwards. Identical
    masks (common at tiny kappa, where budgets round down) reuse the earlier
    result. Ties in mean accuracy go to the smaller kappa.
    """
    grid = list(grid)
    if not grid:
        raise EvalError("empty kappa grid")
    shapes_t = {k: v.shape for k, v in sens_task.values.items()}
    shapes_g = {k: v.shape for k, v in sens_general.values.items()}
    if shapes_t != shapes_g:
        raise EvalError("task and general sensitivity maps do not match")
    baseline = evaluate(ckpt, cfg)
    cache = {}
    points = []
    for kappa in grid:
        task = build_topk_mask(sens_task, kappa)
        general = build_topk_mask(sens_general, min(1.0, kappa * cfg.general_kappa_scale), provenance="general")
        mask = combine_masks(task, general, force=force)
        fp = mask.fingerprint()
        if mask.total() == 0:
            res = baseline
        elif fp in cache:
            res = cache[fp]
        else:
            pert, rec = apply_mean_perturbation(ckpt, mask)
            res = evaluate(pert, cfg)
            revert(pert, rec)
            cache[fp] = res
        points.append(
            SweepPoint(float(kappa), res["tom"], res["perplexity"], res.get("localization"), mask.total(), fp)
        )
    best = min(points, key=lambda p: (p.tom["mean"], p.kappa))
    return SweepResult(points, best.kappa, baseline)
