"""Top-kappa sensitivity masks, the task-minus-general combination and mask rank statistics."""

import hashlib
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal

import numpy as np

from .model import ALL_TOKENS, FINAL_TOKEN

TASK = "task"
GENERAL = "general"
COMBINED = "combined"
RANDOM = "random"
PROVENANCES = (TASK, GENERAL, COMBINED, RANDOM)


class MaskError(ValueError):
    pass


def budget(kappa: float, d: int) -> int:
    """floor(kappa * d), evaluated in decimal so 0.29 * 100 gives 29, not 28."""
    _check_kappa(kappa)
    return int((Decimal(repr(float(kappa))) * d).to_integral_value(ROUND_FLOOR))


def _check_kappa(kappa):
    if not 0.0 <= float(kappa) <= 1.0:
        raise MaskError(f"kappa must lie in [0, 1], got {kappa}")


@dataclass
class SparsityMask:
    masks: dict  # matrix name -> bool array
    kappa: float
    budgets: dict
    provenance: str
    sources: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise MaskError(f"unknown provenance {self.provenance!r}")
        for name, m in self.masks.items():
            if m.dtype != np.bool_:
                raise MaskError(f"mask for {name} must be boolean")
            pc = int(m.sum())
            if self.provenance != COMBINED and pc != self.budgets[name]:
                raise MaskError(f"{name}: popcount {pc} != budget {self.budgets[name]}")
            if self.provenance == COMBINED and pc > self.budgets[name]:
                raise MaskError(f"{name}: combined popcount {pc} exceeds task budget {self.budgets[name]}")

    @property
    def names(self):
        return list(self.masks)

    def popcounts(self) -> dict:
        return {k: int(v.sum()) for k, v in self.masks.items()}

    def total(self) -> int:
        return sum(self.popcounts().values())

    def indices(self, name) -> np.ndarray:
        return np.flatnonzero(self.masks[name])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.masks):
            h.update(name.encode())
            h.update(str(self.masks[name].shape).encode())
            h.update(self.indices(name).astype("<u4").tobytes())
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            "kappa": self.kappa,
            "provenance": self.provenance,
            "budgets": dict(self.budgets),
            "popcounts": self.popcounts(),
            "total": self.total(),
            "fingerprint": self.fingerprint(),
            "sources": dict(self.sources),
        }


def topk_indices(values, k: int) -> np.ndarray:
    """Flat indices of the k largest values; ties prefer the smaller index."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if np.any(np.isnan(flat)):
        raise MaskError("sensitivity contains NaN")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    # stable sort on the negated key keeps index order among equal values
    return np.argsort(-flat, kind="stable")[:k]


def build_topk_mask(sens, kappa: float, provenance: str = TASK) -> SparsityMask:
    """Per matrix, keep the floor(kappa * d) most sensitive entries.

    ``sens`` is a SensitivityMap or a plain {name: array} dict.
    """
    _check_kappa(kappa)
    values = sens if isinstance(sens, dict) else sens.values
    masks, budgets = {}, {}
    for name, v in values.items():
        k = budget(kappa, v.size)
        m = np.zeros(v.size, dtype=bool)
        m[topk_indices(v, k)] = True
        masks[name] = m.reshape(v.shape)
        budgets[name] = k
    sources = {}
    if hasattr(sens, "dataset_fingerprint"):
        sources = {
            "dataset": sens.dataset_fingerprint,
            "checkpoint": sens.checkpoint_fingerprint,
            "loss_mode": sens.loss_mode,
        }
    return SparsityMask(masks, float(kappa), budgets, provenance, sources)


def combine_masks(task: SparsityMask, general: SparsityMask, force: bool = False) -> SparsityMask:
    """task AND NOT general, entrywise."""
    if task.provenance != TASK or general.provenance != GENERAL:
        raise MaskError(f"expected (task, general) provenances, got ({task.provenance}, {general.provenance})")
    if set(task.masks) != set(general.masks):
        raise MaskError("task and general masks cover different matrices")
    tmode = task.sources.get("loss_mode")
    gmode = general.sources.get("loss_mode")
    if not force and ((tmode and tmode != FINAL_TOKEN) or (gmode and gmode != ALL_TOKENS)):
        raise MaskError(
            f"task map should use {FINAL_TOKEN} loss and general map {ALL_TOKENS} loss, "
            f"got {tmode} and {gmode}; pass force=True to combine anyway"
        )
    masks = {}
    for name, tm in task.masks.items():
        gm = general.masks[name]
        if tm.shape != gm.shape:
            raise MaskError(f"{name}: shape mismatch {tm.shape} vs {gm.shape}")
        masks[name] = tm & ~gm
    sources = {"task": task.fingerprint(), "general": general.fingerprint(), "general_kappa": general.kappa}
    return SparsityMask(masks, task.kappa, dict(task.budgets), COMBINED, sources)


def build_random_mask(shapes: dict, kappa: float, seed: int = 0, exclude=None) -> SparsityMask:
    """Uniform sampling without replacement, floor(kappa * d) entries per matrix.

    ``exclude`` (a SparsityMask) removes its entries from the candidate pool.
    """
    _check_kappa(kappa)
    masks, budgets = {}, {}
    for i, (name, shape) in enumerate(sorted(shapes.items())):
        d = int(np.prod(shape))
        k = budget(kappa, d)
        rng = np.random.default_rng([seed, i])
        pool = np.arange(d)
        if exclude is not None and name in exclude.masks:
            pool = np.flatnonzero(~exclude.masks[name].ravel())
        if k > pool.size:
            raise MaskError(f"{name}: budget {k} exceeds {pool.size} eligible entries")
        m = np.zeros(d, dtype=bool)
        m[rng.choice(pool, size=k, replace=False)] = True
        masks[name] = m.reshape(shape)
        budgets[name] = k
    return SparsityMask(masks, float(kappa), budgets, RANDOM, {"seed": seed, "excluded": exclude is not None})


def exact_rank(mat) -> int:
    """Rank over the rationals of an integer matrix (fraction-free Bareiss elimination)."""
    rows = [[int(x) for x in r] for r in np.asarray(mat)]
    if not rows or not rows[0]:
        return 0
    n_cols = len(rows[0])
    rank = 0
    prev = 1
    for c in range(n_cols):
        piv = next((r for r in range(rank, len(rows)) if rows[r][c] != 0), None)
        if piv is None:
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        p = rows[rank][c]
        for r in range(rank + 1, len(rows)):
            f = rows[r][c]
            if f == 0:
                if p != prev:
                    rows[r] = [(p * x) // prev for x in rows[r]]
                continue
            rows[r] = [(p * x - f * y) // prev for x, y in zip(rows[r], rows[rank])]
        prev = p
        rank += 1
        if rank == len(rows):
            break
    return rank


@dataclass
class MatrixRankStats:
    weight_rank: int
    mask_rank: int
    nonzero_rows: int
    nonzero_cols: int
    popcount: int
    normalized_min: float  # NaN for an empty mask
    normalized_rows: float
    normalized_cols: float


def mask_rank_report(mask: SparsityMask, weights=None, rtol=None) -> dict:
    """Per matrix rank statistics of the 0/1 mask (and optionally the weights' numerical rank)."""
    report = {}
    for name, m in mask.masks.items():
        m2 = m.reshape(m.shape[0], -1) if m.ndim > 1 else m[None, :]
        rows = np.flatnonzero(m2.any(axis=1))
        cols = np.flatnonzero(m2.any(axis=0))
        sub = m2[np.ix_(rows, cols)].astype(np.int64)
        r = exact_rank(sub) if sub.size else 0
        nan = float("nan")
        wr = -1
        if weights is not None and name in weights:
            wr = int(np.linalg.matrix_rank(np.asarray(weights[name], dtype=np.float64), tol=rtol))
        report[name] = MatrixRankStats(
            weight_rank=wr,
            mask_rank=r,
            nonzero_rows=len(rows),
            nonzero_cols=len(cols),
            popcount=int(m2.sum()),
            normalized_min=r / min(len(rows), len(cols)) if r else nan,
            normalized_rows=r / len(rows) if r else nan,
            normalized_cols=r / len(cols) if r else nan,
        )
    return report
