"""Mean-value perturbation of masked weights, with an exact revert record."""

from dataclasses import dataclass, field

import numpy as np

from .masking import RANDOM, SparsityMask
from .model import Checkpoint

MEAN = "mean"
RANDOM_MASK_MEAN = "random-mask-mean"


class PerturbationError(ValueError):
    pass


@dataclass
class PerturbationRecord:
    indices: dict  # matrix name -> int64 flat indices
    old_values: dict  # matrix name -> stored-dtype array of previous values
    replacement: dict  # matrix name -> replacement value (as float)
    mask_fingerprint: str
    source_fingerprint: str
    perturbed_fingerprint: str
    mode: str = MEAN
    counts: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "replacement": {k: float(v) for k, v in self.replacement.items()},
            "counts": dict(self.counts),
            "mask_fingerprint": self.mask_fingerprint,
            "source_fingerprint": self.source_fingerprint,
            "perturbed_fingerprint": self.perturbed_fingerprint,
            "mode": self.mode,
        }


def apply_mean_perturbation(ckpt: Checkpoint, mask: SparsityMask):
    """Set every masked entry to the mean of its matrix's unmasked entries.

    The mean is accumulated in float64 and rounded once to the weight dtype,
    so applying the same mask twice gives the same checkpoint.
    """
    updates, indices, olds, repl, counts = {}, {}, {}, {}, {}
    for name, m in mask.masks.items():
        if name not in ckpt.params:
            raise PerturbationError(f"mask covers unknown matrix {name!r}")
        W = ckpt.params[name]
        if m.shape != W.shape:
            raise PerturbationError(f"{name}: mask shape {m.shape} != weight shape {W.shape}")
        idx = np.flatnonzero(m)
        if idx.size == 0:
            continue
        if idx.size == W.size:
            raise PerturbationError(f"{name}: mask covers every entry, no unmasked mean exists")
        flat = W.ravel()
        keep = flat[~m.ravel()].astype(np.float64)
        r = W.dtype.type(np.sum(keep) / keep.size)
        new = flat.copy()
        new[idx] = r
        updates[name] = new.reshape(W.shape)
        indices[name] = idx.astype(np.int64)
        olds[name] = flat[idx].copy()
        repl[name] = float(r)
        counts[name] = int(idx.size)
    out = ckpt.with_params(updates) if updates else ckpt
    record = PerturbationRecord(
        indices,
        olds,
        repl,
        mask.fingerprint(),
        ckpt.fingerprint(),
        out.fingerprint(),
        RANDOM_MASK_MEAN if mask.provenance == RANDOM else MEAN,
        counts,
    )
    return out, record


def revert(perturbed: Checkpoint, record: PerturbationRecord) -> Checkpoint:
    """Restore the pre-perturbation checkpoint; refuses records from another lineage."""
    fp = perturbed.fingerprint()
    if fp != record.perturbed_fingerprint:
        raise PerturbationError("record does not belong to this checkpoint (fingerprint mismatch)")
    updates = {}
    for name, idx in record.indices.items():
        new = perturbed.params[name].ravel().copy()
        new[idx] = record.old_values[name]
        updates[name] = new.reshape(perturbed.params[name].shape)
    out = perturbed.with_params(updates) if updates else perturbed
    if out.fingerprint() != record.source_fingerprint:
        raise PerturbationError("revert did not reproduce the source checkpoint")
    return out


def quadratic_loss_change(sens, mask: SparsityMask, ckpt: Checkpoint) -> float:
    """Second-order estimate 1/2 sum_{j in mask} H_jj delta_j^2 of the mean perturbation."""
    values = sens if isinstance(sens, dict) else sens.values
    total = 0.0
    for name, m in mask.masks.items():
        if not m.any():
            continue
        W = ckpt.params[name].astype(np.float64)
        r = np.mean(W[~m])
        delta = r - W[m]
        total += 0.5 * float(np.sum(values[name][m] * delta**2))
    return total
