"""Empirical Fisher diagonal and sampled Fisher blocks.

The diagonal entry for parameter j is (1/n) sum_i g_ij^2 where g_i is the
gradient of sample i's own loss. Accumulation is float64 and follows dataset
order, chunk by chunk, so results are reproducible bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import fingerprint_records
from .model import LOSS_MODES, Checkpoint, InputError, Sample, per_sample_grads_batch


class SensitivityError(ValueError):
    pass


@dataclass
class SensitivityMap:
    values: dict  # matrix name -> float64 array, same shape as the weight
    n_samples: int
    loss_mode: str
    dataset_fingerprint: str = ""
    checkpoint_fingerprint: str = ""

    def __post_init__(self):
        if self.n_samples < 1:
            raise SensitivityError("n_samples must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise SensitivityError(f"unknown loss mode {self.loss_mode!r}")
        for name, v in self.values.items():
            if np.any(v < 0):
                raise SensitivityError(f"negative sensitivity in {name}")

    @property
    def names(self):
        return list(self.values)

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.values.items()}

    def meta(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "loss_mode": self.loss_mode,
            "dataset_fingerprint": self.dataset_fingerprint,
            "checkpoint_fingerprint": self.checkpoint_fingerprint,
        }


def _as_samples(dataset):
    out = []
    for i, s in enumerate(dataset):
        if isinstance(s, Sample):
            out.append(s)
        else:
            try:
                toks, tgts = s
                out.append(Sample(list(toks), list(tgts)))
            except (TypeError, ValueError):
                raise InputError(f"sample {i} is not a (tokens, targets) pair") from None
    return out


def _chunks(samples, size):
    for start in range(0, len(samples), size):
        yield start, samples[start : start + size]


def _grads_for_chunk(ckpt, chunk, mode, start):
    try:
        return per_sample_grads_batch(ckpt, chunk, mode)
    except InputError as e:
        # locate the offending sample for the error message
        for j, s in enumerate(chunk):
            try:
                per_sample_grads_batch(ckpt, [s], mode)
            except InputError as e2:
                raise InputError(f"sample {start + j}: {e2}") from None
        raise e


def estimate_fisher_diag(ckpt: Checkpoint, dataset, loss_mode: str, chunk_size: int = 16) -> SensitivityMap:
    samples = _as_samples(dataset)
    if not samples:
        raise SensitivityError("empty dataset")
    names = ckpt.matrix_names
    acc = {n: np.zeros(ckpt.params[n].shape, dtype=np.float64) for n in names}
    for start, chunk in _chunks(samples, chunk_size):
        g = _grads_for_chunk(ckpt, chunk, loss_mode, start)
        for n in names:
            gi = g[n].astype(np.float64)
            for b in range(gi.shape[0]):
                acc[n] += gi[b] * gi[b]
    n = len(samples)
    values = {k: v / n for k, v in acc.items()}
    return SensitivityMap(
        values,
        n,
        loss_mode,
        fingerprint_records([(s.tokens, s.targets) for s in samples]),
        ckpt.fingerprint(),
    )


@dataclass
class FisherBlockSample:
    coords: list  # [(matrix name, flat index)]
    block: np.ndarray
    n_samples: int = 0
    meta: dict = field(default_factory=dict)


def sample_coords(ckpt: Checkpoint, per_matrix: int = 100, seed: int = 0, names=None) -> dict:
    """Uniformly sampled flat indices (without replacement) for each matrix."""
    rng = np.random.default_rng(seed)
    out = {}
    for n in names or ckpt.matrix_names:
        size = ckpt.params[n].size
        k = min(per_matrix, size)
        out[n] = [(n, int(i)) for i in np.sort(rng.choice(size, size=k, replace=False))]
    return out


def sample_fisher_block(ckpt: Checkpoint, dataset, coords, loss_mode: str, chunk_size: int = 16) -> FisherBlockSample:
    """(1/n) sum_i g_i[coords] g_i[coords]^T."""
    samples = _as_samples(dataset)
    if not samples:
        raise SensitivityError("empty dataset")
    coords = [(str(n), int(i)) for n, i in coords]
    for n, i in coords:
        if n not in ckpt.params or n not in ckpt.matrix_names:
            raise SensitivityError(f"unknown matrix {n!r}")
        if not 0 <= i < ckpt.params[n].size:
            raise SensitivityError(f"flat index {i} out of range for {n}")
    block = np.zeros((len(coords), len(coords)), dtype=np.float64)
    for start, chunk in _chunks(samples, chunk_size):
        g = _grads_for_chunk(ckpt, chunk, loss_mode, start)
        flat = {n: g[n].reshape(g[n].shape[0], -1) for n in {c[0] for c in coords}}
        vecs = np.stack([flat[n][:, i] for n, i in coords], axis=1).astype(np.float64)
        for b in range(vecs.shape[0]):
            block += np.outer(vecs[b], vecs[b])
    return FisherBlockSample(coords, block / len(samples), len(samples), {"loss_mode": loss_mode})


def diag_dominance_report(block) -> dict:
    """Mean |diagonal|, mean |off-diagonal| and their ratio (inf when off-diagonal is 0)."""
    B = block.block if isinstance(block, FisherBlockSample) else np.asarray(block, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1] or B.shape[0] < 2:
        raise SensitivityError("need a square block of size >= 2")
    n = B.shape[0]
    diag = float(np.mean(np.abs(np.diag(B))))
    off = float((np.sum(np.abs(B)) - np.sum(np.abs(np.diag(B)))) / (n * n - n))
    ratio = float("inf") if off == 0 else diag / off
    return {"mean_abs_diag": diag, "mean_abs_offdiag": off, "ratio": ratio, "size": n}
