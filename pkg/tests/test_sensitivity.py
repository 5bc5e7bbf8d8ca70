import numpy as np
import pytest

from tomsense.model import ALL_TOKENS, FINAL_TOKEN, InputError, Sample, per_sample_grad
from tomsense.sensitivity import (
    SensitivityError,
    SensitivityMap,
    diag_dominance_report,
    estimate_fisher_diag,
    sample_coords,
    sample_fisher_block,
)


def _samples(rng, n, mode=FINAL_TOKEN):
    out = []
    for _ in range(n):
        L = int(rng.integers(2, 8))
        toks = list(rng.integers(0, 32, L))
        tg = [int(rng.integers(0, 32))] if mode == FINAL_TOKEN else list(rng.integers(0, 32, L))
        out.append(Sample(toks, tg))
    return out


def _materialized(ck, samples, mode):
    """Full per-sample gradient vectors, one row per sample."""
    names = ck.matrix_names
    rows = []
    for s in samples:
        g = per_sample_grad(ck, s, mode)
        rows.append(np.concatenate([g[n].ravel() for n in names]))
    return names, np.stack(rows)


def test_single_sample_and_mean_of_squares_by_hand():
    # hand cases on the map arithmetic itself: diag = mean of squared gradients
    g = np.array([2.0, -3.0])
    assert np.array_equal(g * g, [4, 9])
    g1, g2 = np.array([1.0, 0]), np.array([3.0, 0])
    assert np.array_equal((g1**2 + g2**2) / 2, [5, 0])


@pytest.mark.parametrize("mode", [FINAL_TOKEN, ALL_TOKENS])
def test_fisher_diag_matches_materialized_oracle(tiny_ckpt, rng, mode):
    samples = _samples(rng, 8, mode)
    sens = estimate_fisher_diag(tiny_ckpt, samples, mode, chunk_size=3)
    names, G = _materialized(tiny_ckpt, samples, mode)
    oracle = np.mean(G * G, axis=0)
    got = np.concatenate([sens.values[n].ravel() for n in names])
    np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-9 * max(1.0, oracle.max()))
    assert sens.n_samples == 8 and sens.loss_mode == mode
    assert all(np.all(v >= 0) for v in sens.values.values())


def test_fisher_order_invariance_and_linear_in_n(tiny_ckpt, rng):
    samples = _samples(rng, 10)
    full = estimate_fisher_diag(tiny_ckpt, samples, FINAL_TOKEN)
    perm = [samples[i] for i in rng.permutation(10)]
    shuffled = estimate_fisher_diag(tiny_ckpt, perm, FINAL_TOKEN)
    a = estimate_fisher_diag(tiny_ckpt, samples[:4], FINAL_TOKEN)
    b = estimate_fisher_diag(tiny_ckpt, samples[4:], FINAL_TOKEN)
    for n in full.values:
        np.testing.assert_allclose(shuffled.values[n], full.values[n], rtol=1e-6, atol=1e-300)
        np.testing.assert_allclose((4 * a.values[n] + 6 * b.values[n]) / 10, full.values[n], rtol=0, atol=1e-9)
    assert full.dataset_fingerprint != shuffled.dataset_fingerprint


def test_fisher_block_matches_oracle(tiny_ckpt, rng):
    samples = _samples(rng, 6)
    coords = [c for cs in sample_coords(tiny_ckpt, 3, seed=1).values() for c in cs]
    blk = sample_fisher_block(tiny_ckpt, samples, coords, FINAL_TOKEN)
    names, G = _materialized(tiny_ckpt, samples, FINAL_TOKEN)
    offsets = {}
    o = 0
    for n in names:
        offsets[n] = o
        o += tiny_ckpt.params[n].size
    cols = [offsets[n] + i for n, i in coords]
    oracle = G[:, cols].T @ G[:, cols] / len(samples)
    np.testing.assert_allclose(blk.block, oracle, atol=1e-12)
    np.testing.assert_allclose(blk.block, blk.block.T, atol=1e-9)
    diag = estimate_fisher_diag(tiny_ckpt, samples, FINAL_TOKEN)
    for k, (n, i) in enumerate(coords):
        assert abs(blk.block[k, k] - diag.values[n].ravel()[i]) <= 1e-9


def test_single_coordinate_block_is_diag_entry(tiny_ckpt, rng):
    samples = _samples(rng, 4)
    blk = sample_fisher_block(tiny_ckpt, samples, [("layers.1.W_Up", 5)], FINAL_TOKEN)
    diag = estimate_fisher_diag(tiny_ckpt, samples, FINAL_TOKEN)
    assert abs(blk.block[0, 0] - diag.values["layers.1.W_Up"].ravel()[5]) <= 1e-12


def test_diag_dominance_examples():
    r = diag_dominance_report(np.eye(3))
    assert r["mean_abs_offdiag"] == 0 and r["ratio"] == float("inf")
    r = diag_dominance_report(np.array([[4.0, 1], [1, 9]]))
    assert (r["mean_abs_diag"], r["mean_abs_offdiag"], r["ratio"]) == (6.5, 1.0, 6.5)
    with pytest.raises(SensitivityError):
        diag_dominance_report(np.ones((1, 1)))


def test_errors(tiny_ckpt):
    with pytest.raises(SensitivityError):
        estimate_fisher_diag(tiny_ckpt, [], FINAL_TOKEN)
    with pytest.raises(InputError, match="sample 2"):
        estimate_fisher_diag(tiny_ckpt, [([1, 2], [3]), ([1], [2]), ([1, 99], [2])], FINAL_TOKEN)
    with pytest.raises(SensitivityError):
        SensitivityMap({"a": np.array([-1.0])}, 1, FINAL_TOKEN)
    with pytest.raises(SensitivityError):
        sample_fisher_block(tiny_ckpt, [([1], [2])], [("embed", 0)], FINAL_TOKEN)
