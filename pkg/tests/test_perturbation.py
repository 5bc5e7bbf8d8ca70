import numpy as np
import pytest

from tomsense.masking import SparsityMask, build_random_mask, build_topk_mask
from tomsense.model import FINAL_TOKEN, Sample
from tomsense.perturbation import (
    PerturbationError,
    apply_mean_perturbation,
    quadratic_loss_change,
    revert,
)
from tomsense.sensitivity import estimate_fisher_diag


def _mask_for(ckpt, name, flat_idx):
    masks = {n: np.zeros(ckpt.params[n].shape, dtype=bool) for n in ckpt.matrix_names}
    masks[name].ravel()[list(flat_idx)] = True
    return SparsityMask(masks, 0.0, {n: int(m.sum()) for n, m in masks.items()}, "task")


def test_hand_case_mean_replacement(tiny_ckpt):
    W = tiny_ckpt.params["layers.0.W_Q"].copy()
    W[:2, :2] = [[1, 2], [3, 4]]
    W[2:] = 0
    W[:2, 2:] = 0
    ck = tiny_ckpt.with_params({"layers.0.W_Q": W})
    # unmasked entries: 2, 3, 4 and zeros elsewhere; mean over all 255 unmasked
    pert, rec = apply_mean_perturbation(ck, _mask_for(ck, "layers.0.W_Q", [0]))
    assert pert.params["layers.0.W_Q"][0, 0] == 9.0 / 255
    # a 2x2 matrix in isolation: mean{2, 3, 4} = 3
    from tomsense.model import ModelConfig, init_checkpoint

    cfg = ModelConfig(vocab_size=4, d_model=2, n_layers=1, n_heads=1, d_ff=2, max_seq_len=4, dtype="float64")
    small = init_checkpoint(cfg)
    small = small.with_params({"layers.0.W_Q": np.array([[1.0, 2], [3, 4]])})
    out, _ = apply_mean_perturbation(small, _mask_for(small, "layers.0.W_Q", [0]))
    assert out.params["layers.0.W_Q"].tolist() == [[3.0, 2.0], [3.0, 4.0]]


def test_empty_mask_is_identity(tiny_ckpt):
    pert, rec = apply_mean_perturbation(tiny_ckpt, _mask_for(tiny_ckpt, "layers.0.W_Q", []))
    assert pert.fingerprint() == tiny_ckpt.fingerprint()
    assert revert(pert, rec).fingerprint() == tiny_ckpt.fingerprint()


def test_constant_matrix_is_fixed_point(tiny_ckpt):
    ck = tiny_ckpt.with_params({"layers.1.W_V": np.full((16, 16), 0.25)})
    pert, _ = apply_mean_perturbation(ck, _mask_for(ck, "layers.1.W_V", range(0, 256, 7)))
    assert pert.fingerprint() == ck.fingerprint()


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_round_trip_idempotence_and_locality(tiny_ckpt, dtype):
    ck = tiny_ckpt.astype(dtype)
    mask = build_random_mask({n: ck.params[n].shape for n in ck.matrix_names}, 0.05, seed=1)
    once, rec = apply_mean_perturbation(ck, mask)
    twice, rec2 = apply_mean_perturbation(once, mask)
    assert twice.fingerprint() == once.fingerprint()
    for n in ck.params:
        outside = ~mask.masks[n] if n in mask.masks else np.ones(ck.params[n].shape, bool)
        assert np.array_equal(once.params[n][outside], ck.params[n][outside])
    back = revert(once, rec)
    assert back.fingerprint() == ck.fingerprint()
    # double-apply then a single revert restores the single-apply state
    assert revert(twice, rec2).fingerprint() == once.fingerprint()


def test_wrong_record_rejected(tiny_ckpt):
    m1 = _mask_for(tiny_ckpt, "layers.0.W_K", [3])
    m2 = _mask_for(tiny_ckpt, "layers.0.W_K", [4])
    p1, r1 = apply_mean_perturbation(tiny_ckpt, m1)
    p2, r2 = apply_mean_perturbation(tiny_ckpt, m2)
    before = p1.fingerprint()
    with pytest.raises(PerturbationError):
        revert(p1, r2)
    assert p1.fingerprint() == before


def test_full_mask_rejected(tiny_ckpt):
    with pytest.raises(PerturbationError):
        apply_mean_perturbation(tiny_ckpt, _mask_for(tiny_ckpt, "layers.0.W_O", range(256)))


def test_quadratic_surrogate_prefers_topk(tiny_ckpt, rng):
    """With equal |delta| per entry, the top-k mask maximizes the quadratic surrogate."""
    samples = [Sample(list(rng.integers(0, 32, 5)), [int(rng.integers(0, 32))]) for _ in range(6)]
    sens = estimate_fisher_diag(tiny_ckpt, samples, FINAL_TOKEN)
    top = build_topk_mask(sens, 0.05)
    shapes = {n: v.shape for n, v in sens.values.items()}

    def surrogate(mask):
        return sum(0.5 * float(np.sum(sens.values[n][m])) for n, m in mask.masks.items())

    for seed in range(20):
        assert surrogate(top) >= surrogate(build_random_mask(shapes, 0.05, seed=seed))
    q = quadratic_loss_change(sens, top, tiny_ckpt)
    assert q >= 0
