import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import rope_score, rope_vector
from tomsense.rope import (
    HALF_SPLIT,
    INTERLEAVED,
    RopeConfig,
    encode_pair,
    feature_to_frequency,
    pair_norms,
    rope_interaction,
    rotate,
    theta,
)

LAYOUTS = [HALF_SPLIT, INTERLEAVED]


def test_theta_examples():
    cfg = RopeConfig(head_dim=4)
    assert all(theta(0, m, cfg) == 0.0 for m in range(2))
    assert theta(1, 0, cfg) == 1.0
    getcontext().prec = 40
    ref = float(1 / Decimal(50000).sqrt())
    assert abs(theta(1, 1, cfg) - ref) <= 1e-15
    assert abs(ref - 4.4721360e-3) < 1e-10


def test_theta_errors():
    cfg = RopeConfig(head_dim=4)
    with pytest.raises(IndexError):
        theta(1, 2, cfg)
    with pytest.raises(ValueError):
        theta(-1, 0, cfg)
    with pytest.raises(ValueError):
        RopeConfig(head_dim=5)


def test_theta_strictly_decreasing_in_m():
    cfg = RopeConfig(head_dim=64)
    vals = [theta(1, m, cfg) for m in range(cfg.n_freqs)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_encode_pair_examples():
    cfg = RopeConfig(head_dim=2, base=50000.0)
    # m=0 rotates by p radians, so p = pi/2 is a quarter turn
    np.testing.assert_allclose(encode_pair([1.0, 0.0], math.pi / 2, 0, cfg), [0, 1], atol=1e-9)
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(encode_pair(x, 0, 0, cfg), x)


def test_feature_to_frequency_examples():
    for layout in LAYOUTS:
        assert feature_to_frequency(0, RopeConfig(8, layout=layout), 2) == (0, 0)
    assert feature_to_frequency(5, RopeConfig(8, layout=INTERLEAVED), 2) == (0, 2)
    assert feature_to_frequency(5, RopeConfig(8, layout=HALF_SPLIT), 2) == (0, 1)
    assert feature_to_frequency(13, RopeConfig(8, layout=HALF_SPLIT), 2) == (1, 1)
    with pytest.raises(IndexError):
        feature_to_frequency(16, RopeConfig(8), 2)


def test_rope_interaction_same_position_is_dot():
    rng = np.random.default_rng(0)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    assert abs(rope_interaction(q, k, 5, 5, RopeConfig(8)) - q @ k) < 1e-12


@pytest.mark.parametrize("layout", LAYOUTS)
def test_rope_interaction_matches_explicit_matrices(layout):
    rng = np.random.default_rng(3)
    cfg = RopeConfig(4, layout=layout)
    for _ in range(20):
        q, k = rng.standard_normal(4), rng.standard_normal(4)
        ref = rope_score(q, k, 0, 3, cfg.base, layout)
        assert abs(rope_interaction(q, k, 0, 3, cfg) - ref) <= 1e-12 * max(1, abs(ref))
        assert abs(rope_interaction(q, k, 0, 3, cfg, relative=False) - ref) <= 1e-12 * max(1, abs(ref))


@pytest.mark.parametrize("layout", LAYOUTS)
def test_vectorized_rotate_matches_oracle(layout):
    rng = np.random.default_rng(4)
    cfg = RopeConfig(8, layout=layout)
    x = rng.standard_normal((3, 6, 8))
    got = rotate(x, cfg)
    for b in range(3):
        for t in range(6):
            np.testing.assert_allclose(got[b, t], rope_vector(x[b, t], t, cfg.base, layout), atol=1e-12)
    np.testing.assert_allclose(rotate(got, cfg, inverse=True), x, atol=1e-12)


def test_rotate_off_switch_is_identity():
    x = np.random.default_rng(5).standard_normal((4, 8))
    np.testing.assert_array_equal(rotate(x, RopeConfig(8, rotate=False)), x)


positions = st.integers(0, 511)


@given(st.floats(-10, 10), st.floats(-10, 10), positions, st.integers(0, 31))
def test_norm_preserved(a, b, p, m):
    cfg = RopeConfig(64)
    y = encode_pair([a, b], p, m, cfg)
    assert abs(math.hypot(*y) - math.hypot(a, b)) <= 1e-9


@given(st.floats(-10, 10), st.floats(-10, 10), positions, positions, st.integers(0, 31))
def test_rotations_compose(a, b, p1, p2, m):
    cfg = RopeConfig(64)
    np.testing.assert_allclose(encode_pair(encode_pair([a, b], p1, m, cfg), p2, m, cfg), encode_pair([a, b], p1 + p2, m, cfg), atol=1e-9)


@given(st.integers(0, 2**32 - 1), positions, positions, st.integers(0, 200), st.sampled_from(LAYOUTS))
def test_relative_position_and_path_agreement(seed, i, j, s, layout):
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(8, layout=layout)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    r = rope_interaction(q, k, i, j, cfg)
    scale = max(1.0, abs(r))
    assert abs(rope_interaction(q, k, i + s, j + s, cfg) - r) <= 1e-6 * scale
    assert abs(rope_interaction(q, k, i, j, cfg, relative=False) - r) <= 1e-6 * scale


def test_pair_norms_layouts():
    x = np.arange(8, dtype=float)
    np.testing.assert_allclose(pair_norms(x, RopeConfig(8, layout=INTERLEAVED)), [math.hypot(2 * m, 2 * m + 1) for m in range(4)])
    np.testing.assert_allclose(pair_norms(x, RopeConfig(8, layout=HALF_SPLIT)), [math.hypot(m, m + 4) for m in range(4)])
