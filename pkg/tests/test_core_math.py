import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adsa.core_math import attend_single, cosine_similarity, is_degenerate, rope_rotate, softmax

import oracles

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vec(d):
    return st.lists(finite, min_size=d, max_size=d).map(np.array)


def test_cosine_examples():
    a = np.array([0.3, -1.2, 4.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-15)


def test_cosine_degenerate_is_zero():
    assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine_similarity([1e-14, 0.0], [1.0, 2.0]) == 0.0
    assert is_degenerate([1e-13, 0.0])
    assert not is_degenerate([1e-6, 0.0])


@given(vec(6), vec(6))
def test_cosine_symmetric_and_bounded(a, b):
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert abs(s) <= 1 + 1e-12


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_array_equal(softmax([7.5]), [1.0])
    np.testing.assert_allclose(softmax([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-15)


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        softmax([])


@given(st.lists(finite, min_size=1, max_size=30), finite)
def test_softmax_normalized_and_shift_invariant(scores, c):
    p = softmax(scores)
    assert abs(p.sum() - 1) < 1e-9
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(softmax(np.array(scores) + c), p, atol=1e-9)


def test_rope_zero_position_is_identity(backend):
    x = np.arange(8, dtype=float) - 3.5
    np.testing.assert_array_equal(rope_rotate(x, 0), x)


def test_rope_matches_oracle(backend, rng):
    for _ in range(20):
        x = rng.normal(size=16)
        pos = int(rng.integers(0, 5000))
        np.testing.assert_allclose(rope_rotate(x, pos), oracles.rope(list(x), pos), atol=1e-12)


def test_rope_rejects_odd_dim():
    with pytest.raises(ValueError):
        rope_rotate(np.ones(5), 3)


@settings(max_examples=200)
@given(vec(8), vec(8), st.integers(0, 4096), st.integers(0, 4096), st.integers(0, 4096))
def test_rope_relative_position(q, k, m, n, s):
    assert abs(np.linalg.norm(rope_rotate(q, m)) - np.linalg.norm(q)) <= 1e-9 * max(1, np.linalg.norm(q))
    a = rope_rotate(q, m) @ rope_rotate(k, n)
    b = rope_rotate(q, m + s) @ rope_rotate(k, n + s)
    scale = max(1.0, np.linalg.norm(q) * np.linalg.norm(k))
    assert abs(a - b) <= 1e-9 * scale


def test_attend_single_singleton(backend):
    v = np.array([1.5, -2.0])
    np.testing.assert_array_equal(attend_single([1.0, 1.0], [[0.3, 0.1]], [v]), v)


def test_attend_single_identical_keys_average(backend):
    out = attend_single([0.2, -0.7], [[1.0, 2.0], [1.0, 2.0]], [[1.0, 3.0], [3.0, -1.0]])
    np.testing.assert_allclose(out, [2.0, 1.0], atol=1e-15)


# frozen from a 50-digit mpmath evaluation of the same instance
Q3 = [0.5, -1.0, 0.25, 2.0]
K3 = [[1, 0, 0.5, -1], [0.2, 0.3, -0.4, 1.5], [-1, 2, 0, 0.1]]
V3 = [[1, 2, 3, 4], [-1, 0, 1, 0], [0.5, 0.5, -2, 1]]
W3 = [0.10751400204550272812, 0.82478363445522581404, 0.067702363499271457847]
OUT3 = [-0.683418450660087357, 0.24887918584064118516, 1.0119209135931910827, 0.49775837168128237031]


def test_attend_single_three_tokens(backend):
    out, w = attend_single(Q3, K3, V3, return_weights=True)
    np.testing.assert_allclose(w, W3, atol=1e-14)
    np.testing.assert_allclose(out, OUT3, atol=1e-14)


def test_attend_single_matches_fsum_oracle(backend, rng):
    for L in (1, 2, 5, 40):
        q, K, V = rng.normal(size=8), rng.normal(size=(L, 8)), rng.normal(size=(L, 8))
        out, w = attend_single(q, K, V, return_weights=True)
        ref_out, ref_w = oracles.attend(list(q), K.tolist(), V.tolist())
        np.testing.assert_allclose(out, ref_out, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, atol=1e-12)
        assert abs(w.sum() - 1) < 1e-9


def test_attend_single_convex_when_coordinate_constant(backend, rng):
    V = rng.normal(size=(6, 4))
    V[:, 2] = 3.25
    out = attend_single(rng.normal(size=4), rng.normal(size=(6, 4)), V)
    assert out[2] == pytest.approx(3.25, abs=1e-12)
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)


def test_attend_single_rejects_empty_context():
    with pytest.raises(ValueError):
        attend_single([1.0, 0.0], np.zeros((0, 2)), np.zeros((0, 2)))
