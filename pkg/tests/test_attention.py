import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview.core import DimensionMismatch, Image
from crossview.attention import (
    AttentionInputs,
    PatchEncoder,
    ProjectionSet,
    attention_grad_check,
    attention_grads,
    attention_probs,
    cross_view_attention,
    encode,
    project,
    row_entropy,
    softmax_rows,
    to_panorama_feature,
)


def random_inputs(rng, n_p=6, n_s=5, d=4, d_v=3, m_range=(0.0, 0.5)):
    return AttentionInputs(
        rng.standard_normal((n_p, d)),
        rng.standard_normal((n_s, d)),
        rng.standard_normal((n_s, d_v)),
        rng.uniform(*m_range, (n_p, n_s)),
    )


def mp_attention(inp, scaled=True):
    """Arbitrary-precision reference, element by element."""
    mpmath.mp.dps = 40
    Q, K, V, M = inp.Q, inp.K, inp.V, inp.M
    d = Q.shape[1]
    s = 1 / mpmath.sqrt(d) if scaled else mpmath.mpf(1)
    out = np.empty((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        logits = [
            s * mpmath.fsum(mpmath.mpf(Q[i, k]) * mpmath.mpf(K[j, k]) for k in range(d)) * mpmath.mpf(M[i, j])
            for j in range(K.shape[0])
        ]
        w = [mpmath.exp(a) for a in logits]
        tot = mpmath.fsum(w)
        for c in range(V.shape[1]):
            out[i, c] = float(mpmath.fsum(w[j] * mpmath.mpf(V[j, c]) for j in range(K.shape[0])) / tot)
    return out


def test_unit_mask_is_standard_attention():
    rng = np.random.default_rng(0)
    inp = random_inputs(rng)
    inp = AttentionInputs(inp.Q, inp.K, inp.V, np.ones_like(inp.M))
    logits = inp.Q @ inp.K.T / np.sqrt(inp.Q.shape[1])
    w = np.exp(logits)
    ref = (w / w.sum(axis=1, keepdims=True)) @ inp.V
    np.testing.assert_allclose(cross_view_attention(inp), ref, atol=1e-12)


def test_zero_mask_gives_uniform_average():
    rng = np.random.default_rng(1)
    inp = random_inputs(rng)
    inp = AttentionInputs(inp.Q, inp.K, inp.V, np.zeros_like(inp.M))
    z = cross_view_attention(inp)
    np.testing.assert_allclose(z, np.tile(inp.V.mean(axis=0), (inp.Q.shape[0], 1)), atol=1e-14)


def test_matches_high_precision_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        inp = random_inputs(rng, m_range=(0.0, 1.0))
        np.testing.assert_allclose(cross_view_attention(inp), mp_attention(inp), atol=1e-12)
        np.testing.assert_allclose(
            cross_view_attention(inp, scaled=False), mp_attention(inp, scaled=False), atol=1e-12
        )


def test_float32_path_stays_close():
    rng = np.random.default_rng(3)
    inp = random_inputs(rng)
    z32 = cross_view_attention(inp.astype(np.float32))
    assert z32.dtype == np.float32
    np.testing.assert_allclose(z32, cross_view_attention(inp), atol=1e-5)


def test_large_logits_do_not_overflow():
    rng = np.random.default_rng(4)
    inp = random_inputs(rng)
    big = AttentionInputs(inp.Q * 1e3, inp.K * 1e3, inp.V, np.ones_like(inp.M))
    assert np.isfinite(cross_view_attention(big)).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rows_are_probability_vectors(seed):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, *rng.integers(1, 7, 4))
    P = attention_probs(inp)
    assert (P >= 0).all()
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    z = cross_view_attention(inp)
    # convex combination of value rows stays inside their bounding box
    assert (z <= inp.V.max(axis=0) + 1e-12).all() and (z >= inp.V.min(axis=0) - 1e-12).all()
    ent = row_entropy(P)
    assert (ent >= -1e-12).all() and (ent <= np.log(inp.K.shape[0]) + 1e-12).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_match_finite_differences(seed):
    inp = random_inputs(np.random.default_rng(seed))
    err, per = attention_grad_check(inp)
    assert err <= 1e-5, per


def test_gradients_with_zero_queries():
    rng = np.random.default_rng(5)
    inp = random_inputs(rng)
    inp = AttentionInputs(np.zeros_like(inp.Q), inp.K, inp.V, inp.M)
    g = attention_grads(inp)
    assert np.allclose(g["M"], 0.0)
    assert attention_grad_check(inp)[0] <= 1e-5


def test_shape_checks():
    rng = np.random.default_rng(6)
    inp = random_inputs(rng)
    with pytest.raises(DimensionMismatch):
        AttentionInputs(inp.Q, inp.K, inp.V, inp.M[:, :-1])
    with pytest.raises(DimensionMismatch):
        AttentionInputs(inp.Q, inp.K[:, :-1], inp.V, inp.M)
    with pytest.raises(DimensionMismatch):
        AttentionInputs(inp.Q, inp.K, inp.V[:-1], inp.M)


def test_encode_patch_order():
    px = np.arange(4 * 4, dtype=float).reshape(4, 4, 1) / 16
    enc = PatchEncoder(2, np.eye(4), np.zeros(4))
    tokens = encode(Image(px), enc)
    assert tokens.shape == (4, 4)
    # second token is the top-right patch, flattened row by row
    np.testing.assert_allclose(tokens[1], np.array([2, 3, 6, 7]) / 16)
    with pytest.raises(DimensionMismatch):
        encode(Image(np.zeros((5, 4, 1))), enc)


def test_pipeline_shapes():
    rng = np.random.default_rng(7)
    enc = PatchEncoder.random(4, 3, 8, rng)
    proj = ProjectionSet.random(8, rng)
    pano = encode(Image(rng.random((16, 32, 3))), enc)
    sat = encode(Image(rng.random((16, 16, 3))), enc)
    Q, K, V = project(pano, sat, proj)
    z = cross_view_attention(AttentionInputs(Q, K, V, np.full((32, 16), 0.25)))
    assert to_panorama_feature(z, (4, 8)).shape == (4, 8, 8)
    with pytest.raises(DimensionMismatch):
        to_panorama_feature(z, (3, 8))


def test_softmax_rows_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(softmax_rows(x), softmax_rows(x + 100.0), atol=1e-15)
