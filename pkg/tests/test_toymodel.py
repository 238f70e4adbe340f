import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from morphsim.toymodel import (
    Precision,
    PrecisionConfig,
    build_model,
    calibration_batch,
    cosine,
    cosine_flagged,
    forward,
    quantization_scale,
    quantize_weights,
)


def test_build_is_deterministic():
    a, b = build_model(3, 4, 8), build_model(3, 4, 8)
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        np.testing.assert_array_equal(wa, wb)


def test_seed_change_alters_weights():
    a, b = build_model(3, 4, 8), build_model(4, 4, 8)
    assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))


@pytest.mark.parametrize("L, d", [(0, 8), (3, 1), (-1, 4)])
def test_build_rejects_bad_dims(L, d):
    with pytest.raises(ValueError):
        build_model(0, L, d)


def test_single_layer_is_one_residual_block():
    m = build_model(1, 1, 6)
    x = calibration_batch(2, 1, 6)[0]
    expected = x + np.tanh(m.weights[0] @ x + m.biases[0])
    np.testing.assert_allclose(forward(m, None, x).final, expected)


def test_activation_chain_links_layers():
    m = build_model(5, 5, 8)
    tr = forward(m, PrecisionConfig.quantized(5, [1, 3], 4), calibration_batch(0, 7, 8))
    for p in range(4):
        np.testing.assert_array_equal(tr.inputs[p + 1], tr.outputs[p])


def test_batch_matches_per_vector():
    m = build_model(5, 3, 8)
    X = calibration_batch(1, 4, 8)
    cfg = PrecisionConfig.quantized(3, [0], 3)
    batch = forward(m, cfg, X).final
    single = np.stack([forward(m, cfg, x).final for x in X])
    np.testing.assert_allclose(batch, single, atol=1e-12)


def test_forward_rejects_wrong_dimension_and_config():
    m = build_model(0, 2, 4)
    with pytest.raises(ValueError):
        forward(m, None, np.ones(5))
    with pytest.raises(ValueError):
        forward(m, PrecisionConfig.full(3), np.ones(4))


def test_quantize_example_row():
    # scale = 1.0 / 7 at 4 bits; 0.5 / s = 3.5 rounds away from zero to 4
    w = np.array([[1.0, -0.5, 0.1, 0.0]])
    q = quantize_weights(w, 4)
    s = 1.0 / 7
    np.testing.assert_allclose(q, [[7 * s, -4 * s, 1 * s, 0.0]])


def test_zero_row_is_preserved():
    q = quantize_weights(np.zeros((2, 3)), 4)
    np.testing.assert_array_equal(q, 0.0)
    np.testing.assert_array_equal(quantization_scale(np.zeros((2, 3)), 4), 1.0)


def test_quantize_rejects_one_bit():
    with pytest.raises(ValueError):
        quantize_weights(np.ones((1, 2)), 1)


rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False))


@given(rows, st.sampled_from([3, 4, 8]))
@settings(max_examples=200, deadline=None)
def test_error_within_half_step(W, bits):
    s = quantization_scale(W, bits)[:, None]
    err = np.abs(W - quantize_weights(W, bits))
    assert np.all(err <= s / 2 * (1 + 1e-12))


@given(rows, st.sampled_from([3, 4, 8]))
@settings(max_examples=100, deadline=None)
def test_codes_are_integers_in_range(W, bits):
    s = quantization_scale(W, bits)[:, None]
    codes = quantize_weights(W, bits) / s
    qmax = 2 ** (bits - 1) - 1
    np.testing.assert_allclose(codes, np.round(codes), atol=1e-6)
    assert np.all(np.abs(codes) <= qmax + 1e-6)


@given(rows)
@settings(max_examples=100, deadline=None)
def test_step_shrinks_with_more_bits(W):
    s3, s4, s8 = (quantization_scale(W, b) for b in (3, 4, 8))
    nz = np.any(W != 0, axis=1)
    assert np.all(s8[nz] < s4[nz]) and np.all(s4[nz] < s3[nz])


def test_grids_are_not_nested():
    # 3/7 of the row max is exact on the 4-bit grid but not on the 8-bit one,
    # so a finer width does not reduce every entry's error
    W = np.array([[1.0, 3 / 7]])
    e4 = np.abs(W - quantize_weights(W, 4))
    e8 = np.abs(W - quantize_weights(W, 8))
    assert e4[0, 1] < 1e-15 < e8[0, 1]


def test_quantize_idempotent():
    W = np.random.default_rng(0).standard_normal((5, 9))
    for bits in (3, 4, 8):
        q = quantize_weights(W, bits)
        np.testing.assert_allclose(quantize_weights(q, bits), q, atol=1e-12)


def test_precision_tags():
    assert Precision.from_bits(4) is Precision.Q4
    assert Precision.FULL.bits is None
    with pytest.raises(ValueError):
        Precision.from_bits(5)
    cfg = PrecisionConfig.quantized(4, [2, 0], 8)
    assert cfg.quantized_set == {0, 2}
    assert cfg[2] is Precision.Q8 and cfg[1] is Precision.FULL
    assert cfg.with_layer(1, Precision.Q3).quantized_set == {0, 1, 2}
    assert cfg == PrecisionConfig(4, {0: "Q8", 2: "Q8"})
    with pytest.raises(ValueError):
        PrecisionConfig(3, {3: Precision.Q4})


def test_quantized_weights_are_cached_and_full_untouched():
    m = build_model(0, 2, 4)
    before = m.weights[0].copy()
    q1 = m.layer_weights(0, Precision.Q4)
    assert m.layer_weights(0, Precision.Q4) is q1
    np.testing.assert_array_equal(m.weights[0], before)


def test_cosine_and_zero_norm_flag():
    assert cosine(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0]), np.array([0.0, 3])) == pytest.approx(0.0)
    val, flagged = cosine_flagged(np.zeros(3), np.ones(3))
    assert val == 0.0 and flagged
    vals, flagged = cosine_flagged(np.array([[1.0, 1], [0, 0]]), np.array([[1.0, 1], [1, 0]]))
    np.testing.assert_allclose(vals, [1.0, 0.0])
    assert flagged
    with pytest.raises(ValueError):
        cosine(np.ones(2), np.ones(3))


def test_calibration_batch_unit_rows():
    X = calibration_batch(9, 16, 5)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0)
    np.testing.assert_array_equal(X, calibration_batch(9, 16, 5))
    with pytest.raises(ValueError):
        calibration_batch(0, 0, 5)
