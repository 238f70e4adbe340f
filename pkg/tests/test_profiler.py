import itertools
import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from morphsim.profiler import (
    FRONT_TO_BACK,
    LIS_GREEDY,
    RANDOM,
    LayerSwapProfiler,
    SequenceFormatError,
    SwapSequence,
    baseline_sequence,
    degradation,
    evaluate_sequence,
    greedy_sequence,
    load_sequence,
    lrs,
    lts,
    mds,
    persist_sequence,
)
from morphsim.toymodel import build_model, calibration_batch, cosine, forward


@pytest.fixture(scope="module")
def small():
    model = build_model(11, 4, 8)
    return model, calibration_batch(11, 32, 8)


def _reference_greedy(model, X, a1, a2, b, bits):
    """Direct transcription: every round recompute LIS for all unquantized layers."""
    L = model.num_layers
    t, r = lts(model, X), lrs(model, X, bits)
    Q, order = [], []
    for _ in range(L):
        best, best_score = None, -np.inf
        for p in range(L):
            if p in Q:
                continue
            score = a1 * t[p] + a2 * r[p] + b * mds(model, Q, p, X, bits)
            if score > best_score:
                best, best_score = p, score
        Q.append(best)
        order.append(best)
    return tuple(order)


def test_lts_is_mean_cosine_of_layer_output_and_input(small):
    model, X = small
    tr = forward(model, None, X)
    expected = [np.mean(cosine(tr.outputs[p], tr.inputs[p])) for p in range(model.num_layers)]
    np.testing.assert_allclose(lts(model, X), expected)
    assert np.all(lts(model, X) <= 1 + 1e-12)


def test_lrs_is_one_for_exactly_representable_layer():
    model = build_model(2, 2, 4)
    # a layer whose weights are on the 4-bit grid replaces itself exactly
    W = model.weights[0]
    model.weights[0][...] = np.round(W / np.abs(W).max(axis=1, keepdims=True) * 7) \
        * np.abs(W).max(axis=1, keepdims=True) / 7
    X = calibration_batch(0, 8, 4)
    assert lrs(model, X, 4)[0] == pytest.approx(1.0, abs=1e-12)


def test_mds_rejects_already_quantized(small):
    model, X = small
    with pytest.raises(ValueError):
        mds(model, {1}, 1, X, 4)


def test_degradation_of_empty_set_is_zero(small):
    model, X = small
    assert degradation(model, set(), X, 4) == 0.0
    assert degradation(model, {0, 1}, X, 4) > 0


@pytest.mark.parametrize("seed, L", [(7, 3), (11, 4), (13, 4), (3, 5)])
def test_greedy_matches_reference_transcription(seed, L):
    model = build_model(seed, L, 8)
    X = calibration_batch(seed, 16, 8)
    seq = greedy_sequence(model, X)
    assert seq.order == _reference_greedy(model, X, 0.25, 0.25, 0.5, 4)
    assert seq.provenance == LIS_GREEDY
    assert len(seq.per_step_lis) == L


def test_pure_lts_weight_orders_by_lts(small):
    model, X = small
    seq = greedy_sequence(model, X, alpha1=1.0, alpha2=0.0, beta=0.0)
    assert list(seq.order) == list(np.argsort(-lts(model, X), kind="stable"))


def test_ties_go_to_lowest_index():
    # identity layers (zero weights and bias) score exactly alike
    base = build_model(1, 3, 6)
    zeros = tuple(np.zeros_like(w) for w in base.weights)
    model = type(base)(3, 6, 1, zeros, tuple(np.zeros_like(b) for b in base.biases))
    X = calibration_batch(1, 8, 6)
    seq = greedy_sequence(model, X)
    assert seq.order == (0, 1, 2)


@pytest.mark.parametrize("weights", [(0, 0, 0), (-0.1, 0.5, 0.6), (np.nan, 0.5, 0.5)])
def test_weights_validated(small, weights):
    model, X = small
    with pytest.raises(ValueError):
        greedy_sequence(model, X, *weights)


def test_batch_dimension_checked(small):
    model, _ = small
    with pytest.raises(ValueError):
        greedy_sequence(model, np.ones((4, 5)))
    with pytest.raises(ValueError):
        greedy_sequence(model, np.ones((0, 8)))


def test_curve_endpoints_are_shared(small):
    model, X = small
    curves = [evaluate_sequence(model, s, X, 4) for s in itertools.permutations(range(4))]
    assert all(c[0] == 0.0 for c in curves)
    np.testing.assert_allclose([c[-1] for c in curves], curves[0][-1], atol=1e-12)


def test_curve_matches_degradation_of_prefixes(small):
    model, X = small
    order = (2, 0, 3, 1)
    curve = evaluate_sequence(model, order, X, 4)
    for k in range(5):
        assert curve[k] == pytest.approx(degradation(model, order[:k], X, 4), abs=1e-12)


def test_baselines():
    assert baseline_sequence(FRONT_TO_BACK, 4).order == (0, 1, 2, 3)
    assert baseline_sequence("back_to_front", 4).order == (3, 2, 1, 0)
    r = baseline_sequence(RANDOM, 9, seed=5)
    assert sorted(r.order) == list(range(9))
    assert r == baseline_sequence(RANDOM, 9, seed=5)
    assert r.provenance == "RANDOM(5)"
    with pytest.raises(ValueError):
        baseline_sequence(RANDOM, 4)
    with pytest.raises(ValueError):
        baseline_sequence("SIDEWAYS", 4)


def test_sequence_rejects_non_permutation():
    with pytest.raises(SequenceFormatError):
        SwapSequence((0, 0, 1), "x")
    with pytest.raises(SequenceFormatError):
        SwapSequence((0, 2), "x")


def test_persist_roundtrip(tmp_path, small):
    model, X = small
    seq = greedy_sequence(model, X)
    persist_sequence(seq, tmp_path / "s.json")
    back = load_sequence(tmp_path / "s.json")
    assert back == seq
    doc = json.loads((tmp_path / "s.json").read_text())
    assert set(doc) == {"version", "L", "bits", "weights", "provenance", "order", "per_step_lis"}


@pytest.mark.parametrize("doc, fragment", [
    ({"version": 1, "L": 3, "order": [0, 1, 1], "provenance": "x"}, "repeated"),
    ({"version": 1, "L": 4, "order": [0, 1, 2], "provenance": "x"}, "L=4"),
    ({"version": 9, "L": 3, "order": [0, 1, 2], "provenance": "x"}, "version"),
    ({"version": 1, "L": 3, "provenance": "x"}, "order"),
])
def test_load_rejects_bad_documents(tmp_path, doc, fragment):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(SequenceFormatError, match=fragment):
        load_sequence(p)


def test_check_layers():
    with pytest.raises(SequenceFormatError):
        baseline_sequence(FRONT_TO_BACK, 4).check_layers(5)


def test_estimator_api(small):
    model, X = small
    est = LayerSwapProfiler(model, alpha1=0.3, bits=4)
    assert est.get_params()["alpha1"] == 0.3
    with pytest.raises(NotFittedError):
        est.degradation_curve(X)
    est.fit(X)
    assert est.n_features_in_ == 8
    assert est.sequence_ == greedy_sequence(model, X, 0.3, 0.25, 0.5, 4)
    assert est.score(X) == pytest.approx(-est.degradation_curve(X).sum())
    cloned = clone(est)
    assert not hasattr(cloned, "sequence_")
    assert cloned.get_params()["alpha1"] == 0.3
    with pytest.raises(ValueError):
        LayerSwapProfiler(model, bits=5).fit(X)
    with pytest.raises(ValueError):
        LayerSwapProfiler(None).fit(X)
