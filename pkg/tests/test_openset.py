import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck_cases import tiny_config
from oracles import algorithm1, all_patterns, youden_bruteforce, youden_j
from osgait.dataio import WindowSet
from osgait.model import PCAA
from osgait.openset import (DetectionOutcome, DetectorConfig, blocks, calibrate_threshold, confusion_from_scores,
                            decide, detect, evaluate_openset, score_windows)
from osgait.priors import place_centroids

TAU = 0


# -- majority decision -------------------------------------------------------

def test_worked_examples():
    assert decide([1.0], [4], TAU) == 4
    assert decide([0.0], [4], TAU) is None          # equal to tau is not above
    assert decide([-1.0], [4], TAU) is None
    assert decide([1, 1, -1, -1], [1, 1, 1, 1], TAU) is None     # 2 > 2 is false
    assert decide([1, 1, 1], [2, 2, 5], TAU) == 2


def test_modal_tie_uses_summed_score():
    assert decide([1, 5, 2, 1], [3, 3, 7, 7], TAU) == 3
    assert decide([1, 1, 5, 2], [3, 3, 7, 7], TAU) == 7
    assert decide([2, 2], [9, 4], TAU) == 4         # full tie: smaller id


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_exhaustive_against_literal_oracle(k):
    rng = np.random.default_rng(k)
    n = 0
    for mask, preds in all_patterns(k):
        # integer scores keep summed-score ties exact in both implementations
        scores = [int(rng.integers(1, 4)) if up else -int(rng.integers(0, 3)) for up in mask]
        assert decide(scores, preds, TAU) == algorithm1(scores, preds, TAU)
        n += 1
    assert n == 2**k * 3**k


def test_decide_rejects_length_mismatch():
    with pytest.raises(ValueError):
        decide([1.0, 2.0], [1], TAU)
    with pytest.raises(ValueError):
        DetectorConfig(0.0, k=0)


quarter = st.integers(-200, 200).map(lambda i: i / 4)


@given(st.lists(quarter, min_size=1, max_size=9), st.data())
@settings(max_examples=200)
def test_invariant_under_monotone_transform(scores, data):
    preds = data.draw(st.lists(st.integers(1, 3), min_size=len(scores), max_size=len(scores)))
    tau = data.draw(quarter)
    f = lambda s: np.exp(np.asarray(s, dtype=float) / 10.0)
    a, b = decide(scores, preds, tau), decide(f(scores), preds, float(f(tau)))
    assert (a is None) == (b is None)
    counts = np.bincount(preds)
    if (counts == counts.max()).sum() == 1:
        assert a == b
    # positive affine maps preserve the summed-score tie-break as well
    assert decide(3.0 * np.asarray(scores) + 1.0, preds, 3.0 * tau + 1.0) == a


@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=9), st.data())
@settings(max_examples=100)
def test_raising_tau_only_moves_known_to_unknown(scores, data):
    preds = data.draw(st.lists(st.integers(1, 3), min_size=len(scores), max_size=len(scores)))
    lo = data.draw(st.floats(-25, 25, allow_nan=False))
    hi = lo + data.draw(st.floats(0, 10, allow_nan=False))
    if decide(scores, preds, lo) is None:
        assert decide(scores, preds, hi) is None
    out = decide(scores, preds, hi)
    assert out is None or out in preds


# -- calibration ------------------------------------------------------------

def test_separable_calibration():
    known, unknown = np.full(5, np.log(0.9)), np.full(7, np.log(0.1))
    tau = calibrate_threshold(known, unknown)
    assert np.log(0.1) < tau < np.log(0.9)
    assert abs(tau - (np.log(0.9) + np.log(0.1)) / 2) <= 1e-12
    assert youden_j(known, unknown, tau) == 1.0


def test_degenerate_calibration_errors():
    with pytest.raises(ValueError, match="degenerate"):
        calibrate_threshold([1.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        calibrate_threshold([], [1.0])


def test_identical_distributions_give_zero_j():
    s = np.array([1.0, 2.0, 3.0])
    tau = calibrate_threshold(s, s)
    assert youden_j(s, s, tau) == 0.0


def test_calibration_matches_bruteforce_sweep():
    rng = np.random.default_rng(0)
    for _ in range(100):
        known = rng.normal(1.0, 1.0, size=int(rng.integers(1, 40)))
        unknown = rng.normal(0.0, 1.5, size=int(rng.integers(1, 40)))
        if rng.random() < 0.3:       # exercise ties between the two lists
            known = np.round(known, 1)
            unknown = np.round(unknown, 1)
        if len(np.unique(np.concatenate([known, unknown]))) < 2:
            continue
        tau = calibrate_threshold(known, unknown)
        best_j, best_t = youden_bruteforce(known.tolist(), unknown.tolist())
        assert abs(youden_j(known, unknown, tau) - best_j) <= 1e-12
        assert tau == pytest.approx(best_t, abs=1e-12)


# -- block evaluation -------------------------------------------------------

def test_blocks_drop_tail():
    assert [b.tolist() for b in blocks(np.arange(7), 3)] == [[0, 1, 2], [3, 4, 5]]
    assert len(blocks(np.arange(7), 1)) == 7


def test_perfect_detector_gives_diagonal():
    labels = np.repeat([1, 2, 3, 8, 9], 6)
    preds = np.where(labels <= 3, labels, 1)
    scores = np.where(labels <= 3, 5.0, -5.0)
    for k in (1, 2, 3):
        cm = confusion_from_scores(scores, preds, labels, np.arange(30), [1, 2, 3], 0.0, k)
        assert np.array_equal(cm, np.diag(np.diag(cm)))
        assert cm[3, 3] == 2 * (6 // k) and cm[0, 0] == 6 // k


def _hand_confusion(scores, preds, labels, order, known, tau, k):
    cm = np.zeros((len(known) + 1,) * 2, dtype=int)
    for sid in sorted(set(labels.tolist())):
        stream = [i for i in order if labels[i] == sid]
        row = known.index(sid) if sid in known else len(known)
        for j in range(len(stream) // k):
            blk = stream[j * k:(j + 1) * k]
            v = algorithm1([scores[i] for i in blk], [preds[i] for i in blk], tau)
            cm[row, len(known) if v is None else known.index(v)] += 1
    return cm


@pytest.mark.parametrize("k", [1, 2, 4, 6])
def test_confusion_matches_hand_simulation(k):
    rng = np.random.default_rng(k)
    n = 200
    labels = rng.choice([1, 2, 3, 5, 7], size=n)
    preds = rng.choice([1, 2, 3], size=n)
    scores = rng.normal(size=n).round(2)
    key = rng.permutation(n)
    order = list(np.argsort(key, kind="stable"))
    cm = confusion_from_scores(scores, preds, labels, key, [1, 2, 3], 0.1, k)
    np.testing.assert_array_equal(cm, _hand_confusion(scores, preds, labels, order, [1, 2, 3], 0.1, k))


# -- with a model -----------------------------------------------------------

def _model_and_prior():
    cfg = tiny_config()
    return PCAA(cfg, seed=0).eval(), place_centroids(cfg.M, cfg.K, seed=0, subject_ids=[4, 6, 9])


def _ws(labels, seed=0):
    cfg = tiny_config()
    n = len(labels)
    data = np.random.default_rng(seed).normal(size=(n, cfg.N_f, cfg.N_p, 4))
    z = np.zeros(n, dtype=int)
    return WindowSet(data, np.asarray(labels), z, np.asarray(labels), np.arange(n))


def test_detect_end_to_end_and_ids_within_known():
    model, prior = _model_and_prior()
    ws = _ws([4] * 3)
    out = detect(ws.data, model, prior, DetectorConfig(tau=-1e9, k=3))
    assert isinstance(out, DetectionOutcome) and out.subject in (4, 6, 9)
    assert str(out) == f"Known({out.subject})"
    out = detect(ws.data, model, prior, DetectorConfig(tau=1e9, k=3))
    assert out.is_unknown and str(out) == "Unknown" and len(out.scores) == 3
    with pytest.raises(ValueError, match="k=2"):
        detect(ws.data, model, prior, DetectorConfig(0.0, k=2))


def test_score_windows_batches_consistently():
    model, prior = _model_and_prior()
    ws = _ws([4, 6, 9, 4, 6])
    a = score_windows(model, prior, ws.data, batch_size=2)
    b = score_windows(model, prior, ws.data, batch_size=5)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_array_equal(a[1], b[1])


def test_evaluate_openset_shapes_and_errors():
    model, prior = _model_and_prior()
    known, unknown = _ws([4, 4, 6, 6, 9, 9]), _ws([2, 2, 3, 3], seed=1)
    cm = evaluate_openset(model, prior, -1e9, 2, known, unknown)
    assert cm.shape == (4, 4) and cm.sum() == 5
    assert cm[3, 3] == 0                            # nothing rejected at tau = -inf
    empty = known.subset([])
    with pytest.raises(ValueError):
        evaluate_openset(model, prior, 0.0, 1, empty, empty)


def test_detector_config_round_trip(tmp_path):
    DetectorConfig(-42.5, 4).save(tmp_path / "d.json", "abc")
    assert DetectorConfig.load(tmp_path / "d.json") == (DetectorConfig(-42.5, 4), "abc")
