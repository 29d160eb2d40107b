import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashchat.metrics import (
    EvalConfig,
    EvaluationError,
    average_precision_at,
    bleu,
    classification_metrics,
    confusion_scores,
    embedding_score,
    evaluate_run,
    format_table,
    interval_iou,
    lcs_length,
    precrash_iou,
    rouge_l,
    temporal_score,
)
from crashchat.schema import PredictionRecord, TaskId, TemporalAnnotation, VideoSample

from oracles import bleu_by_hand, classification_by_hand, lcs_brute, precrash_piecewise


def ann(t_ar=2.0, t_ai=4.0, end=6.0, duration=10.0, tol=0.5):
    return TemporalAnnotation(t_ar, t_ai, end, duration, tol)


# --- recognition -----------------------------------------------------------


def test_confusion_matches_hand_computation():
    rep = confusion_scores(tp=97, fp=1, fn=3, tn=99)
    rec, pre, f1 = classification_by_hand(97, 1, 3)
    assert rep.positive.recall == pytest.approx(0.97)
    assert rep.positive.precision == pytest.approx(0.9898, abs=1e-4)
    assert rep.positive.f1 == pytest.approx(0.9798, abs=1e-4)
    assert (rep.positive.recall, rep.positive.precision, rep.positive.f1) == pytest.approx((rec, pre, f1))


def test_no_positive_predictions_flags_zero_division():
    rep = confusion_scores(tp=0, fp=0, fn=5, tn=5)
    assert rep.positive.precision == 0.0
    assert "precision_zero_division" in rep.positive.flags


def test_missing_and_unparsed_predictions_count_as_negative():
    preds = [PredictionRecord("v1", TaskId.RECOGNITION, "yes", True),
             PredictionRecord("v2", TaskId.RECOGNITION, "maybe", None)]
    rep = classification_metrics(preds, {"v1": True, "v2": True, "v3": False})
    assert rep.positive.recall == 0.5
    assert "unparsed:v2" in rep.flags and "missing:v3" in rep.flags


# --- interval IoU ----------------------------------------------------------


def test_interval_iou_cases():
    assert interval_iou((2, 4), (2, 4)) == 1.0
    assert interval_iou((2, 4), (3, 5)) == pytest.approx(1 / 3)
    assert interval_iou((0, 1), (2, 3)) == 0.0
    assert interval_iou((0, 2), (2, 3)) == 0.0
    assert interval_iou((3, 3), (3, 3)) == 1.0
    assert interval_iou((3, 3), (2, 4)) == 0.0


@given(st.floats(0, 50), st.floats(0.01, 20), st.floats(0, 50), st.floats(0.01, 20))
def test_interval_iou_bounded_and_symmetric(a, la, b, lb):
    x, y = (a, a + la), (b, b + lb)
    v = interval_iou(x, y)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(interval_iou(y, x))


# --- pre-crash IoU ---------------------------------------------------------


def test_precrash_iou_reference_points():
    a = ann(t_ar=2.0, t_ai=4.0, tol=0.5)
    assert precrash_iou(2.0, a) == 1.0
    assert precrash_iou(1.5, a) == 1.0
    assert precrash_iou(3.0, a) == pytest.approx(0.5)
    assert precrash_iou(4.0, a) == 0.0
    assert precrash_iou(1.49, a) == 0.0
    assert precrash_iou(9.0, a) == 0.0


def test_precrash_iou_delta_override():
    a = ann(t_ar=2.0, t_ai=4.0, tol=0.5)
    assert precrash_iou(1.2, a) == 0.0
    assert precrash_iou(1.2, a, delta=1.0) == 1.0


@given(st.floats(0, 5), st.floats(0.1, 5), st.floats(0.05, 2), st.floats(-2, 12))
def test_precrash_iou_matches_oracle(t_ar, gap, delta, t_hat):
    a = TemporalAnnotation(t_ar, t_ar + gap, t_ar + gap, t_ar + gap + 1, delta)
    assert precrash_iou(t_hat, a) == precrash_piecewise(t_hat, t_ar, t_ar + gap, delta)[0]


@given(st.floats(0, 5), st.floats(0.1, 5), st.floats(0.05, 2))
def test_precrash_iou_never_increases_after_onset(t_ar, gap, delta):
    a = TemporalAnnotation(t_ar, t_ar + gap, t_ar + gap, t_ar + gap + 1, delta)
    ts = np.linspace(t_ar, t_ar + gap, 50)
    vals = [precrash_iou(t, a) for t in ts]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


# --- AP --------------------------------------------------------------------


def test_ap_counts_threshold_inclusively():
    assert average_precision_at([0.3, 0.5, 0.7, 0.1], 0.5) == 0.5
    with pytest.raises(EvaluationError):
        average_precision_at([], 0.5)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_ap_monotone_in_threshold(ious):
    s = temporal_score(dict(enumerate(map(float, ious))))
    assert s.ap[0.3] >= s.ap[0.5] >= s.ap[0.7]
    assert 0.0 <= s.miou <= 1.0


# --- text metrics ----------------------------------------------------------


def test_bleu_identity_is_one():
    t = "the car hits the cyclist at the crossing"
    assert bleu(t, t) == pytest.approx(1.0, abs=1e-9)


def test_bleu_hand_example():
    cand, ref = "the car hits the cyclist", "the car hits a cyclist"
    expected = bleu_by_hand(cand.split(), ref.split())
    assert bleu(cand, ref) == pytest.approx(expected, rel=1e-12)
    # precisions 4/5, 2/4, 1/3, 0.1/2; equal lengths so no brevity penalty
    assert expected == pytest.approx((0.8 * 0.5 * (1 / 3) * 0.05) ** 0.25, rel=1e-12)


def test_bleu_without_overlap_is_zero():
    assert bleu("alpha beta", "gamma delta") == 0.0
    assert bleu("", "gamma") == 0.0


@settings(max_examples=200)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12),
       st.lists(st.sampled_from("abcde"), min_size=1, max_size=12))
def test_bleu_matches_oracle(c, r):
    assert bleu(c, r) == pytest.approx(bleu_by_hand(c, r), rel=1e-12, abs=1e-15)


def test_rouge_l_examples():
    assert rouge_l("a b c d", "a b c d") == 1.0
    assert rouge_l("a x c", "a b c") == pytest.approx(2 / 3)
    assert rouge_l("", "") == 1.0
    assert rouge_l("", "a") == 0.0


def test_lcs_matches_enumeration_small():
    # the exhaustive version of this lives in the acceptance suite
    for a in itertools.product("xyz", repeat=4):
        for b in itertools.product("xyz", repeat=3):
            assert lcs_length(a, b) == lcs_brute(a, b)


def test_embedding_score_with_stub_provider():
    def provider(sentences):
        return np.array([[len(s), 1.0] for s in sentences])

    assert embedding_score("ab", "ab", provider) == pytest.approx(1.0)
    assert 0.0 <= embedding_score("a", "abcdefgh", provider) < 1.0


# --- whole-run evaluation --------------------------------------------------


def _sample(vid, label, a=None):
    return VideoSample(vid, np.zeros((100, 4)), 10.0, label, a)


def test_evaluate_run_end_to_end():
    a1, a2 = ann(2, 4, 6), ann(1, 3, 5)
    samples = [_sample("p1", True, a1), _sample("p2", True, a2), _sample("n1", False)]
    preds = [
        PredictionRecord("p1", "a", "Yes", True),
        PredictionRecord("p2", "a", "Yes", True),
        PredictionRecord("n1", "a", "No", False),
        PredictionRecord("p1", "e", "from 4 to 6", (4.0, 6.0)),
        PredictionRecord("p2", "e", "No crash", None, ("gated",)),
        PredictionRecord("p1", "f", "at 2", 2.0),
        PredictionRecord("p1", "b", "a car hits a wall", "a car hits a wall"),
    ]
    refs = {("p1", TaskId.DESCRIPTION): "a car hits a wall", ("p2", TaskId.DESCRIPTION): "a truck"}
    rep = evaluate_run(preds, samples, refs, EvalConfig())
    assert rep.value(TaskId.RECOGNITION, "F1") == 1.0
    assert rep.value(TaskId.CRASH_LOCALIZATION, "mIoU") == 0.5
    assert rep.value(TaskId.CRASH_LOCALIZATION, "AP@50") == 0.5
    # p2 has no pre-crash answer and scores 0
    assert rep.value(TaskId.PRECRASH_LOCALIZATION, "mIoU") == 0.5
    assert rep.tasks[TaskId.DESCRIPTION].count == 2
    assert rep.tasks[TaskId.DESCRIPTION].flags == ["missing:p2"]
    assert not rep.tasks[TaskId.CAUSAL_REASONING].evaluated
    assert rep.to_json()["tasks"]["c"]["status"] == "not evaluated"


def test_duplicate_predictions_rejected():
    p = PredictionRecord("v", "a", "Yes", True)
    with pytest.raises(EvaluationError):
        evaluate_run([p, p], [_sample("v", False)], {})


def test_report_json_round_trip_and_table():
    samples = [_sample("p1", True, ann())]
    preds = [PredictionRecord("p1", "a", "Yes", True), PredictionRecord("p1", "e", "x", (4.0, 6.0))]
    rep = evaluate_run(preds, samples, {})
    back = type(rep).from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    table = format_table({"X": rep, "Y": back}, [("X", "Y")])
    assert "Crash Recognition" in table and "mIoU" in table
    assert math.isclose(back.value(TaskId.CRASH_LOCALIZATION, "mIoU"), 1.0)
