import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import ndimage as ndi

from nailfold.capillary import INSUFFICIENT_CLEAR, MISSING_SCALE, Null, is_null
from nailfold.imaging import InvalidInputError
from nailfold.report import (
    ABNORMAL_FLAG,
    DIAGNOSED,
    NORMAL_FLAG,
    REPORT_SCHEMA,
    NormalRanges,
    build_subject_report,
    classification_metrics,
    decode_value,
    detection_sensitivity,
    diagnose,
    encode_value,
    pixel_sensitivity,
    regression_metrics,
)

EPS = 0.01


def _flag(name, value, ranges=NormalRanges()):
    return diagnose({name: value}, ranges)[name]


# --- diagnosis ------------------------------------------------------------------------

def test_diagnose_table_examples():
    assert _flag("venous", 17.0) == NORMAL_FLAG
    assert _flag("venous", 17.01) == ABNORMAL_FLAG
    assert _flag("crossing_portion", 0.3) == NORMAL_FLAG
    assert _flag("crossing_portion", 0.35) == ABNORMAL_FLAG
    assert diagnose({"apical": Null(MISSING_SCALE)})["apical"] == Null(MISSING_SCALE)


def test_default_ranges_values():
    r = NormalRanges()
    assert (r.crossing_portion_max, r.tortuous_portion_max) == (0.3, 0.1)
    assert (r.venous_um, r.arterial_um, r.apical_um, r.length_um) == ((11, 17), (9, 13), (12, 18), (150, 250))


@pytest.mark.parametrize("name", DIAGNOSED)
def test_diagnose_boundaries_inclusive(name):
    lo, hi = NormalRanges().interval(name)
    assert _flag(name, lo) == NORMAL_FLAG and _flag(name, hi) == NORMAL_FLAG
    assert _flag(name, lo - EPS) == ABNORMAL_FLAG and _flag(name, hi + EPS) == ABNORMAL_FLAG
    assert _flag(name, lo + EPS) == NORMAL_FLAG and _flag(name, hi - EPS) == NORMAL_FLAG


def test_unmeasured_feature_is_null():
    flags = diagnose({})
    assert all(is_null(flags[n]) for n in DIAGNOSED)


def test_ranges_override_and_validation():
    r = NormalRanges(venous_um=(10, 20))
    assert _flag("venous", 19.0, r) == NORMAL_FLAG
    with pytest.raises(InvalidInputError):
        NormalRanges(venous_um=(20, 10))
    with pytest.raises(InvalidInputError):
        NormalRanges(crossing_portion_max=-0.1)


@given(st.sampled_from(DIAGNOSED), st.floats(-500, 500), st.floats(0, 500))
def test_diagnose_monotone_outside(name, value, extra):
    lo, hi = NormalRanges().interval(name)
    if _flag(name, value) == ABNORMAL_FLAG:
        farther = value + extra if value > hi else value - extra
        assert _flag(name, farther) == ABNORMAL_FLAG


# --- regression ------------------------------------------------------------------------

def test_regression_examples():
    assert regression_metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)
    mae, rmse = regression_metrics([1, 2, 3], [1, 2, 4])
    assert mae == pytest.approx(1 / 3) and rmse == pytest.approx(1 / math.sqrt(3))


def test_regression_nulls_and_errors():
    mae, _ = regression_metrics([1.0, None, Null("x"), 5.0], [2.0, 3.0, 4.0, float("nan")])
    assert mae == 1.0
    with pytest.raises(InvalidInputError):
        regression_metrics([None], [1.0])
    with pytest.raises(InvalidInputError):
        regression_metrics([1.0], [1.0, 2.0])


@given(st.lists(st.tuples(st.integers(-100, 100), st.integers(-100, 100)), min_size=1, max_size=40))
def test_regression_matches_hand_oracle(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    n = len(pairs)
    abs_sum = sum(abs(p - t) for p, t in pairs)
    sq_sum = sum((p - t) ** 2 for p, t in pairs)
    mae, rmse = regression_metrics(pred, truth)
    assert mae == pytest.approx(abs_sum / n, rel=1e-15, abs=0)
    assert rmse == pytest.approx(math.sqrt(sq_sum / n), rel=1e-15, abs=0)
    assert rmse >= mae - 1e-12


# --- classification ------------------------------------------------------------------------

def test_classification_examples():
    perfect = classification_metrics(["A", "B", "C"], ["A", "B", "C"])
    assert perfect["accuracy"] == 1.0 and set(perfect["weighted"].values()) == {1.0}
    m = classification_metrics(["A", "A", "B", "B"], ["A", "B", "A", "B"])
    assert m["accuracy"] == 0.5
    for lab in "AB":
        assert m["per_class"][lab]["precision"] == 0.5 and m["per_class"][lab]["recall"] == 0.5


def test_classification_all_one_class_on_three_to_one_mix():
    # truth 3 A : 1 B, everything predicted A
    m = classification_metrics(["A"] * 4, ["A", "A", "A", "B"])
    # confusion (rows truth, cols pred): A -> [3, 0], B -> [1, 0]
    assert m["confusion"] == [[3, 0], [1, 0]]
    prec_a, prec_b = 3 / 4, 0.0
    assert m["per_class"]["A"]["precision"] == prec_a and m["per_class"]["B"]["precision"] == prec_b
    assert m["weighted"]["precision"] == pytest.approx(0.75 * prec_a + 0.25 * prec_b)
    assert m["weighted"]["recall"] == 0.75 == m["accuracy"]


def test_classification_errors():
    with pytest.raises(InvalidInputError):
        classification_metrics([], [])
    with pytest.raises(InvalidInputError):
        classification_metrics(["A"], ["A", "B"])


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from("ABC")), min_size=1, max_size=60))
def test_classification_matches_confusion_oracle(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    m = classification_metrics(pred, truth)
    n = len(pairs)
    assert m["accuracy"] == sum(p == t for p, t in pairs) / n
    for lab in m["labels"]:
        tp = sum(p == t == lab for p, t in pairs)
        n_pred = sum(p == lab for p in pred)
        n_true = sum(t == lab for t in truth)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_true if n_true else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert m["per_class"][lab] == {"precision": prec, "recall": rec, "f1": f1, "support": n_true}
    assert m["weighted"]["recall"] == pytest.approx(m["accuracy"], rel=1e-12)


# --- detection and pixel sensitivity ----------------------------------------------------------

def test_detection_examples():
    truth = [(10, 10), (50, 50), (90, 90)]
    assert detection_sensitivity(truth, truth) == 1.0
    assert detection_sensitivity([], truth) == 0.0
    assert detection_sensitivity([(12, 11), (48, 53)], truth) == pytest.approx(2 / 3)
    # one prediction cannot claim two truths
    assert detection_sensitivity([(30, 30)], [(25, 30), (35, 30)], radius=10) == 0.5
    with pytest.raises(InvalidInputError):
        detection_sensitivity([(0, 0)], [])
    with pytest.raises(InvalidInputError):
        detection_sensitivity([(0, 0)], [(0, 0)], radius=0)


def test_detection_greedy_takes_closest_pair_first():
    # pred 0 sits 1 px from truth 1 and 4 px from truth 0; pred 1 is 6 px from truth 0 only
    truth = [(0, 0), (0, 5)]
    pred = [(0, 4), (0, -6)]
    assert detection_sensitivity(pred, truth, radius=7) == 1.0


def test_pixel_sensitivity_examples():
    truth = np.zeros((20, 20), dtype=bool)
    truth[5:15, 8:12] = True
    assert pixel_sensitivity(truth, truth) == 1.0
    assert pixel_sensitivity(np.zeros_like(truth), truth) == 0.0
    assert pixel_sensitivity(ndi.binary_dilation(truth), truth) == 1.0
    half = truth.copy()
    half[10:] = False
    assert pixel_sensitivity(half, truth) == 0.5
    with pytest.raises(InvalidInputError):
        pixel_sensitivity(truth, np.zeros_like(truth))
    with pytest.raises(InvalidInputError):
        pixel_sensitivity(truth[:5], truth)


# --- subject reports ------------------------------------------------------------------------

def _image(name, **feats):
    return {"image": name, "features": {k: encode_value(v) for k, v in feats.items()}}


def test_subject_single_image_equals_image():
    rep = build_subject_report("s1", [_image("a", venous=13.0, crossing_portion=0.1)])
    assert rep["schema"] == REPORT_SCHEMA and rep["subject"] == "s1"
    assert rep["features"]["venous"] == 13.0 and rep["features"]["crossing_portion"] == 0.1


def test_subject_mean_and_flag():
    rep = build_subject_report("s", [_image("a", venous=12.0), _image("b", venous=16.0)])
    assert rep["features"]["venous"] == 14.0 and rep["flags"]["venous"] == NORMAL_FLAG


def test_subject_null_handling():
    rep = build_subject_report("s", [
        _image("a", venous=Null(MISSING_SCALE), apical=15.0),
        _image("b", venous=Null(MISSING_SCALE), apical=Null(INSUFFICIENT_CLEAR)),
    ])
    assert rep["features"]["venous"] == {"value": None, "reason": MISSING_SCALE}
    assert rep["flags"]["venous"] == {"value": None, "reason": MISSING_SCALE}
    # a single non-null image is enough for a subject value
    assert rep["features"]["apical"] == 15.0
    with pytest.raises(InvalidInputError):
        build_subject_report("s", [])


def test_serialized_nulls_always_carry_a_reason():
    rep = build_subject_report("s", [_image("a", venous=Null(MISSING_SCALE), length=float("inf"))])
    text = json.dumps(rep)

    def walk(node):
        if isinstance(node, dict):
            if "value" in node and node["value"] is None:
                assert isinstance(node.get("reason"), str) and node["reason"]
            for v in node.values():
                walk(v)
        elif isinstance(node, list):
            for v in node:
                walk(v)

    walk(json.loads(text))
    assert "NaN" not in text and "Infinity" not in text


@given(st.one_of(st.floats(allow_nan=False, allow_infinity=False), st.sampled_from(["A", "B"]).map(Null)))
def test_value_encoding_round_trip(v):
    assume(not isinstance(v, float) or math.isfinite(v))
    assert decode_value(json.loads(json.dumps(encode_value(v)))) == v
