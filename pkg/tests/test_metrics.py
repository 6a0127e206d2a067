import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridlens import metrics as m

G = 8


def _cells(b):
    x0, y0, x1, y1 = b
    return {(x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)}


def _all_boxes(g):
    return [(x0, y0, x1, y1) for x0, x1 in itertools.combinations_with_replacement(range(g), 2)
            for y0, y1 in itertools.combinations_with_replacement(range(g), 2)]


def test_iou_examples():
    assert m.iou((1, 1, 3, 3), (1, 1, 3, 3)) == 1.0
    assert m.iou((0, 0, 1, 1), (3, 3, 4, 4)) == 0.0
    assert m.iou((0, 0, 1, 1), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_matches_cell_enumeration_on_sample():
    boxes = _all_boxes(5)
    for a in boxes[::7]:
        for b in boxes[::11]:
            ca, cb = _cells(a), _cells(b)
            assert m.iou(a, b) == pytest.approx(len(ca & cb) / len(ca | cb), abs=1e-15)


def test_iou_symmetric_exhaustive():
    boxes = _all_boxes(G)
    assert len(boxes) == 36 * 36
    for a in boxes:
        for b in boxes:
            assert m.iou(a, b) == m.iou(b, a)


def test_localization_score_threshold_example():
    # IoUs 0.95, 0.6, 0.3 -> rates 2/3, 1/3, 1/3 -> 4/9
    assert m.success_rates([0.95, 0.6, 0.3]) == [2 / 3, 1 / 3, 1 / 3]
    truth = [(0, 0, 3, 4)] * 3  # area 20
    preds = [(0, 0, 3, 4), (0, 0, 3, 2), (0, 0, 1, 2)]  # IoU 1, 12/20, 6/20
    assert m.localization_score(preds, truth) == pytest.approx(4 / 9, abs=1e-15)


def test_localization_score_extremes():
    truth = [(0, 0, 1, 1), (2, 2, 4, 4)]
    assert m.localization_score(truth, truth) == 1.0
    fails = [m.ParseFailure("x"), m.ParseFailure("y")]
    assert m.localization_score(fails, truth) == 0.0


def test_localization_score_length_mismatch():
    with pytest.raises(m.ContractError):
        m.localization_score([(0, 0, 0, 0)], [])


def test_success_is_strictly_greater():
    assert m.success_rates([0.5, 0.7, 0.9]) == [1 / 3 * 2, 1 / 3, 0.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.integers(0, 9), st.floats(0, 1))
def test_score_monotone_in_single_iou(ious, i, bump):
    i %= len(ious)
    raised = list(ious)
    raised[i] = max(ious[i], bump)
    assert sum(m.success_rates(raised)) >= sum(m.success_rates(ious))


def test_parse_box_answer():
    assert m.parse_box_answer(["[", "1", ",", "2", ",", "2", ",", "4", "]"]) == m.BoundingBox(1, 2, 2, 4)
    assert m.parse_box_answer("[ 1 , 2 , 2 , 4 ] <end>".split()) == m.BoundingBox(1, 2, 2, 4)
    inverted = m.parse_box_answer("[ 2 , 2 , 1 , 4 ]".split())
    assert isinstance(inverted, m.ParseFailure) and not inverted
    assert isinstance(m.parse_box_answer("[ 1 , 2 , 2".split()), m.ParseFailure)
    assert isinstance(m.parse_box_answer("[ 1 , 2 , 9 , 4 ]".split(), grid_size=8), m.ParseFailure)
    assert isinstance(m.parse_box_answer("[ 1 ; 2 , 2 , 4 ]".split()), m.ParseFailure)
    assert isinstance(m.parse_box_answer("[ a , 2 , 2 , 4 ]".split()), m.ParseFailure)


def test_bounding_box_invariants():
    with pytest.raises(ValueError):
        m.BoundingBox(3, 0, 2, 0)
    assert m.BoundingBox(2, 2, 2, 2).area == 1


def test_classification_score():
    assert m.classification_score([["a", "dog", "b"]], ["dog"]) == 1.0
    assert m.classification_score([[]], ["dog"]) == 0.0
    everything = ["person", "car", "dog"]
    assert m.classification_score([everything] * 3, everything) == 1.0


def test_false_positive_rate():
    assert m.false_positive_rate([["no"]] * 4) == 0.0
    assert m.false_positive_rate([["yes"]] * 4) == 1.0
    assert m.false_positive_rate([["yes"]] * 3 + [["no"]] * 7) == pytest.approx(0.3)


def test_binary_accuracy():
    assert m.binary_accuracy([["yes"], ["no"], ["yes"]], [True, False, False]) == pytest.approx(2 / 3)
