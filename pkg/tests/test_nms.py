import numpy as np
import pytest

from ffpdet.bench import stress_candidates
from ffpdet.boxes import BBox, Detection
from ffpdet.errors import ConfigError
from ffpdet.nms import nms, nms_arrays, nms_reference


def det(x1, y1, x2, y2, s, c=1):
    return Detection(BBox(x1, y1, x2, y2), s, c)


def test_suppresses_overlap_within_class():
    dets = [det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.8), det(20, 20, 30, 30, 0.7)]
    assert nms(dets, 0.5) == [dets[0], dets[2]]


def test_other_class_survives():
    dets = [det(0, 0, 10, 10, 0.9, 1), det(0, 0, 10, 10, 0.8, 2)]
    assert nms(dets, 0.5) == dets


def test_iou_equal_to_threshold_is_suppressed():
    # IoU of these two boxes is exactly 0.5
    dets = [det(0, 0, 2, 1, 0.9), det(0, 0, 1, 1, 0.8)]
    assert nms(dets, 0.5) == [dets[0]]


def test_empty_and_single():
    assert nms([], 0.5) == []
    one = [det(0, 0, 1, 1, 0.3)]
    assert nms(one, 0.5) == one


@pytest.mark.parametrize("thr", [0.0, 1.0, -0.2, 1.3])
def test_threshold_range(thr):
    with pytest.raises(ConfigError):
        nms([det(0, 0, 1, 1, 0.3)], thr)


@pytest.mark.parametrize("seed", range(5))
def test_vectorised_matches_reference(seed):
    boxes, scores, classes = stress_candidates(300, 120, 90, seed=seed)
    dets = [Detection(BBox(*b), float(s), int(c)) for b, s, c in zip(boxes, scores, classes)]
    keep = nms_arrays(boxes, scores, classes, 0.5)
    assert [dets[i] for i in keep] == nms_reference(dets, 0.5)


def test_output_is_idempotent():
    boxes, scores, classes = stress_candidates(200, 100, 100, seed=9)
    dets = [Detection(BBox(*b), float(s), int(c)) for b, s, c in zip(boxes, scores, classes)]
    once = nms(dets, 0.4)
    assert nms(once, 0.4) == once
    assert len(once) < len(dets)


def test_stress_candidates_are_deterministic_and_valid():
    a = stress_candidates(500, 64, 48, seed=2)
    b = stress_candidates(500, 64, 48, seed=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    boxes = a[0]
    assert (boxes[:, 2] > boxes[:, 0]).all() and (boxes[:, 3] <= 48).all()
