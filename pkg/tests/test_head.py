import math

import numpy as np
import pytest

from ffpdet import tensor as T
from ffpdet.boxes import giou_loss
from ffpdet.checks import exhaustive_single, random_gts, toy_grid
from ffpdet.config import DetectorConfig
from ffpdet.errors import ConfigError, ShapeError
from ffpdet.head import (CapacityError, assign_from_cost, assign_one_to_one, check_score_threshold,
                         decode_nms_free, focal_loss, focal_loss_array, giou_loss_tensor,
                         sigmoid_focal_loss, total_loss)
from ffpdet.tensor import Tensor


@pytest.fixture
def det_cfg():
    return DetectorConfig()


def test_focal_known_values():
    assert focal_loss(0.5, 1) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert focal_loss(1.0, 1) == pytest.approx(0.0, abs=1e-8)
    assert focal_loss(0.0, 0) == pytest.approx(0.0, abs=1e-8)
    # clamped, finite at the saturated wrong end
    assert math.isfinite(focal_loss(0.0, 1)) and focal_loss(0.0, 1) == pytest.approx(0.25 * math.log(1e9))


def test_focal_array_matches_scalar(rng):
    y = rng.uniform(0, 1, size=50)
    x = rng.integers(0, 2, size=50)
    np.testing.assert_allclose(focal_loss_array(y, x), [focal_loss(a, int(b)) for a, b in zip(y, x)])


def test_sigmoid_focal_matches_probability_form(rng):
    logits = rng.normal(0, 3, size=(4, 3))
    targets = rng.integers(0, 2, size=(4, 3))
    got = sigmoid_focal_loss(Tensor(logits, dtype=np.float64), targets).item()
    p = 1 / (1 + np.exp(-logits))
    assert got == pytest.approx(focal_loss_array(p, targets).sum(), rel=1e-9)


def test_giou_tensor_matches_scalar(rng):
    pred = np.array([[0, 0, 4, 4], [1, 1, 3, 5.0]])
    gt = np.array([[2, 2, 6, 6], [1, 1, 3, 5.0]])
    got = giou_loss_tensor(Tensor(pred, dtype=np.float64), gt).data
    np.testing.assert_allclose(got.ravel(), [giou_loss(a, b) for a, b in zip(pred, gt)])
    assert giou_loss(gt[1], gt[1]) == pytest.approx(0.0)


def test_assignment_is_injective_and_covers_gts(rng, det_cfg):
    for _ in range(50):
        grid = toy_grid(rng)
        boxes, cls = random_gts(rng, int(rng.integers(1, 12)), 64.0)
        a = assign_one_to_one(grid, boxes, cls, (64.0, 64.0), det_cfg)
        assert sorted(a.gt_indices) == list(range(len(boxes)))
        assert len(set(a.locations)) == len(a.locations)


def test_single_gt_takes_global_minimum(rng, det_cfg):
    for _ in range(30):
        grid = toy_grid(rng)
        boxes, cls = random_gts(rng, 1, 64.0)
        a = assign_one_to_one(grid, boxes, cls, (64.0, 64.0), det_cfg)
        assert a.locations[0] == exhaustive_single(grid, boxes[0], int(cls[0]), 64.0, det_cfg)


def test_smaller_gt_chooses_first():
    cost = np.array([[0.0, 5.0], [0.0, 1.0]])
    gts, locs = assign_from_cost(cost, np.array([10.0, 1.0]))
    assert gts == [1, 0] and locs == [0, 1]


def test_tie_breaks_to_lowest_index():
    _, locs = assign_from_cost(np.ones((1, 5)), np.array([1.0]))
    assert locs == [0]


def test_too_many_gts_raises(rng, det_cfg):
    grid = toy_grid(rng, shapes=((1, 1), (1, 1), (1, 1)))
    boxes, cls = random_gts(rng, 4, 64.0)
    with pytest.raises(CapacityError):
        assign_one_to_one(grid, boxes, cls, (64.0, 64.0), det_cfg)


def test_total_loss_recombines_exactly(rng, det_cfg):
    grid = toy_grid(rng, batch=2)
    targets = [random_gts(rng, 3, 64.0), random_gts(rng, 0, 64.0)]
    lb = total_loss(grid, targets, (64.0, 64.0), det_cfg)
    assert lb.total == lb.recombined()
    assert len(lb.assignments[1]) == 0
    with pytest.raises(ShapeError):
        total_loss(grid, targets[:1], (64.0, 64.0), det_cfg)


def test_empty_batch_has_classification_loss_only(rng, det_cfg):
    grid = toy_grid(rng)
    lb = total_loss(grid, [random_gts(rng, 0, 64.0)], (64.0, 64.0), det_cfg)
    assert lb.l1 == 0 and lb.giou == 0 and lb.cls > 0


def test_decode_sorted_thresholded_and_capped(rng):
    grid = toy_grid(rng, batch=2)
    dets = decode_nms_free(grid, 0.3, max_detections=5)
    for d in dets:
        scores = [x.score for x in d]
        assert scores == sorted(scores, reverse=True)
        assert all(s >= 0.3 for s in scores) and len(d) <= 5
    assert decode_nms_free(grid, 1.0)[0] == []


def test_decode_high_threshold_is_subset(rng):
    grid = toy_grid(rng)
    lo = decode_nms_free(grid, 0.2, 1000)[0]
    hi = decode_nms_free(grid, 0.6, 1000)[0]
    assert set(hi) <= set(lo)


@pytest.mark.parametrize("thr", [-0.1, 1.5])
def test_bad_score_threshold(thr):
    with pytest.raises(ConfigError):
        check_score_threshold(thr)


def test_head_forward_shapes(model, rng):
    x = Tensor(rng.normal(size=(2, 3, 64, 96)).astype(np.float32))
    with T.no_grad():
        grid = model(x)
    assert grid.shapes() == [(8, 12), (4, 6), (2, 3)]
    assert grid.num_locations() == 96 + 24 + 6
    d = grid.flat_distances().data
    assert (d > 0).all()
    b = grid.flat_boxes().data
    assert (b[..., 2] > b[..., 0]).all() and (b[..., 3] > b[..., 1]).all()


def test_zero_towers_give_prior_probability(rng):
    from ffpdet.head import DetectionHead
    head = DetectionHead(8, DetectorConfig(head_channels=8, tower_convs=2), rng)
    for name, p in head.named_parameters():
        if not name.startswith("cls_out.bias"):
            p.data[:] = 0

    class _P:
        def p_levels(self):
            return [Tensor(rng.normal(size=(1, 8, s, s)).astype(np.float32)) for s in (8, 4, 2)]

    grid = head(_P())
    probs = 1 / (1 + np.exp(-grid.flat_logits().data))
    np.testing.assert_allclose(probs, 0.01, rtol=1e-5)
    assert grid.num_locations() == 84


def test_decoded_box_definition(rng):
    grid = toy_grid(rng, shapes=((1, 1), (1, 1), (1, 1)))
    d = grid.flat_distances().data[0, 0]
    b = grid.flat_boxes().data[0, 0]
    np.testing.assert_allclose(b, [4 - d[0], 4 - d[1], 4 + d[2], 4 + d[3]])
