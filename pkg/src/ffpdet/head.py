"""Per-location detection head, one-to-one assignment, composite loss and decoding.

The head follows the anchor-free distance parameterisation: every grid cell
predicts class logits and four distances (left, top, right, bottom) from its
centre. Training assigns each ground truth to exactly one cell by minimum
matching cost, so inference needs no overlap suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import PyramidFeatures
from .boxes import BBox, Detection, pairwise_giou_loss
from .config import DetectorConfig
from .errors import ConfigError, ShapeError
from .functional import ConvSpec
from .nn import Conv2d, Module
from .tensor import Tensor

FOCAL_EPS = 1e-9
MAX_LOG_DISTANCE = 8.0
STRIDES = (8, 16, 32)


class CapacityError(ValueError):
    """More ground truths than grid locations."""


# ----------------------------------------------------------------------
# head network

@dataclass
class LevelPrediction:
    logits: Tensor      # N, classes, H, W
    distances: Tensor   # N, 4, H, W  (l, t, r, b) in pixels, > 0
    stride: int


@dataclass
class PredictionGrid:
    levels: List[LevelPrediction]

    @property
    def batch(self) -> int:
        return self.levels[0].logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.levels[0].logits.shape[1]

    def shapes(self) -> List[Tuple[int, int]]:
        return [lv.logits.shape[2:] for lv in self.levels]

    def num_locations(self) -> int:
        return sum(h * w for h, w in self.shapes())

    def centers(self) -> np.ndarray:
        """(L, 2) image coordinates of every location, level-major then row then column."""
        out = []
        for lv in self.levels:
            h, w = lv.logits.shape[2:]
            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            out.append(np.stack([(xs.ravel() + 0.5) * lv.stride, (ys.ravel() + 0.5) * lv.stride], axis=1))
        return np.concatenate(out, axis=0)

    def location_keys(self) -> np.ndarray:
        """(L, 3) integer (level, row, col) per flattened location."""
        out = []
        for li, lv in enumerate(self.levels):
            h, w = lv.logits.shape[2:]
            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            out.append(np.stack([np.full(h * w, li), ys.ravel(), xs.ravel()], axis=1))
        return np.concatenate(out, axis=0)

    def flat_logits(self) -> Tensor:
        parts = [lv.logits.transpose(0, 2, 3, 1).reshape(lv.logits.shape[0], -1, lv.logits.shape[1])
                 for lv in self.levels]
        return T.concatenate(parts, axis=1)

    def flat_distances(self) -> Tensor:
        parts = [lv.distances.transpose(0, 2, 3, 1).reshape(lv.distances.shape[0], -1, 4)
                 for lv in self.levels]
        return T.concatenate(parts, axis=1)

    def flat_boxes(self) -> Tensor:
        """(N, L, 4) decoded corners ``(cx - l, cy - t, cx + r, cy + b)``."""
        c = self.centers()
        centers4 = np.concatenate([c, c], axis=1)
        dist = self.flat_distances()
        sign = np.array([-1.0, -1.0, 1.0, 1.0], dtype=dist.dtype)
        return dist * sign + centers4.astype(dist.dtype)


class DetectionHead(Module):
    """Shared-weight class and box towers applied to every pyramid level."""

    def __init__(self, in_channels: int, cfg: DetectorConfig, rng: np.random.Generator):
        self.in_channels = in_channels
        width = cfg.head_channels
        cin = in_channels
        cls_tower, reg_tower = [], []
        for _ in range(cfg.tower_convs):
            cls_tower.append(Conv2d(ConvSpec.same(cin, width, 3, has_bias=True), rng))
            reg_tower.append(Conv2d(ConvSpec.same(cin, width, 3, has_bias=True), rng))
            cin = width
        self.cls_tower = cls_tower
        self.reg_tower = reg_tower
        self.cls_out = Conv2d(ConvSpec.same(cin, cfg.num_classes, 3, has_bias=True), rng, gain=0.1)
        self.reg_out = Conv2d(ConvSpec.same(cin, 4, 3, has_bias=True), rng, gain=0.1)
        self.cls_out.bias.data[:] = -math.log((1.0 - cfg.prior_prob) / cfg.prior_prob)

    def level(self, p: Tensor, stride: int) -> LevelPrediction:
        if p.shape[1] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} channels, got {p.shape[1]}")
        c = p
        for conv in self.cls_tower:
            c = F.relu(conv(c))
        r = p
        for conv in self.reg_tower:
            r = F.relu(conv(r))
        logits = self.cls_out(c)
        dist = T.exp(T.clip(self.reg_out(r), None, MAX_LOG_DISTANCE)) * float(stride)
        return LevelPrediction(logits, dist, stride)

    def forward(self, feats: PyramidFeatures, strides: Sequence[int] = STRIDES) -> PredictionGrid:
        ps = feats.p_levels()
        if any(t is None for t in ps):
            raise ShapeError("head needs P3, P4 and P5")
        return PredictionGrid([self.level(p, s) for p, s in zip(ps, strides)])


# ----------------------------------------------------------------------
# scalar losses on probabilities / boxes

def focal_loss(y: float, x: int, alpha: float = 0.25, beta: float = 2.0) -> float:
    """Focal loss for predicted probability ``y`` and binary label ``x``."""
    y = min(max(float(y), FOCAL_EPS), 1.0 - FOCAL_EPS)
    if x == 1:
        return -alpha * (1.0 - y) ** beta * math.log(y)
    return -(1.0 - alpha) * y ** beta * math.log(1.0 - y)


def focal_loss_array(y: np.ndarray, x: np.ndarray, alpha: float = 0.25, beta: float = 2.0) -> np.ndarray:
    y = np.clip(np.asarray(y, dtype=np.float64), FOCAL_EPS, 1.0 - FOCAL_EPS)
    x = np.asarray(x)
    pos = -alpha * (1.0 - y) ** beta * np.log(y)
    neg = -(1.0 - alpha) * y ** beta * np.log(1.0 - y)
    return np.where(x == 1, pos, neg)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, beta: float = 2.0) -> Tensor:
    """Elementwise focal loss evaluated from logits (stable log-sigmoid form), summed."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    log_p = -np.logaddexp(0.0, -z)
    log_1mp = -np.logaddexp(0.0, z)
    pos = -alpha * (1.0 - p) ** beta * log_p
    neg = -(1.0 - alpha) * p ** beta * log_1mp
    out = np.asarray((t * pos + (1.0 - t) * neg).sum(), dtype=z.dtype)

    def backward(g):
        dpos = alpha * (1.0 - p) ** beta * (beta * p * log_p - (1.0 - p))
        dneg = (1.0 - alpha) * p ** beta * (p - beta * (1.0 - p) * log_1mp)
        return (g * (t * dpos + (1.0 - t) * dneg),)

    return Tensor._make(out, (logits,), backward)


def giou_loss_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Per-pair GIoU loss between predicted (P,4) tensor and constant (P,4) targets."""
    gt = np.asarray(gt, dtype=pred.dtype)
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, i] for i in range(4))
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    iw = T.clip(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0, None)
    ih = T.clip(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0, None)
    inter = iw * ih
    union = area_p + area_g - inter
    hull = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    return 1.0 - inter / union + (hull - union) / hull


# ----------------------------------------------------------------------
# assignment

@dataclass
class Assignment:
    gt_indices: List[int] = field(default_factory=list)
    locations: List[int] = field(default_factory=list)       # flat location index
    keys: List[Tuple[int, int, int]] = field(default_factory=list)  # (level, row, col)

    def pairs(self) -> List[Tuple[int, Tuple[int, int, int]]]:
        return list(zip(self.gt_indices, self.keys))

    def __len__(self) -> int:
        return len(self.gt_indices)


def matching_cost(probs: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  image_size: Tuple[float, float], cfg: DetectorConfig) -> np.ndarray:
    """(G, L) cost ``l_cls*focal(p_gtclass, 1) + l_L1*L1 + l_GIoU*GIoU``.

    ``probs`` is (L, classes), ``pred_boxes`` (L, 4), ``gt_boxes`` (G, 4).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros((0, len(pred_boxes)))
    p = np.asarray(probs, dtype=np.float64)[:, np.asarray(gt_classes, dtype=int)].T
    cls_cost = focal_loss_array(p, np.ones_like(p, dtype=int), cfg.focal_alpha, cfg.focal_beta)
    w, h = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    pb = np.asarray(pred_boxes, dtype=np.float64) / scale
    l1 = np.abs(gt_boxes[:, None, :] / scale - pb[None, :, :]).sum(-1)
    giou = pairwise_giou_loss(gt_boxes, pred_boxes)
    return cfg.lambda_cls * cls_cost + cfg.lambda_l1 * l1 + cfg.lambda_giou * giou


def assign_from_cost(cost: np.ndarray, gt_areas: np.ndarray) -> Tuple[List[int], List[int]]:
    """Greedy injective selection: smallest-area ground truth first, each takes its
    cheapest unclaimed location; ties resolve to the lowest flat index."""
    g, n_loc = cost.shape
    if g > n_loc:
        raise CapacityError(f"{g} ground truths but only {n_loc} grid locations")
    order = sorted(range(g), key=lambda i: (gt_areas[i], i))
    taken = np.zeros(n_loc, dtype=bool)
    gts, locs = [], []
    for gi in order:
        row = np.where(taken, np.inf, cost[gi])
        loc = int(np.argmin(row))
        taken[loc] = True
        gts.append(gi)
        locs.append(loc)
    return gts, locs


def assign_one_to_one(grid: PredictionGrid, gt_boxes: np.ndarray, gt_classes: Sequence[int],
                      image_size: Tuple[float, float], cfg: DetectorConfig, image: int = 0) -> Assignment:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return Assignment()
    n_loc = grid.num_locations()
    if len(gt_boxes) > n_loc:
        raise CapacityError(f"{len(gt_boxes)} ground truths but only {n_loc} grid locations")
    logits = grid.flat_logits().data[image]
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits.astype(np.float64)))
    boxes = grid.flat_boxes().data[image]
    cost = matching_cost(probs, boxes, gt_boxes, np.asarray(gt_classes), image_size, cfg)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    gts, locs = assign_from_cost(cost, areas)
    keys = grid.location_keys()
    return Assignment(gts, locs, [tuple(int(v) for v in keys[l]) for l in locs])


# ----------------------------------------------------------------------
# composite loss

@dataclass
class LossBreakdown:
    total: float
    cls: float
    l1: float
    giou: float
    lambda_cls: float
    lambda_l1: float
    lambda_giou: float
    focal_alpha: float
    focal_beta: float
    total_tensor: Optional[Tensor] = None
    assignments: List[Assignment] = field(default_factory=list)

    def recombined(self) -> float:
        return self.lambda_cls * self.cls + self.lambda_l1 * self.l1 + self.lambda_giou * self.giou


def total_loss(grid: PredictionGrid, targets: Sequence[Tuple[np.ndarray, Sequence[int]]],
               image_size: Tuple[float, float], cfg: DetectorConfig,
               assignments: Optional[List[Assignment]] = None) -> LossBreakdown:
    """Weighted focal + L1 + GIoU loss for a batch.

    ``targets[i]`` is ``(boxes (G,4), classes (G,))`` for image ``i``. The
    assignment is computed from the current predictions unless given, and is
    held constant for differentiation.
    """
    n = grid.batch
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} target sets for a batch of {n}")
    logits = grid.flat_logits()
    boxes = grid.flat_boxes()
    if assignments is None:
        with T.no_grad():
            assignments = [assign_one_to_one(grid, tb, tc, image_size, cfg, image=i)
                           for i, (tb, tc) in enumerate(targets)]

    cls_targets = np.zeros(logits.shape, dtype=logits.dtype)
    img_idx, loc_idx, gt_rows = [], [], []
    for i, (a, (tb, tc)) in enumerate(zip(assignments, targets)):
        tb = np.asarray(tb, dtype=np.float64).reshape(-1, 4)
        for gi, loc in zip(a.gt_indices, a.locations):
            cls_targets[i, loc, int(tc[gi])] = 1.0
            img_idx.append(i)
            loc_idx.append(loc)
            gt_rows.append(tb[gi])
    num_gt = len(gt_rows)

    cls = sigmoid_focal_loss(logits, cls_targets, cfg.focal_alpha, cfg.focal_beta) * (1.0 / max(1, num_gt))
    if num_gt:
        pred = boxes[(np.array(img_idx), np.array(loc_idx))]
        gt = np.stack(gt_rows).astype(boxes.dtype)
        w, h = image_size
        scale = np.array([w, h, w, h], dtype=boxes.dtype)
        l1 = (pred / scale - gt / scale).abs().sum(axis=1).mean()
        giou = giou_loss_tensor(pred, gt).mean()
        total = cls * cfg.lambda_cls + l1 * cfg.lambda_l1 + giou * cfg.lambda_giou
        l1_v, giou_v = float(l1.data), float(giou.data)
    else:
        total = cls * cfg.lambda_cls
        l1_v = giou_v = 0.0
    cls_v = float(cls.data)
    return LossBreakdown(
        total=cfg.lambda_cls * cls_v + cfg.lambda_l1 * l1_v + cfg.lambda_giou * giou_v,
        cls=cls_v, l1=l1_v, giou=giou_v,
        lambda_cls=cfg.lambda_cls, lambda_l1=cfg.lambda_l1, lambda_giou=cfg.lambda_giou,
        focal_alpha=cfg.focal_alpha, focal_beta=cfg.focal_beta,
        total_tensor=total, assignments=assignments)


# ----------------------------------------------------------------------
# decoding

def decode_nms_free(grid: PredictionGrid, score_threshold: float = 0.4,
                    max_detections: int = 50) -> List[List[Detection]]:
    """Per image: best class per location, keep scores >= threshold, sort by
    descending score (flat index breaks ties), truncate. No overlap suppression."""
    logits = grid.flat_logits().data.astype(np.float64)
    boxes = grid.flat_boxes().data.astype(np.float64)
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    out = []
    for i in range(grid.batch):
        cls = probs[i].argmax(axis=1)
        score = probs[i][np.arange(len(cls)), cls]
        keep = np.nonzero(score >= score_threshold)[0]
        order = keep[np.lexsort((keep, -score[keep]))][:max_detections]
        out.append([Detection(BBox(*boxes[i, j]), float(score[j]), int(cls[j])) for j in order])
    return out


def check_score_threshold(thr: float) -> float:
    if not 0.0 <= thr <= 1.0:
        raise ConfigError(f"score threshold must lie in [0, 1], got {thr}")
    return thr
