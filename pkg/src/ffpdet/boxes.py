"""Axis-aligned boxes and overlap measures (plain numpy, no gradients)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ConfigError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ConfigError(f"detection score {self.score} outside [0, 1]")


def _arr(b) -> np.ndarray:
    if isinstance(b, BBox):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between box arrays ``a`` (M,4) and ``b`` (K,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter / union


def pairwise_giou_loss(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 - IoU + (A_c - U) / A_c`` for every pair; values in [0, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    clt = np.minimum(a[:, None, :2], b[None, :, :2])
    crb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull = (crb[..., 0] - clt[..., 0]) * (crb[..., 1] - clt[..., 1])
    return 1.0 - inter / union + (hull - union) / hull


def iou(a, b) -> float:
    return float(pairwise_iou(_arr(a), _arr(b))[0, 0])


def giou_loss(pred, gt) -> float:
    return float(pairwise_giou_loss(_arr(pred), _arr(gt))[0, 0])


def l1_loss(pred, gt, image_size) -> float:
    """Sum of absolute corner differences after dividing x by width and y by height."""
    w, h = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    return float(np.abs(_arr(pred) / scale - _arr(gt) / scale).sum())


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0] = width - boxes[:, 2]
    out[:, 2] = width - boxes[:, 0]
    return out
