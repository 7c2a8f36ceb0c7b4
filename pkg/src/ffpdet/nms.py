"""Greedy IoU suppression, kept only as a baseline for overhead comparisons."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .boxes import Detection, iou
from .errors import ConfigError


def _check_threshold(iou_threshold: float) -> None:
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"nms IoU threshold must lie in (0, 1), got {iou_threshold}")


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, lower index first on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
               iou_threshold: float = 0.5) -> np.ndarray:
    """Vectorised per-class greedy suppression; returns kept indices in score order.

    Each surviving candidate is compared against the boxes kept so far, so the
    work grows with (candidates x kept).
    """
    _check_threshold(iou_threshold)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes)
    order = score_order(scores)
    kept: List[int] = []
    kept_boxes = np.empty((len(boxes), 4))
    kept_cls = np.empty(len(boxes), dtype=classes.dtype if len(classes) else int)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    n_kept = 0
    for idx in order:
        if n_kept:
            kb = kept_boxes[:n_kept]
            same = kept_cls[:n_kept] == classes[idx]
            if same.any():
                b = boxes[idx]
                iw = np.clip(np.minimum(kb[same, 2], b[2]) - np.maximum(kb[same, 0], b[0]), 0, None)
                ih = np.clip(np.minimum(kb[same, 3], b[3]) - np.maximum(kb[same, 1], b[1]), 0, None)
                inter = iw * ih
                kb_area = (kb[same, 2] - kb[same, 0]) * (kb[same, 3] - kb[same, 1])
                if np.any(inter / (kb_area + areas[idx] - inter) >= iou_threshold):
                    continue
        kept.append(int(idx))
        kept_boxes[n_kept] = boxes[idx]
        kept_cls[n_kept] = classes[idx]
        n_kept += 1
    return np.asarray(kept, dtype=int)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    if not dets:
        _check_threshold(iou_threshold)
        return []
    boxes = np.array([d.box.as_tuple() for d in dets])
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    return [dets[i] for i in nms_arrays(boxes, scores, classes, iou_threshold)]


def nms_reference(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Plain O(n^2) double loop used as an oracle for :func:`nms`."""
    _check_threshold(iou_threshold)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = [False] * len(dets)
    out = []
    for a_pos, a in enumerate(order):
        if suppressed[a]:
            continue
        out.append(dets[a])
        for b in order[a_pos + 1:]:
            if not suppressed[b] and dets[b].class_id == dets[a].class_id \
                    and iou(dets[a].box, dets[b].box) >= iou_threshold:
                suppressed[b] = True
    return out
