"""Run a detector over a test split and score it at image level."""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .boxes import Detection
from .metrics import MetricReport, classify_image, compute_metrics
from .model import Detector
from .nms import nms
from .synth import Dataset


@dataclass
class EvalResult:
    report: MetricReport
    detections: Dict[str, List[Detection]]
    predicted: Dict[str, bool]
    truth: Dict[str, bool]
    nms_unchanged: int = 0          # images where NMS would remove nothing
    images: int = 0
    suppressed: Dict[str, int] = field(default_factory=dict)

    @property
    def nms_noop_fraction(self) -> float:
        return self.nms_unchanged / self.images if self.images else 1.0


_WORKER = {}


def _predict_chunk(bounds):
    model, dataset, thr = _WORKER["model"], _WORKER["dataset"], _WORKER["thr"]
    samples = [dataset.load(i) for i in range(*bounds)]
    return samples, model.predict([s.image for s in samples], score_threshold=thr)


def _predictions(model, dataset, count, batch_size, thr, workers):
    chunks = [(i, min(count, i + batch_size)) for i in range(0, count, batch_size)]
    _WORKER.update(model=model, dataset=dataset, thr=thr)
    try:
        if workers <= 1 or len(chunks) < 2:
            yield from map(_predict_chunk, chunks)
            return
        # forked workers inherit the model; results come back in chunk order
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            yield from pool.imap(_predict_chunk, chunks)
    finally:
        _WORKER.clear()


def evaluate(model: Detector, dataset: Dataset, batch_size: int = 16, with_nms: bool = False,
             score_threshold: Optional[float] = None, image_threshold: Optional[float] = None,
             limit: Optional[int] = None, workers: int = 1) -> EvalResult:
    """Decode without suppression; optionally apply baseline NMS before the image decision.

    The NMS no-op count is recorded either way so the redundancy of
    suppression on one-to-one output can be measured. ``workers > 1`` spreads
    batches over forked processes (accuracy runs only; results are identical).
    """
    det_cfg = model.cfg.detector
    thr = det_cfg.score_threshold if score_threshold is None else score_threshold
    if image_threshold is None:
        image_threshold = det_cfg.image_threshold if det_cfg.image_threshold is not None else thr
    count = len(dataset) if limit is None else min(limit, len(dataset))
    detections: Dict[str, List[Detection]] = {}
    predicted: Dict[str, bool] = {}
    truth: Dict[str, bool] = {}
    suppressed: Dict[str, int] = {}
    unchanged = 0
    for samples, outs in _predictions(model, dataset, count, batch_size, thr, workers):
        for s, dets in zip(samples, outs):
            after = nms(dets, det_cfg.nms_iou)
            suppressed[s.image_id] = len(dets) - len(after)
            unchanged += len(after) == len(dets)
            final = after if with_nms else dets
            detections[s.image_id] = final
            predicted[s.image_id] = classify_image(final, image_threshold, det_cfg.fault_classes)
            truth[s.image_id] = s.fault
    report = compute_metrics(predicted, truth, detections)
    return EvalResult(report, detections, predicted, truth, unchanged, count, suppressed)


def detection_records(detections: Dict[str, List[Detection]]) -> List[str]:
    """``image_id class score x1 y1 x2 y2`` lines in image then rank order."""
    lines = []
    for image_id in sorted(detections):
        for d in detections[image_id]:
            b = d.box
            lines.append(f"{image_id} {d.class_id} {d.score:.6f} {b.x1:.2f} {b.y1:.2f} {b.x2:.2f} {b.y2:.2f}")
    return lines
