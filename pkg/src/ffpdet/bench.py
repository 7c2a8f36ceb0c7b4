"""Latency, memory and model-size measurements, with optional NMS stage timing."""

from __future__ import annotations

import os
import resource
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import Detection
from .errors import DataError
from .head import decode_nms_free
from .model import Detector, preprocess
from .nms import nms_arrays
from .synth import Dataset, Sample, derive_seed
from .tensor import Tensor


@dataclass
class BenchReport:
    images: int
    repetitions: int
    warmup: int
    with_nms: bool
    mean_time: float                 # seconds per image, NMS included when enabled
    median_time: float
    mean_nms_free_time: float
    mean_nms_time: float             # 0 when NMS is disabled
    train_step_time: float           # seconds per image for one forward/backward/update
    peak_rss_bytes: int
    model_size_bytes: int
    detections_histogram: Dict[int, int] = field(default_factory=dict)
    stress_boxes: int = 0
    nms_scaling: Dict[int, float] = field(default_factory=dict)   # candidates -> seconds
    detection_counts: List[int] = field(default_factory=list)

    def rows(self) -> List[tuple]:
        rows = [
            ("images", self.images), ("repetitions", self.repetitions), ("warmup", self.warmup),
            ("with_nms", int(self.with_nms)),
            ("mean_time_s", f"{self.mean_time:.6f}"), ("median_time_s", f"{self.median_time:.6f}"),
            ("nms_free_time_s", f"{self.mean_nms_free_time:.6f}"), ("nms_time_s", f"{self.mean_nms_time:.6f}"),
            ("train_step_time_s", f"{self.train_step_time:.6f}"),
            ("peak_rss_bytes", self.peak_rss_bytes), ("model_size_bytes", self.model_size_bytes),
            ("stress_boxes", self.stress_boxes),
        ]
        rows += [(f"nms_time_at_{n}_s", f"{t:.6f}") for n, t in sorted(self.nms_scaling.items())]
        rows += [(f"images_with_{k}_detections", v) for k, v in sorted(self.detections_histogram.items())]
        return rows


def peak_rss_bytes() -> int:
    """Best-effort peak resident set size of this process (Linux reports KiB)."""
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def stress_candidates(count: int, width: int, height: int, seed: int = 0, num_classes: int = 3):
    """Deterministic random candidate boxes (boxes, scores, classes) for NMS stress runs."""
    rng = np.random.default_rng(derive_seed(seed, "stress", count))
    size = rng.uniform(4.0, 0.15 * min(width, height), size=(count, 2))
    x1 = rng.uniform(0, width - size[:, 0])
    y1 = rng.uniform(0, height - size[:, 1])
    boxes = np.stack([x1, y1, x1 + size[:, 0], y1 + size[:, 1]], axis=1)
    return boxes, rng.uniform(0.0, 1.0, size=count), rng.integers(0, num_classes, size=count)


def time_nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float,
             repeats: int = 1) -> float:
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        nms_arrays(boxes, scores, classes, iou_threshold)
        best = min(best, time.perf_counter() - t0)
    return best


def _det_arrays(dets: Sequence[Detection]):
    if not dets:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int)
    return (np.array([d.box.as_tuple() for d in dets]), np.array([d.score for d in dets]),
            np.array([d.class_id for d in dets]))


def measure_train_step(model: Detector, samples: Sequence[Sample]) -> float:
    """Seconds per image for one forward/backward pass (weights are left untouched)."""
    from .head import total_loss
    h, w = samples[0].image.shape[1:]
    model.train()
    saved = [(p, p.data.copy()) for p in model.parameters()]
    stats = [(s, s.mean.copy(), s.var.copy(), s.count) for _, s in model._stats()]
    t0 = time.perf_counter()
    grid = model(Tensor(preprocess([s.image for s in samples], dtype=model.dtype)))
    loss = total_loss(grid, [(s.boxes, s.classes) for s in samples], (w, h), model.cfg.detector)
    model.zero_grad()
    loss.total_tensor.backward()
    elapsed = time.perf_counter() - t0
    model.zero_grad()
    for p, data in saved:
        p.data = data
    for s, mean, var, count in stats:
        s.mean, s.var, s.count = mean, var, count
    model.eval()
    return elapsed / len(samples)


def bench_inference(model: Detector, dataset: Dataset, with_nms: bool = False, repetitions: int = 1,
                    warmup: int = 1, stress_boxes: int = 0, limit: Optional[int] = None,
                    checkpoint_path: Optional[str] = None, train_batch: int = 2,
                    seed: int = 0) -> BenchReport:
    """Time per-image inference over ``dataset``.

    Warmup passes are excluded. With ``with_nms`` the suppression stage is timed
    separately and added to the per-image time. ``stress_boxes`` appends that many
    synthetic candidates to each image's decoded set before suppression.
    """
    count = len(dataset) if limit is None else min(limit, len(dataset))
    if count < 1:
        raise DataError("cannot benchmark an empty dataset")
    repetitions = max(1, repetitions)
    samples = [dataset.load(i) for i in range(count)]
    det_cfg = model.cfg.detector
    model.eval()

    def infer(sample: Sample):
        with T.no_grad():
            grid = model(Tensor(preprocess([sample.image], dtype=model.dtype)))
        return decode_nms_free(grid, det_cfg.score_threshold, det_cfg.max_detections)[0]

    for i in range(min(warmup, count)):
        infer(samples[i])

    free_times, nms_times, counts = [], [], []
    for _rep in range(repetitions):
        for idx, s in enumerate(samples):
            t0 = time.perf_counter()
            dets = infer(s)
            free_times.append(time.perf_counter() - t0)
            counts.append(len(dets))
            if with_nms:
                b, sc, cl = _det_arrays(dets)
                if stress_boxes:
                    sb, ss, scl = stress_candidates(stress_boxes, s.width, s.height, derive_seed(seed, idx))
                    b, sc, cl = np.concatenate([b, sb]), np.concatenate([sc, ss]), np.concatenate([cl, scl])
                nms_times.append(time_nms(b, sc, cl, det_cfg.nms_iou))
    nms_mean = statistics.fmean(nms_times) if nms_times else 0.0
    totals = [f + (nms_times[i] if with_nms else 0.0) for i, f in enumerate(free_times)]

    scaling = {}
    if stress_boxes:
        w, h = samples[0].width, samples[0].height
        for n in sorted({100, stress_boxes}):
            scaling[n] = time_nms(*stress_candidates(n, w, h, seed), det_cfg.nms_iou, repeats=3)

    train_time = measure_train_step(model, samples[:max(1, min(train_batch, count))])
    size = os.path.getsize(checkpoint_path) if checkpoint_path else 0
    per_image = counts[:count]
    return BenchReport(
        images=count, repetitions=repetitions, warmup=min(warmup, count), with_nms=with_nms,
        mean_time=statistics.fmean(totals), median_time=statistics.median(totals),
        mean_nms_free_time=statistics.fmean(free_times), mean_nms_time=nms_mean,
        train_step_time=train_time, peak_rss_bytes=peak_rss_bytes(), model_size_bytes=size,
        detections_histogram=dict(sorted(Counter(per_image).items())), stress_boxes=stress_boxes,
        nms_scaling=scaling, detection_counts=counts)
