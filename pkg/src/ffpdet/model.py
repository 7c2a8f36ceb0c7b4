"""Full detector: backbone, fault feature pyramid and one-to-one head."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import Backbone, PyramidFeatures
from .boxes import Detection
from .config import GlobalConfig
from .errors import ShapeError
from .ffp import FFP
from .head import DetectionHead, PredictionGrid, decode_nms_free
from .nn import Module, count_parameters
from .tensor import Tensor

PAD_MULTIPLE = 32
# mean/std of the synthetic grey scenes, used to centre inputs
PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


def padded_size(h: int, w: int, multiple: int = PAD_MULTIPLE) -> Tuple[int, int]:
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def preprocess(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack (3,H,W) images in [0,1], normalise, and zero-pad bottom/right to a multiple of 32.

    Annotations stay in original coordinates: padding only adds pixels after
    the last row and column.
    """
    if not len(images):
        raise ShapeError("preprocess needs at least one image")
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"images in a batch must share one shape, got {sorted(shapes)}")
    c, h, w = shapes.pop()
    if c != 3:
        raise ShapeError(f"images must have 3 channels, got {c}")
    ph, pw = padded_size(h, w)
    out = np.zeros((len(images), 3, ph, pw), dtype=dtype)
    for i, im in enumerate(images):
        out[i, :, :h, :w] = (np.asarray(im, dtype=dtype) - PIXEL_MEAN) / PIXEL_STD
    return out


class Detector(Module):
    def __init__(self, cfg: GlobalConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng)
        self.ffp = FFP(self.backbone.out_channels, cfg.ffp, rng)
        self.head = DetectionHead(cfg.ffp.channels, cfg.detector, rng)

    def features(self, images: Tensor) -> PyramidFeatures:
        return self.ffp(self.backbone(images))

    def forward(self, images: Tensor) -> PredictionGrid:
        return self.head(self.features(images))

    def predict(self, images: Sequence[np.ndarray], score_threshold: Optional[float] = None,
                max_detections: Optional[int] = None) -> List[List[Detection]]:
        """Inference on raw (3,H,W) images; boxes are in original-image pixels."""
        det = self.cfg.detector
        thr = det.score_threshold if score_threshold is None else score_threshold
        cap = det.max_detections if max_detections is None else max_detections
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                x = Tensor(preprocess(images, dtype=self.dtype))
                grid = self.forward(x)
        finally:
            self.train(was_training)
        return decode_nms_free(grid, thr, cap)

    @property
    def dtype(self):
        return self.backbone.stem.weight.dtype


def build_detector(cfg: GlobalConfig, seed: int = 0) -> Detector:
    model = Detector(cfg, np.random.default_rng(seed))
    model.parameter_count = count_parameters(model)
    return model
