"""Training orchestration: batching, the AdamW step loop, checkpoints and resume.

Batch composition and augmentation are pure functions of (seed, iteration),
so a resumed run replays exactly the batches an uninterrupted run would see.
"""

from __future__ import annotations

import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import check_manifest, load_checkpoint, save_checkpoint
from .config import GlobalConfig, parse_config, render_config
from .errors import CheckpointError, TrainingError
from .head import LossBreakdown, total_loss
from .model import Detector, build_detector, preprocess
from .optim import OptimizerState, adamw_step
from .synth import AugmentPolicy, Sample, augment, derive_seed, load_dataset
from .tensor import Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}
CURVE_HEADER = "iteration total cls l1 giou lr"
OPT_PREFIX = ("opt.exp_avg.", "opt.exp_avg_sq.")


@dataclass
class TrainState:
    iteration: int = 0
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    running: Dict[str, float] = field(default_factory=dict)   # EMA of loss components
    seed: int = 0

    def rng_state(self) -> Dict[str, int]:
        """Everything stochastic is derived from (seed, iteration)."""
        return {"seed": self.seed, "iteration": self.iteration}


@dataclass
class TrainResult:
    model: Detector
    state: TrainState
    checkpoint: str
    curve: str
    history: List[Tuple[int, float, float, float, float, float]]
    seconds: float


# ----------------------------------------------------------------------
# checkpoint helpers

def model_arrays(model: Detector) -> "OrderedDict[str, np.ndarray]":
    return model.state_arrays()


def save_training_checkpoint(path: str, model: Detector, cfg: GlobalConfig,
                             state: Optional[TrainState] = None) -> int:
    """Weights and buffers; with ``state``, also optimizer moments and loop state."""
    arrays = model_arrays(model)
    meta = None
    if state is not None:
        opt = state.optimizer
        for name, _ in model.named_parameters():
            if name in opt.exp_avg:
                arrays[OPT_PREFIX[0] + name] = opt.exp_avg[name]
                arrays[OPT_PREFIX[1] + name] = opt.exp_avg_sq[name]
        meta = {"iteration": state.iteration, "step": opt.step, "lr": opt.lr,
                "weight_decay": opt.weight_decay, "betas": list(opt.betas), "eps": opt.eps,
                "running": state.running, "rng": state.rng_state()}
    precision = cfg.train.precision
    return save_checkpoint(path, arrays, render_config(cfg), precision, meta)


def load_model(path: str, cfg: Optional[GlobalConfig] = None) -> Tuple[Detector, GlobalConfig, dict]:
    """Rebuild a detector from a checkpoint (its embedded config unless ``cfg`` is given)."""
    ck = load_checkpoint(path)
    cfg = cfg or parse_config(ck.config_text)
    model = build_detector(cfg, cfg.train.seed)
    model.astype(DTYPES[ck.precision])
    weights = OrderedDict((k, v) for k, v in ck.arrays.items() if not k.startswith(OPT_PREFIX))
    check_manifest(model_arrays(model), weights, path)
    model.load_state_arrays(weights)
    return model, cfg, {"state": ck.state, "arrays": ck.arrays, "precision": ck.precision}


def restore_state(model: Detector, info: dict) -> TrainState:
    st = info["state"]
    if not st:
        raise CheckpointError("checkpoint has no training state (weights-only file)")
    dtype = DTYPES[info["precision"]]
    opt = OptimizerState(lr=st["lr"], weight_decay=st["weight_decay"], betas=tuple(st["betas"]),
                         eps=st["eps"], step=st["step"])
    for name, _ in model.named_parameters():
        key = OPT_PREFIX[0] + name
        if key in info["arrays"]:
            opt.exp_avg[name] = info["arrays"][key].astype(dtype)
            opt.exp_avg_sq[name] = info["arrays"][OPT_PREFIX[1] + name].astype(dtype)
    return TrainState(iteration=st["iteration"], optimizer=opt, running=dict(st["running"]),
                      seed=st["rng"]["seed"])


# ----------------------------------------------------------------------
# batches

class BatchSource:
    """Deterministic batch stream over an in-memory uint8 image cache."""

    def __init__(self, samples: Sequence[Sample], images: np.ndarray, batch_size: int, seed: int,
                 augment_on: bool = True, policy: Optional[AugmentPolicy] = None):
        self.samples = samples
        self.images = images
        self.batch_size = batch_size
        self.seed = seed
        self.augment_on = augment_on
        self.policy = policy or AugmentPolicy()
        self._perm_cache: Dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng(derive_seed(self.seed, "epoch", epoch))
                                .permutation(len(self.samples))}
        return self._perm_cache[epoch]

    def indices(self, iteration: int) -> List[int]:
        n = len(self.samples)
        out = []
        for k in range(iteration * self.batch_size, (iteration + 1) * self.batch_size):
            out.append(int(self._perm(k // n)[k % n]))
        return out

    def batch(self, iteration: int) -> List[Sample]:
        out = []
        for j, i in enumerate(self.indices(iteration)):
            s = self.samples[i]
            s = Sample(self.images[i].astype(np.float32) / 255.0, s.boxes, s.classes, s.fault, s.image_id)
            if self.augment_on:
                s = augment(s, self.policy, derive_seed(self.seed, "augment", iteration, j))
            out.append(s)
        return out


def load_training_set(root: str) -> Tuple[List[Sample], np.ndarray]:
    ds = load_dataset(root, "train")
    samples, images = [], []
    for i in range(len(ds)):
        s = ds.load(i)
        images.append(np.round(s.image * 255).astype(np.uint8))
        samples.append(Sample(np.empty((3, 0, 0), np.float32), s.boxes, s.classes, s.fault, s.image_id))
    return samples, np.stack(images)


# ----------------------------------------------------------------------
# one step

def train_step(model: Detector, batch: Sequence[Sample], cfg: GlobalConfig, opt: OptimizerState,
               lr: float) -> LossBreakdown:
    h, w = batch[0].image.shape[1:]
    x = Tensor(preprocess([s.image for s in batch], dtype=model.dtype))
    grid = model(x)
    loss = total_loss(grid, [(s.boxes, s.classes) for s in batch], (w, h), cfg.detector)
    if not all(math.isfinite(v) for v in (loss.total, loss.cls, loss.l1, loss.giou)):
        return loss
    model.zero_grad()
    if loss.total_tensor.requires_grad:
        loss.total_tensor.backward()
    opt.lr = lr
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for n, p in trainable:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adamw_step(trainable, opt)
    return loss


def _check_finite(loss: LossBreakdown, iteration: int) -> None:
    vals = {"total": loss.total, "cls": loss.cls, "l1": loss.l1, "giou": loss.giou}
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        detail = ", ".join(f"{k}={v!r}" for k, v in vals.items())
        raise TrainingError(f"non-finite loss at iteration {iteration} ({', '.join(bad)}): {detail}")


def _fmt_curve(it: int, loss: LossBreakdown, lr: float) -> str:
    return f"{it} {loss.total:.9g} {loss.cls:.9g} {loss.l1:.9g} {loss.giou:.9g} {lr:.9g}"


# ----------------------------------------------------------------------
# the loop

def train(cfg: GlobalConfig, workdir: str, dataset_root: Optional[str] = None,
          resume_from: Optional[str] = None, stop_at: Optional[int] = None,
          log: Optional[Callable[[str], None]] = None,
          monitor: Optional[Callable[[int, Detector, float], bool]] = None,
          monitor_every: int = 0) -> TrainResult:
    """Run (or continue) training and write ``model.ckpt`` plus ``loss_curve.txt``.

    ``stop_at`` ends the loop early at that iteration (used to test resume);
    the learning-rate schedule still follows ``cfg.train.iterations``.
    ``monitor(iteration, model, train_seconds)`` runs every ``monitor_every``
    iterations outside the timed region; returning True stops training.
    """
    cfg.validate()
    tc = cfg.train
    root = dataset_root or os.path.join(workdir, tc.dataset)
    os.makedirs(workdir, exist_ok=True)
    ckpt_dir = os.path.join(workdir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    curve_path = os.path.join(workdir, "loss_curve.txt")

    if resume_from:
        model, _, info = load_model(resume_from, cfg)
        state = restore_state(model, info)
        lines = _read_curve(curve_path, state.iteration)
    else:
        model = build_detector(cfg, tc.seed)
        model.astype(DTYPES[tc.precision])
        state = TrainState(optimizer=OptimizerState(lr=tc.lr, weight_decay=tc.weight_decay), seed=tc.seed)
        lines = []
    model.train()

    samples, images = load_training_set(root)
    source = BatchSource(samples, images, tc.batch_size, tc.seed, tc.augment)
    end = tc.iterations if stop_at is None else min(stop_at, tc.iterations)
    history = [tuple(float(v) for v in ln.split()) for ln in lines]
    t0 = time.perf_counter()
    paused = 0.0
    with open(curve_path, "w") as curve:
        curve.write(CURVE_HEADER + "\n")
        for ln in lines:
            curve.write(ln + "\n")
        while state.iteration < end:
            it = state.iteration
            lr = tc.lr_at(it)
            loss = train_step(model, source.batch(it), cfg, state.optimizer, lr)
            _check_finite(loss, it)
            state.iteration += 1
            for k in ("total", "cls", "l1", "giou"):
                v = getattr(loss, k)
                state.running[k] = v if k not in state.running else 0.98 * state.running[k] + 0.02 * v
            curve.write(_fmt_curve(it, loss, lr) + "\n")
            history.append((it, loss.total, loss.cls, loss.l1, loss.giou, lr))
            if log and (it % tc.log_every == 0 or state.iteration == end):
                log(f"iter {it} total {loss.total:.4f} cls {loss.cls:.4f} l1 {loss.l1:.4f} "
                    f"giou {loss.giou:.4f} lr {lr:.2e} ({time.perf_counter() - t0 - paused:.0f}s)")
            if tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
                save_training_checkpoint(os.path.join(ckpt_dir, f"iter_{state.iteration:06d}.ckpt"),
                                         model, cfg, state)
            if monitor and monitor_every and state.iteration % monitor_every == 0:
                curve.flush()
                t1 = time.perf_counter()
                stop = monitor(state.iteration, model, t1 - t0 - paused)
                model.train()
                paused += time.perf_counter() - t1
                if stop:
                    break
    save_training_checkpoint(os.path.join(ckpt_dir, f"iter_{state.iteration:06d}.ckpt"), model, cfg, state)
    final = os.path.join(workdir, "model.ckpt")
    save_training_checkpoint(final, model, cfg)
    return TrainResult(model, state, final, curve_path, history, time.perf_counter() - t0 - paused)


def _read_curve(path: str, upto: int) -> List[str]:
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        rows = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("iteration")]
    return [r for r in rows if int(r.split()[0]) < upto]


def resume(checkpoint: str, cfg: Optional[GlobalConfig] = None) -> Tuple[Detector, TrainState]:
    """Load model and loop state from a full training checkpoint."""
    model, _, info = load_model(checkpoint, cfg)
    return model, restore_state(model, info)


# ----------------------------------------------------------------------
# capacity check

@dataclass
class SmokeReport:
    passed: bool
    steps: int
    initial_loss: float
    final_loss: float
    best_loss: float
    threshold: float


def overfit_smoke(cfg: GlobalConfig, batch: Sequence[Sample], steps: int = 500, threshold: float = 0.05,
                  lr: Optional[float] = None, freeze: bool = False, seed: int = 0) -> SmokeReport:
    """Train repeatedly on one fixed batch; pass if total loss drops below ``threshold``."""
    model = build_detector(cfg, seed)
    model.astype(DTYPES[cfg.train.precision])
    model.train()
    if freeze:
        for _, p in model.named_parameters():
            p.requires_grad = False
    opt = OptimizerState(lr=cfg.train.lr if lr is None else lr, weight_decay=0.0)
    first = best = last = float("inf")
    for step in range(steps):
        loss = train_step(model, batch, cfg, opt, opt.lr)
        _check_finite(loss, step)
        last = loss.total
        if step == 0:
            first = last
        best = min(best, last)
        if last < threshold:
            return SmokeReport(True, step + 1, first, last, best, threshold)
    return SmokeReport(False, steps, first, last, best, threshold)
