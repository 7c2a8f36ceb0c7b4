"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor

STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, indices: Optional[Sequence[tuple]] = None,
                   step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t`` at ``indices`` (all if None)."""
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    out = np.zeros(len(indices), dtype=np.float64)
    for k, idx in enumerate(indices):
        orig = t.data[idx].copy()
        t.data[idx] = orig + step
        fp = float(fn().data)
        t.data[idx] = orig - step
        fm = float(fn().data)
        t.data[idx] = orig
        out[k] = (fp - fm) / (2 * step)
    return out


def close(analytic: np.ndarray, numeric: np.ndarray, rel: float = REL_TOL, abs_: float = ABS_TOL) -> np.ndarray:
    """Elementwise pass mask: relative error within ``rel`` or absolute error within ``abs_``."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return (diff <= abs_) | (diff <= rel * scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], max_elements: int = 40,
                    seed: int = 0, step: float = STEP) -> List[dict]:
    """Compare backward() against finite differences for each named tensor.

    At most ``max_elements`` randomly chosen entries are probed per tensor.
    Returns one record per tensor with the worst relative error and a pass flag.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors.items()}
    report = []
    for name, t in tensors.items():
        all_idx = list(np.ndindex(*t.shape))
        if len(all_idx) > max_elements:
            pick = rng.choice(len(all_idx), size=max_elements, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = numerical_grad(fn, t, all_idx, step)
        ana = np.array([analytic[name][i] for i in all_idx], dtype=np.float64)
        ok = close(ana, num)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-30)
        report.append({
            "name": name,
            "checked": len(all_idx),
            "max_abs_err": float(np.max(np.abs(ana - num))) if len(ana) else 0.0,
            "max_rel_err": float(np.max(np.abs(ana - num) / denom)) if len(ana) else 0.0,
            "passed": bool(ok.all()),
        })
    return report
