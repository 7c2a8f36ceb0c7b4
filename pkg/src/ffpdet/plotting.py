"""Report figures written to files, and the average-feature-map image dump."""

from __future__ import annotations

import os
from typing import Dict, Mapping, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "ffpdet",
}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.endswith(".png") else None)
    plt.close(fig)
    return path


def average_feature_map(t: np.ndarray) -> np.ndarray:
    """Channel mean of a (1, C, H, W) map scaled to uint8; a flat map becomes all zeros."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 4 or a.shape[0] != 1:
        raise DataError(f"feature map dump needs a 1 x C x H x W array, got shape {a.shape}")
    m = a[0].mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str, gray: np.ndarray) -> None:
    h, w = gray.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, body = raw.split(maxsplit=4)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(int(h), int(w))


def dump_average_feature_map(t: np.ndarray, path: str) -> np.ndarray:
    gray = average_feature_map(t)
    write_pgm(path, gray)
    return gray


def plot_loss_curve(history: Sequence[Sequence[float]], path: str, decay_at: int = None) -> str:
    """``history`` rows are (iteration, total, cls, l1, giou, lr)."""
    h = np.asarray(history, dtype=np.float64).reshape(-1, 6)
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6.4, 5.0), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        for col, label in ((1, "total"), (2, "cls"), (3, "l1"), (4, "giou")):
            y = h[:, col]
            k = max(1, len(y) // 100)
            smooth = np.convolve(y, np.ones(k) / k, mode="valid") if len(y) >= k else y
            ax.plot(h[k - 1:, 0] if len(y) >= k else h[:, 0], smooth, label=label, lw=1.2)
        ax.set_yscale("log")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=4)
        ax_lr.plot(h[:, 0], h[:, 5], color="0.3", lw=1.0)
        if decay_at is not None:
            for a in (ax, ax_lr):
                a.axvline(decay_at, color="0.5", ls=":", lw=0.8)
        ax_lr.set_xlabel("iteration")
        ax_lr.set_ylabel("lr")
        fig.tight_layout()
        return _save(fig, path)


def plot_histogram(hist: Mapping[int, int], path: str, xlabel: str = "detections per image") -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        keys = sorted(hist)
        ax.bar(keys, [hist[k] for k in keys], color="0.35", width=0.8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("images")
        fig.tight_layout()
        return _save(fig, path)


def plot_nms_scaling(scaling: Mapping[int, float], path: str) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.4))
        n = np.array(sorted(scaling), dtype=float)
        t = np.array([scaling[k] for k in sorted(scaling)])
        ax.loglog(n, t, "o-", color="C3")
        if len(n) > 1:
            ax.loglog(n, t[0] * n / n[0], ls="--", color="0.6", label="linear")
            ax.legend(frameon=False)
        ax.set_xlabel("candidate boxes")
        ax.set_ylabel("NMS time (s)")
        fig.tight_layout()
        return _save(fig, path)


def plot_feature_panels(maps: Dict[str, np.ndarray], path: str, image: np.ndarray = None) -> str:
    """Side-by-side channel-mean maps (e.g. before/after attention)."""
    panels = ([("input", None)] if image is not None else []) + list(maps.items())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.8), squeeze=False)
        for ax, (name, m) in zip(axes[0], panels):
            if m is None:
                ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
            else:
                ax.imshow(average_feature_map(m), cmap="inferno", vmin=0, vmax=255)
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        fig.tight_layout()
        return _save(fig, path)


def plot_parameter_breakdown(rows: Sequence[tuple], path: str) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.35 * len(rows) + 1.0))
        names = [r[0] for r in rows]
        vals = [r[1] for r in rows]
        ax.barh(range(len(rows)), vals, color="0.4")
        ax.set_yticks(range(len(rows)), names)
        ax.invert_yaxis()
        ax.set_xscale("log")
        ax.set_xlabel("parameters")
        fig.tight_layout()
        return _save(fig, path)
