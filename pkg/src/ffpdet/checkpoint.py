"""Weight checkpoint file.

Layout (all header lines are ASCII, newline terminated)::

    FFPDET1
    precision f32|f64
    config <nbytes>
    <config text, verbatim>
    state <nbytes>
    <JSON training-state blob, may be empty>
    manifest <count>
    <name> <d0>x<d1>x...        one line per array, in data order
    data
    <raw little-endian values, arrays concatenated in manifest order>
"""

from __future__ import annotations

import io
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"FFPDET1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    precision: str
    config_text: str
    arrays: "OrderedDict[str, np.ndarray]"
    state: dict = field(default_factory=dict)


def precision_tag(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], config_text: str = "",
                    precision: str = "f32", state: Optional[dict] = None) -> int:
    """Write a checkpoint atomically and return its size in bytes."""
    if precision not in _DTYPES:
        raise CheckpointError(f"unknown precision tag {precision!r}")
    dt = _DTYPES[precision]
    cfg = config_text.encode("utf-8")
    st = json.dumps(state, sort_keys=True).encode("utf-8") if state else b""
    buf = io.BytesIO()
    buf.write(MAGIC + b"\n")
    buf.write(f"precision {precision}\n".encode())
    buf.write(f"config {len(cfg)}\n".encode() + cfg + b"\n")
    buf.write(f"state {len(st)}\n".encode() + st + b"\n")
    buf.write(f"manifest {len(arrays)}\n".encode())
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"array name contains whitespace: {name!r}")
        shape = "x".join(str(d) for d in np.shape(arr)) or "scalar"
        buf.write(f"{name} {shape}\n".encode())
    buf.write(b"data\n")
    for arr in arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return len(payload)


def _line(fh, path) -> str:
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointError(f"{path}: truncated header")
    return raw[:-1].decode("ascii", errors="replace")


def _sized_blob(fh, path, key: str) -> bytes:
    head = _line(fh, path).split()
    if len(head) != 2 or head[0] != key:
        raise CheckpointError(f"{path}: expected '{key} <nbytes>' header, got {' '.join(head)!r}")
    n = int(head[1])
    blob = fh.read(n)
    if len(blob) != n or fh.read(1) != b"\n":
        raise CheckpointError(f"{path}: truncated {key} block")
    return blob


def load_checkpoint(path: str) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.readline() != MAGIC + b"\n":
            raise CheckpointError(f"{path}: not an FFPDET1 checkpoint")
        prec = _line(fh, path).split()
        if len(prec) != 2 or prec[0] != "precision" or prec[1] not in _DTYPES:
            raise CheckpointError(f"{path}: bad precision line")
        dt = _DTYPES[prec[1]]
        config_text = _sized_blob(fh, path, "config").decode("utf-8")
        st = _sized_blob(fh, path, "state")
        state = json.loads(st) if st else {}
        head = _line(fh, path).split()
        if len(head) != 2 or head[0] != "manifest":
            raise CheckpointError(f"{path}: bad manifest header")
        manifest = []
        for _ in range(int(head[1])):
            name, shape = _line(fh, path).split()
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            manifest.append((name, dims))
        if _line(fh, path) != "data":
            raise CheckpointError(f"{path}: missing data marker")
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, dims in manifest:
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(count * dt.itemsize)
            if len(raw) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after data")
    return Checkpoint(prec[1], config_text, arrays, state)


def manifest_diff(expected: Dict[str, np.ndarray], found: Dict[str, np.ndarray]) -> list:
    """Human-readable differences between two name->array maps (names and shapes)."""
    lines = []
    for name, arr in expected.items():
        if name not in found:
            lines.append(f"missing {name} {tuple(np.shape(arr))}")
        elif tuple(np.shape(found[name])) != tuple(np.shape(arr)):
            lines.append(f"shape {name}: expected {tuple(np.shape(arr))}, found {tuple(np.shape(found[name]))}")
    for name in found:
        if name not in expected:
            lines.append(f"unexpected {name} {tuple(np.shape(found[name]))}")
    return lines


def check_manifest(expected: Dict[str, np.ndarray], found: Dict[str, np.ndarray], path: str = "") -> None:
    diff = manifest_diff(expected, found)
    if diff:
        raise CheckpointError(f"checkpoint {path} does not match model:\n  " + "\n  ".join(diff))
