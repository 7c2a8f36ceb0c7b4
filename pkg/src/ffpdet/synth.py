"""Synthetic component scenes, the on-disk dataset format, and augmentation.

Layout written by :func:`generate_dataset`::

    root/spec.txt                     generating SceneSpec and split sizes
    root/{train,test}/annotations.txt one record per image
    root/{train,test}/images/NNNNNN.ppm

Annotation records read ``filename fault_flag count`` followed by ``count``
groups of ``class x1 y1 x2 y2`` in pixel coordinates.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import hflip_boxes
from .config import CLASS_NAMES, SceneSpec
from .errors import ConfigError, DataError

INDEX_HEADER = "# ffpdet annotations v1"
SPLITS = ("train", "test")
NORMAL, MISSING, BROKEN = 0, 1, 2
FAULT_CLASSES = (MISSING, BROKEN)


@dataclass
class Sample:
    image: np.ndarray                 # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray                 # (G, 4) float64, x1 y1 x2 y2
    classes: np.ndarray               # (G,) int
    fault: bool
    image_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise DataError(f"{self.image_id}: {len(self.boxes)} boxes but {len(self.classes)} classes")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def validate_sample(s: Sample, fault_classes: Sequence[int] = FAULT_CLASSES, where: str = "") -> None:
    where = where or s.image_id
    b = s.boxes
    if len(b):
        if np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3]):
            raise DataError(f"{where}: degenerate box")
        if np.any(b[:, :2] < 0) or np.any(b[:, 2] > s.width) or np.any(b[:, 3] > s.height):
            raise DataError(f"{where}: box outside the {s.width}x{s.height} image")
    if np.any((s.classes < 0) | (s.classes >= len(CLASS_NAMES))):
        raise DataError(f"{where}: class id outside [0, {len(CLASS_NAMES)})")
    flag = bool(np.isin(s.classes, list(fault_classes)).any())
    if flag != bool(s.fault):
        raise DataError(f"{where}: fault flag {int(s.fault)} disagrees with annotations")


# ----------------------------------------------------------------------
# seeds

def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of scheduling order)."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


# ----------------------------------------------------------------------
# rendering

@dataclass
class Component:
    class_id: int
    mask: np.ndarray           # boolean, full image size
    bounds: Tuple[int, int, int, int]   # x1, y1, x2, y2 (exclusive max) of mask pixels


def _bounds(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _background(rng: np.random.Generator, h: int, w: int, spec: SceneSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = rng.uniform(0.35, 0.5) + rng.uniform(-0.08, 0.08) * (xx / w) + rng.uniform(-0.08, 0.08) * (yy / h)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 4.0, size=2) * 2 * np.pi
        img += 0.02 * np.sin(fx * xx / w + fy * yy / h + rng.uniform(0, 2 * np.pi))
    # clutter: low-contrast bars and plates
    count = int(round(spec.clutter_density * 8 * (h * w) / (512 * 704) ** 0.5 / 30))
    for _ in range(count):
        x0, y0 = rng.integers(0, w), rng.integers(0, h)
        if rng.random() < 0.5:
            bw, bh = rng.integers(w // 6, w // 2), rng.integers(2, max(3, h // 40))
        else:
            bw, bh = rng.integers(2, max(3, w // 50)), rng.integers(h // 6, h // 2)
        img[y0:y0 + bh, x0:x0 + bw] += rng.uniform(-0.12, 0.12)
    return img


def _ellipse(xx, yy, cx, cy, rx, ry) -> np.ndarray:
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _draw_component(img: np.ndarray, rng: np.random.Generator, cls: int, shape: str,
                    cx: float, cy: float, cw: float, ch: float) -> np.ndarray:
    """Paint one component (or its empty seat) and return its pixel mask."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    rx, ry = cw / 2, ch / 2
    if shape == "rect":
        body = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
    else:
        body = _ellipse(xx, yy, cx, cy, rx, ry)
    if cls == MISSING:
        # empty seat: dark recess with a pale rim
        inner = _ellipse(xx, yy, cx, cy, rx * 0.72, ry * 0.72) if shape != "rect" else \
            (np.abs(xx - cx) <= rx * 0.72) & (np.abs(yy - cy) <= ry * 0.72)
        img[body] = rng.uniform(0.6, 0.7)
        img[inner] = rng.uniform(0.02, 0.08)
        return body
    mask = body.copy()
    if cls == BROKEN:
        # cut away a wedge on a random side through the centre
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(-0.15, 0.1) * min(rx, ry)
        cut = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang) > off
        mask &= ~cut
    img[mask] = rng.uniform(0.85, 0.95)
    # surface detail: slot / rivets / shank, dark
    if shape == "bolt":
        slot = ((np.abs(xx - cx) <= max(0.8, rx * 0.18)) & (np.abs(yy - cy) <= ry * 0.6)) | \
               ((np.abs(yy - cy) <= max(0.8, ry * 0.18)) & (np.abs(xx - cx) <= rx * 0.6))
    elif shape == "rect":
        slot = np.zeros_like(mask)
        for sx in (-0.55, 0.55):
            for sy in (-0.55, 0.55):
                slot |= _ellipse(xx, yy, cx + sx * rx, cy + sy * ry, max(0.8, rx * 0.15), max(0.8, ry * 0.15))
    else:
        long_x = rx >= ry
        slot = (np.abs(yy - cy) <= max(0.8, ry * 0.2)) & (np.abs(xx - cx) <= rx * 0.7) if long_x else \
            (np.abs(xx - cx) <= max(0.8, rx * 0.2)) & (np.abs(yy - cy) <= ry * 0.7)
    img[mask & slot] = rng.uniform(0.15, 0.25)
    if cls == BROKEN:
        # dark fracture edge along the cut
        edge = mask & ~np.roll(mask, 1, axis=0) | mask & ~np.roll(mask, -1, axis=0) | \
            mask & ~np.roll(mask, 1, axis=1) | mask & ~np.roll(mask, -1, axis=1)
        img[edge & ~body_edge(body)] = 0.3
    return mask


def body_edge(body: np.ndarray) -> np.ndarray:
    return body & ~(np.roll(body, 1, 0) & np.roll(body, -1, 0) & np.roll(body, 1, 1) & np.roll(body, -1, 1))


def _component_size(rng: np.random.Generator, spec: SceneSpec) -> Tuple[float, float]:
    s = spec.height * rng.uniform(*spec.size_range)
    a = rng.uniform(*spec.aspect_range)
    if spec.shape == "disc":
        # elongated: the long side carries the aspect, orientation random
        long_, short = s * a, s
        return (long_, short) if rng.random() < 0.5 else (short, long_)
    return s * np.sqrt(a), s / np.sqrt(a)


def render_scene(spec: SceneSpec, seed: int) -> Tuple[np.ndarray, List[Component]]:
    """Render one (3, H, W) uint8 scene; returns the image and its components."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    img = _background(rng, h, w, spec)
    n = int(rng.integers(spec.component_count[0], spec.component_count[1] + 1))
    faulty = rng.random() < spec.fault_probability
    classes = [NORMAL] * n
    if faulty:
        for i in range(n):
            if i == 0 or rng.random() < 0.3:
                classes[i] = int(rng.choice(FAULT_CLASSES))
        rng.shuffle(classes)
    placed: List[Tuple[float, float, float, float]] = []
    comps: List[Component] = []
    for cls in classes:
        for _attempt in range(50):
            cw, ch = _component_size(rng, spec)
            cx = rng.uniform(cw / 2 + 2, w - cw / 2 - 2)
            cy = rng.uniform(ch / 2 + 2, h - ch / 2 - 2)
            box = (cx - cw / 2 - 3, cy - ch / 2 - 3, cx + cw / 2 + 3, cy + ch / 2 + 3)
            if all(box[2] <= p[0] or p[2] <= box[0] or box[3] <= p[1] or p[3] <= box[1] for p in placed):
                break
        else:
            continue
        placed.append(box)
        mask = _draw_component(img, rng, cls, spec.shape, cx, cy, cw, ch)
        comps.append(Component(cls, mask, _bounds(mask)))
    # foreign-object occluders partially covering components
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    for c in comps:
        if rng.random() < spec.occluder_probability:
            x1, y1, x2, y2 = c.bounds
            side = rng.integers(0, 4)
            r = 0.35 * max(x2 - x1, y2 - y1)
            ox = [x1, x2, (x1 + x2) / 2, (x1 + x2) / 2][side]
            oy = [(y1 + y2) / 2, (y1 + y2) / 2, y1, y2][side]
            blob = _ellipse(xx, yy, ox, oy, r * rng.uniform(0.8, 1.2), r * rng.uniform(0.8, 1.2))
            img[blob] = rng.uniform(0.45, 0.55) + 0.05 * rng.standard_normal(int(blob.sum()))
    img = img + spec.noise * rng.standard_normal(img.shape)
    tint = 1.0 + rng.uniform(-0.03, 0.03, size=3)
    rgb = np.clip(img[None] * tint[:, None, None], 0.0, 1.0)
    return np.round(rgb * 255).astype(np.uint8), comps


def make_sample(spec: SceneSpec, split: str, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    img, comps = render_scene(spec, derive_seed(spec.seed, split, index))
    boxes = np.array([c.bounds for c in comps], dtype=np.float64).reshape(-1, 4)
    classes = np.array([c.class_id for c in comps], dtype=int)
    return img, boxes, classes


# ----------------------------------------------------------------------
# PPM io

def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary P6."""
    c, h, w = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise DataError(f"{path}: PPM needs a 3 x H x W uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file into a (3, H, W) uint8 array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1 if b"\n" in raw[pos:] else len(raw)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: image data has {len(body)} bytes, expected {w * h * 3} (truncated file?)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


# ----------------------------------------------------------------------
# dataset files

@dataclass
class SplitSummary:
    split: str
    images: int
    fault_images: int
    class_counts: Dict[str, int]

    def lines(self) -> List[str]:
        counts = " ".join(f"{k}={v}" for k, v in self.class_counts.items())
        return [f"{self.split} images={self.images} fault_images={self.fault_images} {counts}"]


def _record(name: str, fault: bool, boxes: np.ndarray, classes: np.ndarray) -> str:
    parts = [name, str(int(fault)), str(len(classes))]
    for c, b in zip(classes, boxes):
        parts.append(f"{int(c)} " + " ".join(f"{v:g}" for v in b))
    return " ".join(parts)


def spec_text(spec: SceneSpec, counts: Dict[str, int]) -> str:
    lines = ["[scene]"]
    lines += [f"{f.name} = {json.dumps(getattr(spec, f.name))}" for f in dataclasses.fields(spec)]
    lines += ["", "[splits]"]
    lines += [f"{k} = {v}" for k, v in counts.items()]
    return "\n".join(lines) + "\n"


def parse_spec_text(text: str) -> SceneSpec:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
        fields = {k: json.loads(v) for k, v in cp.items("scene")}
        spec = SceneSpec(**fields)
    except (configparser.Error, json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"bad spec.txt: {exc}") from exc
    return spec


def generate_split(spec: SceneSpec, root: str, split: str, count: int) -> SplitSummary:
    if count < 1:
        raise ConfigError(f"{split} count must be >= 1, got {count}")
    img_dir = os.path.join(root, split, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {img_dir}: {exc}") from exc
    records = [INDEX_HEADER + f" count={count} width={spec.width} height={spec.height}"]
    counts = {name: 0 for name in CLASS_NAMES}
    faults = 0
    for i in range(count):
        img, boxes, classes = make_sample(spec, split, i)
        name = f"{i:06d}.ppm"
        write_ppm(os.path.join(img_dir, name), img)
        fault = bool(np.isin(classes, FAULT_CLASSES).any())
        faults += fault
        for c in classes:
            counts[CLASS_NAMES[c]] += 1
        records.append(_record(name, fault, boxes, classes))
    with open(os.path.join(root, split, "annotations.txt"), "w") as fh:
        fh.write("\n".join(records) + "\n")
    return SplitSummary(split, count, faults, counts)


def generate_dataset(spec: SceneSpec, root: str, train_count: int, test_count: int) -> List[SplitSummary]:
    """Write both splits under ``root``. Identical (spec, counts) give byte-identical files."""
    spec.validate()
    try:
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, "spec.txt"), "w") as fh:
            fh.write(spec_text(spec, {"train": train_count, "test": test_count}))
    except OSError as exc:
        raise DataError(f"cannot write dataset at {root}: {exc}") from exc
    return [generate_split(spec, root, "train", train_count),
            generate_split(spec, root, "test", test_count)]


@dataclass
class Record:
    filename: str
    fault: bool
    boxes: np.ndarray
    classes: np.ndarray


def _parse_index(path: str) -> Tuple[Dict[str, int], List[Record]]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read annotation index {path}: {exc}") from exc
    if not lines or not lines[0].startswith(INDEX_HEADER):
        raise DataError(f"{path}: missing or incompatible header (expected '{INDEX_HEADER}')")
    meta = {}
    for tok in lines[0][len(INDEX_HEADER):].split():
        k, _, v = tok.partition("=")
        meta[k] = int(v)
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        where = f"{path}:{ln}"
        try:
            name, flag, n = parts[0], int(parts[1]), int(parts[2])
            vals = parts[3:]
            if len(vals) != 5 * n:
                raise DataError(f"{where} ({name}): declares {n} boxes but has {len(vals)} values")
            arr = np.array(vals, dtype=np.float64).reshape(n, 5)
        except (IndexError, ValueError) as exc:
            raise DataError(f"{where}: malformed record: {line[:60]!r}") from exc
        if flag not in (0, 1):
            raise DataError(f"{where} ({name}): fault flag must be 0 or 1")
        records.append(Record(name, bool(flag), arr[:, 1:], arr[:, 0].astype(int)))
    if "count" in meta and meta["count"] != len(records):
        raise DataError(f"{path}: header declares {meta['count']} records, found {len(records)}")
    return meta, records


class Dataset:
    """Lazily loaded split; iteration streams images from disk in (optionally shuffled) order."""

    def __init__(self, root: str, split: str, shuffle_seed: Optional[int] = None):
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        self.root = root
        self.split = split
        self.meta, self.records = _parse_index(os.path.join(root, split, "annotations.txt"))
        self.order = np.arange(len(self.records))
        if shuffle_seed is not None:
            self.order = np.random.default_rng(shuffle_seed).permutation(len(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, rec: Record) -> str:
        return os.path.join(self.root, self.split, "images", rec.filename)

    def load(self, i: int) -> Sample:
        """Load record ``i`` (in file order), validating it against its image."""
        rec = self.records[i]
        path = self.image_path(rec)
        img = read_ppm(path)
        if "width" in self.meta and img.shape[1:] != (self.meta["height"], self.meta["width"]):
            raise DataError(f"{path}: size {img.shape[2]}x{img.shape[1]} disagrees with index "
                            f"{self.meta['width']}x{self.meta['height']}")
        s = Sample(img.astype(np.float32) / 255.0, rec.boxes, rec.classes, rec.fault, rec.filename)
        validate_sample(s, where=f"{self.split}/{rec.filename}")
        return s

    def __iter__(self) -> Iterator[Sample]:
        for i in self.order:
            yield self.load(int(i))

    def load_uint8(self) -> np.ndarray:
        """All images as one (N, 3, H, W) uint8 array in file order (training cache)."""
        return np.stack([(self.load(i).image * 255 + 0.5).astype(np.uint8) for i in range(len(self))])


def load_dataset(root: str, split: str = "train", shuffle_seed: Optional[int] = None) -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    if not os.path.isdir(os.path.join(root, split)):
        raise DataError(f"no {split} split under {root}")
    return Dataset(root, split, shuffle_seed)


def read_dataset_spec(root: str) -> SceneSpec:
    path = os.path.join(root, "spec.txt")
    try:
        with open(path) as fh:
            return parse_spec_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# ----------------------------------------------------------------------
# augmentation

@dataclass
class AugmentPolicy:
    hflip_probability: float = 0.5
    brightness: float = 0.08
    contrast: float = 0.15


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), hflip_boxes(sample.boxes, sample.width),
                  sample.classes.copy(), sample.fault, sample.image_id)


def jitter(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy) -> Sample:
    gain = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
    bias = rng.uniform(-policy.brightness, policy.brightness)
    img = np.clip((sample.image - 0.5) * gain + 0.5 + bias, 0.0, 1.0).astype(np.float32)
    return Sample(img, sample.boxes.copy(), sample.classes.copy(), sample.fault, sample.image_id)


def augment(sample: Sample, policy: Optional[AugmentPolicy] = None, seed: int = 0) -> Sample:
    """Random horizontal flip then photometric jitter, deterministic in ``seed``."""
    policy = policy or AugmentPolicy()
    rng = np.random.default_rng(seed)
    out = hflip(sample) if rng.random() < policy.hflip_probability else sample
    return jitter(out, rng, policy)
