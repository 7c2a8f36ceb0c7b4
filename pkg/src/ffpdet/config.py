"""Configuration records and the sectioned config file.

Every section of the file maps to one dataclass below. Values are JSON
literals, so ``parse_config(render_config(cfg)) == cfg`` holds exactly.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import ConfigError

CLASS_NAMES = ["normal", "missing", "broken"]


def _stages_default() -> List[list]:
    # expansion, out channels, kernel, stride, squeeze-excite, activation
    return [
        [1.0, 16, 3, 2, True, "relu"],
        [4.5, 24, 3, 2, False, "relu"],
        [3.5, 24, 3, 1, False, "relu"],
        [4.0, 40, 5, 2, True, "hard_swish"],
        [3.0, 40, 5, 1, True, "hard_swish"],
        [3.0, 48, 5, 1, True, "hard_swish"],
        [3.0, 96, 5, 2, True, "hard_swish"],
        [3.0, 96, 5, 1, True, "hard_swish"],
        [3.0, 96, 5, 1, True, "hard_swish"],
    ]


def make_divisible(v: float, divisor: int = 8) -> int:
    """Round to the nearest multiple of ``divisor``, never below ``divisor``."""
    return max(divisor, int(v / divisor + 0.5) * divisor)


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stages: List[list] = field(default_factory=_stages_default)
    width_multiplier: float = 1.0
    tap_strides: List[int] = field(default_factory=lambda: [8, 16, 32])

    def validate(self) -> None:
        if list(self.tap_strides) != [8, 16, 32]:
            raise ConfigError(f"backbone tap strides must be [8, 16, 32], got {list(self.tap_strides)}")
        if self.width_multiplier <= 0:
            raise ConfigError("backbone width_multiplier must be positive")
        for i, st in enumerate(self.stages):
            if len(st) != 6:
                raise ConfigError(f"backbone stage {i} needs 6 fields "
                                  "[expansion, out, kernel, stride, se, activation], got {st}")
            exp, out, k, s, _se, act = st
            if exp <= 0 or out < 1 or k < 1 or k % 2 == 0 or s not in (1, 2):
                raise ConfigError(f"backbone stage {i} invalid: {st}")
            if act not in ("relu", "hard_swish"):
                raise ConfigError(f"backbone stage {i} activation {act!r} not in relu/hard_swish")

    def stage_widths(self) -> List[int]:
        return [make_divisible(st[1] * self.width_multiplier) for st in self.stages]


@dataclass
class FfpConfig:
    channels: int = 256
    fea: bool = True
    fea_reduction: int = 16
    fea_combine: str = "multiply"
    bottleneck: int = 16
    dilation_rates: List[int] = field(default_factory=lambda: [1, 2, 5])
    placement: List[str] = field(default_factory=lambda: ["fbm", "fbm", "dfb"])

    def validate(self) -> None:
        if self.bottleneck >= self.channels:
            raise ConfigError(f"ffp bottleneck ({self.bottleneck}) must be < channels ({self.channels})")
        if not self.dilation_rates or any(int(r) != r or r < 1 for r in self.dilation_rates):
            raise ConfigError(f"ffp dilation_rates must be positive integers, got {self.dilation_rates}")
        if len(self.placement) != 3 or any(p not in ("fbm", "dfb") for p in self.placement):
            raise ConfigError(f"ffp placement needs one of fbm/dfb for each of levels 3,4,5, got {self.placement}")
        if self.fea_combine not in ("multiply", "add"):
            raise ConfigError(f"ffp fea_combine must be multiply or add, got {self.fea_combine!r}")
        if self.fea_reduction < 1 or self.channels // self.fea_reduction < 1:
            raise ConfigError("ffp fea_reduction leaves no hidden units")


@dataclass
class DetectorConfig:
    num_classes: int = 3
    fault_classes: List[int] = field(default_factory=lambda: [1, 2])
    head_channels: int = 64
    tower_convs: int = 4
    prior_prob: float = 0.01
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_beta: float = 2.0
    score_threshold: float = 0.4
    image_threshold: Optional[float] = None
    max_detections: int = 50
    nms_iou: float = 0.5

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("detector num_classes must be >= 1")
        if any(c < 0 or c >= self.num_classes for c in self.fault_classes):
            raise ConfigError(f"detector fault_classes {self.fault_classes} outside [0, {self.num_classes})")
        if not 0.0 < self.prior_prob < 1.0:
            raise ConfigError("detector prior_prob must lie in (0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError("detector nms_iou must lie in (0, 1)")
        if self.tower_convs < 0 or self.head_channels < 1 or self.max_detections < 1:
            raise ConfigError("detector head sizes must be positive")

    @property
    def decision_threshold(self) -> float:
        return self.score_threshold if self.image_threshold is None else self.image_threshold


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    iterations: int = 5000
    decay_iteration: Optional[int] = None
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    dataset: str = "data"
    deterministic: bool = True
    augment: bool = True
    log_every: int = 50
    precision: str = "f32"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("train iterations must be >= 0")
        if self.iterations and self.decay_at() >= self.iterations:
            raise ConfigError(f"train decay_iteration ({self.decay_at()}) must be < iterations ({self.iterations})")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train lr and weight_decay must be nonnegative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"train precision must be f32 or f64, got {self.precision!r}")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("train checkpoint_every must be >= 0 and log_every >= 1")

    def decay_at(self) -> int:
        if self.decay_iteration is not None:
            return int(self.decay_iteration)
        return int(0.75 * self.iterations)

    def lr_at(self, iteration: int) -> float:
        """Step schedule: base lr, multiplied by ``decay_factor`` from the decay point on."""
        return self.lr * (self.decay_factor if iteration >= self.decay_at() else 1.0)

    @classmethod
    def paper_schedule(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=16, lr=5e-5, iterations=80000, decay_iteration=60000)
        base.update(kw)
        return cls(**base)


@dataclass
class SceneSpec:
    width: int = 704
    height: int = 512
    preset: str = "bogie_key"
    shape: str = "bolt"
    component_count: List[int] = field(default_factory=lambda: [1, 3])
    size_range: List[float] = field(default_factory=lambda: [0.07, 0.11])
    aspect_range: List[float] = field(default_factory=lambda: [0.8, 1.25])
    fault_probability: float = 0.5
    occluder_probability: float = 0.15
    clutter_density: float = 0.5
    noise: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        for name in ("fault_probability", "occluder_probability", "clutter_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"scene {name} must lie in [0, 1], got {v}")
        if self.width < 16 or self.height < 16:
            raise ConfigError("scene image size must be at least 16x16")
        lo, hi = self.component_count
        if lo < 1 or hi < lo:
            raise ConfigError(f"scene component_count must satisfy 1 <= min <= max, got {self.component_count}")
        if not 0 < self.size_range[0] <= self.size_range[1] < 0.5:
            raise ConfigError(f"scene size_range must satisfy 0 < min <= max < 0.5, got {self.size_range}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ConfigError(f"scene aspect_range invalid: {self.aspect_range}")
        if self.shape not in ("disc", "rect", "bolt"):
            raise ConfigError(f"scene shape must be disc, rect or bolt, got {self.shape!r}")
        if self.noise < 0:
            raise ConfigError("scene noise must be nonnegative")


SCENE_PRESETS = {
    # tiny targets
    "bogie_key": dict(shape="bolt", size_range=[0.07, 0.11], aspect_range=[0.8, 1.25], component_count=[1, 3]),
    # mid-size targets
    "dust_collector": dict(shape="rect", size_range=[0.16, 0.26], aspect_range=[0.7, 1.4], component_count=[1, 2]),
    # elongated targets
    "fastening_bolt": dict(shape="disc", size_range=[0.08, 0.12], aspect_range=[2.2, 3.2], component_count=[1, 3]),
}


def scene_preset(name: str, **overrides) -> SceneSpec:
    if name not in SCENE_PRESETS:
        raise ConfigError(f"unknown scene preset {name!r}; choose from {sorted(SCENE_PRESETS)}")
    kw = dict(SCENE_PRESETS[name], preset=name)
    kw.update(overrides)
    spec = SceneSpec(**kw)
    spec.validate()
    return spec


@dataclass
class GlobalConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ffp: FfpConfig = field(default_factory=FfpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def validate(self) -> "GlobalConfig":
        for sec in SECTIONS:
            getattr(self, sec).validate()
        return self


SECTIONS = ("detector", "backbone", "ffp", "train", "scene")


def render_config(cfg: GlobalConfig) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(getattr(cfg, sec)):
            lines.append(f"{f.name} = {json.dumps(getattr(getattr(cfg, sec), f.name))}")
        lines.append("")
    return "\n".join(lines)


def _coerce(section: str, key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key}: expected list, got {value!r}")
    return value


def set_value(cfg: GlobalConfig, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` override; ``raw`` is a JSON literal or bare string."""
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name: f for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    default = getattr(obj, key)
    if default is None or value is None:
        if value is not None and not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected number or null, got {value!r}")
    else:
        value = _coerce(section, key, value, default)
    setattr(obj, key, value)


def parse_config(text: str) -> GlobalConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    cfg = GlobalConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            try:
                json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"[{section}] {key}: value is not a JSON literal: {raw!r}") from exc
            set_value(cfg, f"{section}.{key}", raw)
    return cfg.validate()


def load_config(path: Optional[str]) -> GlobalConfig:
    if path is None:
        return GlobalConfig().validate()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
