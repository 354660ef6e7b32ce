"""Experiment configuration: defaults, the key=value file format, validation.

Config files are flat documents, one ``key = value`` per line, with ``#``
comments and blank lines ignored. Keys mirror the ExperimentConfig field
names exactly; list values are comma separated. Command-line flags carry the
same names with a ``--`` prefix and override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .data import SceneSpec
from .detection import LossConfig
from .model import DetectorConfig

METHODS = ("fedavg", "s-fedavg", "s-fedweg")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending source line."""


@dataclass(frozen=True)
class ExperimentConfig:
    # federation
    method: str = "s-fedweg"
    rounds: int = 15
    local_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 0.1
    l1_lambda: float = 1e-4
    sparsity_rates: tuple[float, ...] = (0.2, 0.3, 0.4)
    sample_fraction: float = 1.0
    seed: int = 0
    out: str = "runs/run"
    # detector
    grid_size: int = 4
    boxes_per_cell: int = 2
    num_classes: int = 3
    channel_widths: tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 64
    # dataset
    train_count: int = 600
    test_count: int = 150
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: float = 0.15
    max_object_size: float = 0.40
    noise: float = 0.05
    dataset_dir: str = ""
    # loss
    loss_coord: float = 5.0
    loss_cls: float = 1.0
    loss_conf: float = 1.0
    loss_noobj: float = 0.5
    confidence_iou_target: bool = False
    # evaluation / reporting
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45
    gamma_bins: int = 20

    @property
    def num_clients(self) -> int:
        return len(self.sparsity_rates)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            grid_size=self.grid_size,
            boxes_per_cell=self.boxes_per_cell,
            num_classes=self.num_classes,
            channel_widths=tuple(self.channel_widths),
            input_size=(self.image_size, self.image_size),
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=(self.image_size, self.image_size),
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            min_size=self.min_object_size,
            max_size=self.max_object_size,
            noise=self.noise,
            grid_size=self.grid_size,
            seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            coord=self.loss_coord,
            cls=self.loss_cls,
            conf=self.loss_conf,
            noobj=self.loss_noobj,
            confidence_iou_target=self.confidence_iou_target,
        )

    def validate(self, sources: dict[str, str] | None = None) -> None:
        src = sources or {}

        def fail(key: str, message: str) -> None:
            where = f"{src[key]}: " if key in src else ""
            raise ConfigError(f"{where}{key}: {message}")

        if self.method not in METHODS:
            fail("method", f"must be one of {', '.join(METHODS)}, got {self.method!r}")
        for key, minimum in (
            ("rounds", 1),
            ("local_epochs", 1),
            ("batch_size", 1),
            ("train_count", 1),
            ("test_count", 1),
            ("gamma_bins", 2),
        ):
            if getattr(self, key) < minimum:
                fail(key, f"must be >= {minimum}, got {getattr(self, key)}")
        if self.learning_rate <= 0:
            fail("learning_rate", f"must be positive, got {self.learning_rate}")
        if self.l1_lambda < 0:
            fail("l1_lambda", f"must be nonnegative, got {self.l1_lambda}")
        if not self.sparsity_rates:
            fail("sparsity_rates", "need at least one client rate")
        for s in self.sparsity_rates:
            if not 0.01 <= s <= 0.99:
                fail("sparsity_rates", f"rates must lie in [0.01, 0.99], got {s}")
        if not 0 < self.sample_fraction <= 1:
            fail("sample_fraction", f"must be in (0, 1], got {self.sample_fraction}")
        for key in ("loss_coord", "loss_cls", "loss_conf", "loss_noobj"):
            if getattr(self, key) < 0:
                fail(key, f"must be nonnegative, got {getattr(self, key)}")
        for key in ("conf_threshold", "nms_threshold"):
            if not 0 <= getattr(self, key) <= 1:
                fail(key, f"must be in [0, 1], got {getattr(self, key)}")
        try:
            self.detector_config().validate()
        except ValueError as e:
            fail("channel_widths", str(e))
        try:
            self.scene_spec().validate()
        except ValueError as e:
            fail("max_objects", str(e))
        if self.train_count < self.num_clients:
            fail("train_count", f"cannot split {self.train_count} images over {self.num_clients} clients")

    def config_hash(self) -> str:
        """Stable digest of every semantically meaningful field (output path excluded)."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "out":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name}={value!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    """Parse one raw string into the declared type of config field ``key``."""
    f = _FIELDS[key]
    default = f.default
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [p.strip() for p in text.split(",") if p.strip()]
            elem = type(default[0]) if default else float
            return tuple(elem(p) for p in items)
        return text
    except ValueError as e:
        raise ValueError(str(e)) from None


def read_config_file(path) -> tuple[dict[str, object], dict[str, str]]:
    """Parse a key=value config file into (values, source-location) maps."""
    path = Path(path)
    values: dict[str, object] = {}
    sources: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config file ({e})") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
        sources[key] = f"{path}:{lineno}"
    return values, sources


def build_config(
    file_path=None, overrides: dict[str, object] | None = None
) -> ExperimentConfig:
    """Defaults, overlaid by an optional config file, overlaid by CLI overrides."""
    values: dict[str, object] = {}
    sources: dict[str, str] = {}
    if file_path is not None:
        values, sources = read_config_file(file_path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = value
        sources[key] = f"--{key}"
    config = ExperimentConfig(**values)
    config.validate(sources)
    return config
