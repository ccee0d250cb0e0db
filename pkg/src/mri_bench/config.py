"""Run configuration: typed sections bound to an INI file.

Unknown sections, unknown keys, and unparseable values are configuration
errors; overrides use the same schema, so `--set train.batch_size=4` and a
config file line are validated identically. Conversions to the heavier
runtime spec objects import their modules lazily so manifest-only commands
stay fast.
"""

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence, Tuple

from .backbones import get_backbone
from .dataset import CLASS_NAMES
from .errors import ConfigurationError

DATASET_LAYOUTS = ("pre_split", "flat")
# mirrored from model.POOLING_MODES / model.TRAINABLE_SCOPES / model.WEIGHT_MODES,
# which live in the heavyweight module; equality is asserted in the test suite
POOLING_MODES = ("adaptive_4x4", "kernel_2x2")
TRAINABLE_SCOPES = ("all", "head_only")
WEIGHT_MODES = ("imagenet_pretrained", "random")

_BOOL_STATES = {"1": True, "true": True, "yes": True, "on": True,
                "0": False, "false": False, "no": False, "off": False}


def _parse_bool(value: str) -> bool:
    try:
        return _BOOL_STATES[value.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {value!r}") from None


def _parse_int_tuple(value: str) -> Tuple[int, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected at least one integer")
    return tuple(int(p) for p in parts)


def _parse_size(value: str) -> Tuple[int, int]:
    parts = _parse_int_tuple(value)
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) == 2:
        return parts
    raise ValueError(f"expected one or two integers, got {len(parts)}")


@dataclass(frozen=True)
class DatasetSection:
    root: str = "."
    layout: str = "pre_split"
    ratio: float = 0.8
    seed: int = 42

    def __post_init__(self):
        if self.layout not in DATASET_LAYOUTS:
            raise ConfigurationError(
                f"dataset.layout must be one of {DATASET_LAYOUTS}, got {self.layout!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigurationError(f"dataset.ratio must lie in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    rotations: Tuple[int, ...] = (0, 90, 180, 270)
    hflip: bool = True
    vflip: bool = True
    offline_copies: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(sorted(set(self.rotations))))
        if self.offline_copies < 0:
            raise ConfigurationError(
                f"augment.offline_copies must be non-negative, got {self.offline_copies}")
        if not self.enabled:
            return
        bad = [r for r in self.rotations if r not in (0, 90, 180, 270)]
        if bad:
            raise ConfigurationError(
                f"augment.rotations must be drawn from 0,90,180,270; got {bad}")
        if not self.rotations or 0 not in self.rotations:
            raise ConfigurationError("augment.rotations must include 0")


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "efficientnet_b1"
    weights: str = "imagenet_pretrained"
    trainable_scope: str = "all"
    input_size: Tuple[int, int] = (512, 512)
    pooling: str = "adaptive_4x4"
    dense_widths: Tuple[int, ...] = (1024, 1024)
    dropout: float = 0.5

    def __post_init__(self):
        get_backbone(self.backbone)  # raises RegistryError for unknown ids
        if self.weights not in WEIGHT_MODES:
            raise ConfigurationError(
                f"model.weights must be one of {WEIGHT_MODES}, got {self.weights!r}")
        if self.trainable_scope not in TRAINABLE_SCOPES:
            raise ConfigurationError(
                f"model.trainable_scope must be one of {TRAINABLE_SCOPES}, "
                f"got {self.trainable_scope!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(
                f"model.pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigurationError(
                f"model.input_size must be two positive integers, got {self.input_size}")
        if not self.dense_widths or any(w < 1 for w in self.dense_widths):
            raise ConfigurationError(
                f"model.dense_widths must be positive integers, got {self.dense_widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(
                f"model.dropout must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.001
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-07
    seed: int = 42
    class_weighting: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(
                f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(
                f"train.batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(
                f"train.max_epochs must be at least 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigurationError(
                f"train.patience must lie in [1, {self.max_epochs}], got {self.patience}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(f"train.{name} must lie in [0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigurationError(
                f"train.epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class OutputSection:
    run_root: str = "runs"

    def __post_init__(self):
        if not self.run_root:
            raise ConfigurationError("output.run_root must not be empty")


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "augment": AugmentSection,
    "model": ModelSection,
    "train": TrainSection,
    "output": OutputSection,
}

_SPECIAL_PARSERS = {
    ("augment", "rotations"): _parse_int_tuple,
    ("model", "input_size"): _parse_size,
    ("model", "dense_widths"): _parse_int_tuple,
}


def _parser_for(section: str, key: str, default_value):
    special = _SPECIAL_PARSERS.get((section, key))
    if special:
        return special
    if isinstance(default_value, bool):
        return _parse_bool
    if isinstance(default_value, int):
        return int
    if isinstance(default_value, float):
        return float
    return str


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = DatasetSection()
    augment: AugmentSection = AugmentSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    output: OutputSection = OutputSection()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"config is not valid INI: {exc}") from exc
        values = {}
        for section_name in parser.sections():
            if section_name not in _SECTION_TYPES:
                raise ConfigurationError(
                    f"unknown config section [{section_name}]; known: "
                    f"{', '.join(_SECTION_TYPES)}")
            section_type = _SECTION_TYPES[section_name]
            defaults = section_type()
            known = {f.name for f in fields(section_type)}
            kwargs = {}
            for key, raw in parser.items(section_name):
                if key not in known:
                    raise ConfigurationError(
                        f"unknown key {section_name}.{key}; known: "
                        f"{', '.join(sorted(known))}")
                parse = _parser_for(section_name, key, getattr(defaults, key))
                try:
                    kwargs[key] = parse(raw)
                except ValueError as exc:
                    raise ConfigurationError(
                        f"bad value for {section_name}.{key}: {raw!r} ({exc})") from exc
            values[section_name] = section_type(**kwargs)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.from_ini(path.read_text())

    def to_ini(self) -> str:
        lines = []
        for section_name, section_type in _SECTION_TYPES.items():
            section = getattr(self, section_name)
            lines.append(f"[{section_name}]")
            for f in fields(section_type):
                lines.append(f"{f.name} = {_render_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def apply_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        """Apply `section.key=value` strings using the same schema as the file."""
        updates = {}
        for raw in assignments:
            if "=" not in raw:
                raise ConfigurationError(
                    f"override {raw!r} is not of the form section.key=value")
            dotted, value = raw.split("=", 1)
            if "." not in dotted:
                raise ConfigurationError(
                    f"override key {dotted!r} is not of the form section.key")
            section_name, key = dotted.strip().split(".", 1)
            section_type = _SECTION_TYPES.get(section_name)
            if section_type is None:
                raise ConfigurationError(
                    f"unknown config section {section_name!r} in override {raw!r}")
            known = {f.name for f in fields(section_type)}
            if key not in known:
                raise ConfigurationError(
                    f"unknown key {section_name}.{key}; known: {', '.join(sorted(known))}")
            parse = _parser_for(section_name, key, getattr(section_type(), key))
            try:
                updates.setdefault(section_name, {})[key] = parse(value.strip())
            except ValueError as exc:
                raise ConfigurationError(
                    f"bad value for {section_name}.{key}: {value!r} ({exc})") from exc
        out = self
        for section_name, kwargs in updates.items():
            out = replace(out, **{section_name: replace(getattr(out, section_name), **kwargs)})
        return out

    def to_train_config(self):
        from .train import TrainConfig  # heavy import

        t = self.train
        return TrainConfig(learning_rate=t.learning_rate, batch_size=t.batch_size,
                           max_epochs=t.max_epochs, patience=t.patience,
                           beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon,
                           seed=t.seed, input_size=self.model.input_size,
                           class_weighting=t.class_weighting)

    def to_augmentation_spec(self):
        from .augment import AugmentationSpec

        a = self.augment
        return AugmentationSpec(enabled=a.enabled, rotation_choices=a.rotations or (0,),
                                h_flip=a.hflip, v_flip=a.vflip)

    def to_backbone_spec(self):
        from .model import BackboneSpec  # heavy import

        return BackboneSpec(id=self.model.backbone, input_size=self.model.input_size,
                            weights=self.model.weights)

    def to_head_spec(self):
        from .model import HeadSpec  # heavy import

        return HeadSpec(pooling=self.model.pooling,
                        dense_widths=self.model.dense_widths,
                        dropout_rate=self.model.dropout,
                        num_classes=len(CLASS_NAMES))


def override_flags() -> Sequence[Tuple[str, str, str]]:
    """Every (section, key, rendered default) triple, in schema order.

    The CLI registers one --section.key flag per triple, so the override
    surface always matches the file schema.
    """
    out = []
    for section_name, section_type in _SECTION_TYPES.items():
        defaults = section_type()
        for f in fields(section_type):
            out.append((section_name, f.name,
                        _render_value(getattr(defaults, f.name))))
    return out


def default_ini() -> str:
    return RunConfig().to_ini()
