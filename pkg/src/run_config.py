"""
Run configuration files: INI text with one section per concern.

    [data]      manifest, studies, seed, min_images, max_images, confounder
    [backbone]  input_size, widths, strides
    [train]     variant, norm, lr, epochs, batch_size, seed, folds, fold, augment
    [augment]   brightness, contrast, rotation, scale  (each "low, high")
    [output]    out, checkpoint, metrics

Unknown sections or keys are rejected. Command-line flags override file
values; the effective configuration is echoed as ``config.ini``.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .config import (
    AUG_BRIGHTNESS,
    AUG_CONTRAST,
    AUG_ROTATION_DEG,
    AUG_SCALE,
    BATCH_SIZE,
    EPOCHS,
    INPUT_SIZE,
    LEARNING_RATE,
    MAX_IMAGES_PER_STUDY,
    N_FOLDS,
    STAGE_STRIDES,
    STAGE_WIDTHS,
)
from .errors import ConfigError, ShapeError
from .model import BackboneConfig
from .training import AugmentationConfig, TrainConfig

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class DataSection:
    manifest: str = ""
    studies: int = 200
    seed: int = 0
    min_images: int = 1
    max_images: int = MAX_IMAGES_PER_STUDY
    confounder: str = "off"


@dataclass
class BackboneSection:
    input_size: list[int] = field(default_factory=lambda: list(INPUT_SIZE))
    widths: list[int] = field(default_factory=lambda: list(STAGE_WIDTHS))
    strides: list[int] = field(default_factory=lambda: list(STAGE_STRIDES))


@dataclass
class TrainSection:
    variant: str = "ghif_vsp"
    norm: str = "instance"
    lr: float = LEARNING_RATE
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    seed: int = 0
    folds: int = N_FOLDS
    fold: int = 0
    augment: bool = True


@dataclass
class AugmentSection:
    brightness: list[float] = field(default_factory=lambda: list(AUG_BRIGHTNESS))
    contrast: list[float] = field(default_factory=lambda: list(AUG_CONTRAST))
    rotation: list[float] = field(default_factory=lambda: list(AUG_ROTATION_DEG))
    scale: list[float] = field(default_factory=lambda: list(AUG_SCALE))


@dataclass
class OutputSection:
    out: str = ""
    checkpoint: str = ""
    metrics: str = ""


def _coerce(raw: str, kind: Any, where: str) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == list[int]:
            return [int(part) for part in text.split(",") if part.strip()]
        if kind == list[float]:
            return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ─── Reading ────────────────────────────────────────────────────────────

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # type: ignore[assignment,method-assign]
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc

        config = cls()
        sections = {f.name for f in fields(config)}
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"{source}: unknown section [{section}]")
            target = getattr(config, section)
            hints = get_type_hints(type(target))
            for key, raw in parser.items(section):
                if key not in hints:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
                setattr(target, key, _coerce(raw, hints[key], f"{source} [{section}] {key}"))
        return config

    @classmethod
    def from_file(cls, path: Path) -> RunConfig:
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    @classmethod
    def load(cls, path: Path | None) -> RunConfig:
        return cls() if path is None else cls.from_file(path)

    def override(self, values: dict[str, Any]) -> RunConfig:
        """Apply ``{"section.key": value}`` pairs, skipping ``None`` (flag not given)."""
        for dotted, value in values.items():
            if value is None:
                continue
            section, key = dotted.split(".", 1)
            target = getattr(self, section)
            if key not in get_type_hints(type(target)):
                raise ConfigError(f"unknown setting {dotted}")
            setattr(target, key, value)
        return self

    # ─── Writing ────────────────────────────────────────────────────────────

    def to_text(self) -> str:
        lines: list[str] = []
        for section in fields(self):
            lines.append(f"[{section.name}]")
            values = getattr(self, section.name)
            for f in fields(values):
                lines.append(f"{f.name} = {_render(getattr(values, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir: Path, name: str = "config.ini") -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    # ─── Typed views ────────────────────────────────────────────────────────

    def augmentation_config(self) -> AugmentationConfig:
        a = self.augment
        try:
            return AugmentationConfig(
                tuple(a.brightness), tuple(a.contrast), tuple(a.rotation), tuple(a.scale)  # type: ignore[arg-type]
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[augment]: {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                lr=t.lr,
                epochs=t.epochs,
                batch_size=t.batch_size,
                seed=t.seed,
                model_variant=t.variant,
                norm_kind=t.norm,
                augmentation=self.augmentation_config(),
                augment=t.augment,
            )
        except ValueError as exc:
            raise ConfigError(f"[train]: {exc}") from exc

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        if len(b.input_size) != 2:
            raise ConfigError(f"[backbone] input_size needs two values, got {b.input_size}")
        try:
            return self.train_config().backbone(
                BackboneConfig(input_size=(b.input_size[0], b.input_size[1]), widths=b.widths, strides=b.strides)
            )
        except (ValueError, ShapeError) as exc:
            raise ConfigError(f"[backbone]: {exc}") from exc


def settings_text(section: str, settings: dict[str, Any]) -> str:
    """One INI section; ``None`` renders as an empty value."""
    lines = [f"[{section}]"]
    lines += [f"{key} = {'' if value is None else _render(value)}" for key, value in settings.items()]
    return "\n".join(lines) + "\n"


def echo_settings(path: Path, section: str, settings: dict[str, Any]) -> Path:
    """Write the effective settings of a command that has no run configuration of its own."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(settings_text(section, settings), encoding="utf-8")
    return path
