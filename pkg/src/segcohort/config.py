"""Run configuration: a flat key = value file with sections, strictly validated.

Every run directory stores the fully resolved config, so a run can be
reproduced from its directory alone.  All randomness in a run descends from
the single ``training.seed`` via named sub-seeds.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from segcohort.models import ConfigError, StudentConfig


@dataclass
class DataConfig:
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    label_ratio: str = "1/8"
    cutmix: bool = False

    def ratio(self) -> Fraction:
        return Fraction(self.label_ratio)


@dataclass
class ModelConfig:
    num_classes: int = 4
    conv_widths: str = "32,64,64,64"
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 2
    pos_embed: str = "learned"

    def student_configs(self, height: int, width: int) -> tuple[StudentConfig, StudentConfig]:
        widths = tuple(int(w) for w in self.conv_widths.split(","))
        conv = StudentConfig(kind="conv", num_classes=self.num_classes, conv_widths=widths)
        attn = StudentConfig(
            kind="attention",
            num_classes=self.num_classes,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_blocks=self.num_blocks,
            mlp_ratio=self.mlp_ratio,
            pos_embed=self.pos_embed,
            max_tokens=(height // self.patch_size) * (width // self.patch_size),
        )
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError(f"image size {height}x{width} not divisible by patch size {self.patch_size}")
        conv.validate()
        attn.validate()
        return conv, attn


@dataclass
class LossConfig:
    cross_distill: bool = True
    feature_distill: bool = True
    lambda_feature: float = 1.0
    ramp_fraction: float = 0.4
    prototype_scope: str = "image"  # {image, batch}
    distill_normalizer: str = "batch"  # {batch, labeled_set}

    def validate(self) -> None:
        if self.prototype_scope not in ("image", "batch"):
            raise ConfigError(f"losses.prototype_scope must be image or batch, got {self.prototype_scope!r}")
        if self.distill_normalizer not in ("batch", "labeled_set"):
            raise ConfigError(
                f"losses.distill_normalizer must be batch or labeled_set, got {self.distill_normalizer!r}"
            )


@dataclass
class TrainingConfig:
    iterations: int = 3000
    batch_size: int = 8
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    eval_interval: int = 250
    seed: int = 0
    threads: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def validate(self) -> None:
        self.losses.validate()
        ratio = self.data.ratio()
        if not 0 < ratio <= 1:
            raise ConfigError(f"data.label_ratio must lie in (0, 1], got {ratio}")
        if self.training.iterations < 1:
            raise ConfigError("training.iterations must be positive")
        if self.training.batch_size < 1:
            raise ConfigError("training.batch_size must be positive")
        if not 0 <= self.losses.ramp_fraction <= 1:
            raise ConfigError("losses.ramp_fraction must lie in [0, 1]")

    @property
    def semi_supervised(self) -> bool:
        return self.losses.cross_distill or self.losses.feature_distill


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "losses": LossConfig, "training": TrainingConfig}


def _parse_value(raw: str, target_type: type):
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a config file on top of the defaults; unknown sections or keys are errors."""
    config = RunConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(config, section)
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            current = getattr(target, key)
            try:
                setattr(target, key, _parse_value(raw, type(current)))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({err})") from err
    return config


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a loaded config."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(config, section)
        if not hasattr(target, key):
            raise ConfigError(f"unknown config key {section}.{key}")
        current = getattr(target, key)
        try:
            setattr(target, key, _parse_value(raw, type(current)))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({err})") from err
    return config


def dump_config(config: RunConfig) -> str:
    """Render the fully resolved config back into the file format."""
    lines = []
    for section, _ in _SECTIONS.items():
        target = getattr(config, section)
        lines.append(f"[{section}]")
        for f in fields(target):
            lines.append(f"{f.name} = {getattr(target, f.name)}")
        lines.append("")
    return "\n".join(lines)
