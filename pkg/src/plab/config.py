"""Flat key=value run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import DEFAULT_CHANNEL_MEAN_VARIANCES, DatasetSpec, parse_profile
from .losses import LossConfig
from .model import ModelConfig
from .semisup import PLSchedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset
    num_classes: int = 10
    junk_classes: int = 2
    profile: str = "40x8"
    image_size: int = 64
    channel_mean_variances: str = ",".join(repr(v) for v in DEFAULT_CHANNEL_MEAN_VARIANCES)
    unlabeled_fraction: float = 0.0
    plates: int = 8
    # model
    growth_rate: int = 8
    block_layers: str = "2,2,2"
    embedding_dim: int = 32
    # loss
    s: float = 30.0
    m: float = 0.5
    c: float = 0.2
    # pseudo-labelling
    pseudo_label: bool = False
    T1: int = 5
    T2: int = 15
    alpha_f: float = 3.0
    # cutmix; alpha 0 disables
    cutmix_alpha: float = 0.0
    cutmix_prob: float = 0.5
    cutmix_start: int = 1
    # optimisation
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 0.005
    weight_decay: float = 0.0
    seed: int = 0
    # paths
    data_dir: str = "data"
    output_dir: str = "runs"

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.num_classes,
            junk_classes=self.junk_classes,
            profile=parse_profile(self.profile),
            image_size=self.image_size,
            channel_mean_variances=tuple(float(v) for v in self.channel_mean_variances.split(",")),
            seed=self.seed,
            unlabeled_fraction=self.unlabeled_fraction,
            plates=self.plates,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            input_size=self.image_size,
            growth_rate=self.growth_rate,
            block_layers=[int(v) for v in self.block_layers.split(",") if v],
            embedding_dim=self.embedding_dim,
            seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(s=self.s, m=self.m, c=self.c)

    def schedule(self) -> PLSchedule:
        return PLSchedule(T1=self.T1, T2=self.T2, alpha_f=self.alpha_f)

    def validate(self) -> None:
        """Run every owning module's checks before any work starts."""
        try:
            self.dataset_spec().validate()
            self.model_config().validate()
            self.loss_config()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, learning_rate > 0, weight_decay >= 0 required")
        if self.cutmix_alpha < 0 or not 0 <= self.cutmix_prob <= 1:
            raise ConfigError("cutmix_alpha must be >= 0 and cutmix_prob in [0, 1]")

    def set(self, key: str, raw: str) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(getattr(self, key))
        try:
            if kind is bool:
                low = raw.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("1", "true", "yes")
            else:
                value = kind(raw.strip())
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def parse_kv_lines(text: str) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def load_run_config(path: str | Path | None = None, overrides: list[str] = (), **explicit) -> RunConfig:
    """Defaults, then the config file, then ``--set`` overrides, then explicit flags."""
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_kv_lines(Path(path).read_text()):
            cfg.set(k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    for k, v in explicit.items():
        if v is not None:
            cfg.set(k, str(v))
    return cfg
