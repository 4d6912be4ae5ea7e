"""Flat ``key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import PAIS, GeneratorConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # corpus
    image_size: int = 64
    subjects: int = 12
    bonafide_videos: int = 1
    attack_videos: int = 2
    frames: int = 20
    strength_print_halftone: float = 1.0
    strength_replay_moire: float = 1.0
    strength_replay_banding: float = 1.0
    strength_print_colorcast: float = 1.0
    strength_jitter: float = 0.2
    dataset_name: str = "synth"
    # model
    input_size: int = 64
    stem_channels: int = 16
    growth_rate: int = 8
    block1_layers: int = 6
    block2_layers: int = 12
    compression: float = 0.5
    bottleneck_factor: int = 4
    # training
    lr: float = 1e-3  # desk default; from-scratch training underfits at 1e-4 in 20 epochs
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    lam: float = 0.5
    flip_prob: float = 0.5
    jitter_range: float = 0.1
    # evaluation
    protocol: str = "grandtest"
    score_frames: int = 20
    threshold_source: str = "A"
    # baselines
    baseline_l2: float = 1e-3
    baseline_epochs: int = 500
    baseline_lr: float = 0.5
    seed: int = 7
    explicit: set = field(default_factory=set, repr=False, compare=False)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls) if f.name != "explicit"]

    def set(self, key: str, raw) -> None:
        key = {"lambda": "lam"}.get(key, key)
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, key)
        try:
            value = type(current)(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        if key == "threshold_source" and value not in ("A", "B"):
            raise ConfigError("threshold_source must be A or B")
        setattr(self, key, value)
        self.explicit.add(key)

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, raw = (part.strip() for part in line.split("=", 1))
                try:
                    cfg.set(key, raw)
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        for key, raw in (overrides or {}).items():
            if raw is not None:
                cfg.set(key, raw)
        return cfg

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            subjects=self.subjects,
            bonafide_videos=self.bonafide_videos,
            attack_videos=self.attack_videos,
            frames=self.frames,
            strengths=tuple(getattr(self, f"strength_{p}") for p in PAIS),
            strength_jitter=self.strength_jitter,
            seed=self.seed,
            name=self.dataset_name,
        )

    def model(self) -> ModelConfig:
        return ModelConfig(
            input_size=(self.input_size, self.input_size),
            stem_channels=self.stem_channels,
            growth_rate=self.growth_rate,
            block_layers=(self.block1_layers, self.block2_layers),
            compression=self.compression,
            bottleneck_factor=self.bottleneck_factor,
            lam=self.lam,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lam=self.lam,
            flip_prob=self.flip_prob,
            jitter_range=self.jitter_range,
            seed=self.seed,
        )

    def model_keys_set(self) -> bool:
        model_keys = {"input_size", "stem_channels", "growth_rate", "block1_layers", "block2_layers",
                      "compression", "bottleneck_factor"}
        return bool(self.explicit & model_keys)

    def dump(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in self.keys())
