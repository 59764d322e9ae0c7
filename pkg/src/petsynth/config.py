"""Declarative run configuration shared by every CLI stage.

A run config is one JSON document::

    {"seed": 0, "out": "run",
     "phantom": {...}, "preprocess": {...}, "split": {...},
     "train": {..., "generator": {...}, "discriminator": {...}},
     "eval": {...}}

Every section is optional; unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .gan import DiscriminatorConfig, GeneratorConfig, TrainConfig
from .registration import RegistrationConfig

RESOLVED_NAME = "resolved_config.json"


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSection:
    n: int = 20
    dims: tuple = (32, 32, 32)
    cn_fraction: float = 0.55
    female_fraction: float = 0.5
    noise: float = 0.02
    n_frames: int = 6
    total_minutes: float = 60.0
    # Rigid PET-vs-MRI misalignment baked into the raw PET.
    max_shift_mm: float = 1.5
    max_rot_deg: float = 3.0


@dataclass(frozen=True)
class PreprocessSection:
    window_start: float = 30.0
    window_end: float = 60.0
    register: bool = True
    registration: RegistrationConfig = field(
        default_factory=lambda: RegistrationConfig(match_intensity=True, optimize_scale_shear=False))
    z_range: float = 3.0


@dataclass(frozen=True)
class SplitSection:
    train_fraction: float = 0.7


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 2
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_mask: float = 100.0
    checkpoint_every: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_g=self.lr_g, lr_d=self.lr_d,
                           beta1=self.beta1, beta2=self.beta2, lambda_mask=self.lambda_mask, seed=seed,
                           checkpoint_every=self.checkpoint_every)


@dataclass(frozen=True)
class EvalSection:
    split: str = "validation"
    masked: bool = True
    space: str = "suvr"
    write_differences: bool = True

    def __post_init__(self):
        if self.space not in ("suvr", "normalized"):
            raise RunConfigError(f"eval.space must be 'suvr' or 'normalized', got {self.space!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    split: SplitSection = field(default_factory=SplitSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        return _build(cls, data, "")

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise RunConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.write_text(self.to_json())
        return path


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise RunConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        prefix = f"{where}." if where else ""
        raise RunConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        key = f"{where}.{name}" if where else name
        current = getattr(defaults, name)
        if is_dataclass(current):
            # Nested sections overlay the section's own defaults.
            merged = {**asdict(current), **value} if isinstance(value, dict) else value
            value = _build(type(current), merged, key)
        elif isinstance(current, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{where or 'config'}: {exc}") from None
