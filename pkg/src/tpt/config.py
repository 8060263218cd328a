"""Model and run configuration, presets, and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

PRECISIONS = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TptConfig:
    levels: int = 3                 # N, pyramid depth
    frames_per_segment: int = 16    # T
    layers: int = 3                 # R, layers per multimodal block
    d_model: int = 512              # d
    heads: int = 8                  # H
    d_ff: int | None = None         # defaults to 4 * d_model
    scale_per_head: bool = False    # sqrt(d / H) instead of sqrt(d)
    activation: str = "gelu"        # decoder activation
    precision: str = "float32"
    appearance_dim: int = 2048
    motion_dim: int = 2048
    word_dim: int = 300
    text_layers: int = 1
    fixed_level: int | None = None  # single-level ablation: feed only this level
    use_qt: bool = True             # False bypasses the question-specific transformer
    count_min: int = 0
    count_max: int = 10
    hinge_reduction: str = "mean"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("levels", "frames_per_segment", "layers", "d_model", "heads",
                     "appearance_dim", "motion_dim", "word_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.text_layers < 0:
            raise ConfigError("text_layers must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.fixed_level is not None and self.fixed_level < 1:
            raise ConfigError("fixed_level must be >= 1")
        if self.count_min > self.count_max:
            raise ConfigError("count_min must not exceed count_max")
        if self.hinge_reduction not in ("mean", "sum"):
            raise ConfigError("hinge_reduction must be 'mean' or 'sum'")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(PRECISIONS[self.precision])

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def pyramid_levels(self) -> list[int]:
        """Levels fed to the model (1-based)."""
        if self.fixed_level is not None:
            return [self.fixed_level]
        return list(range(1, self.levels + 1))

    def level_length(self, n: int) -> int:
        return 2 ** (n - 1) * (self.frames_per_segment + 1)

    def replace(self, **changes) -> "TptConfig":
        return dataclasses.replace(self, **changes)


def paper_config(**overrides) -> TptConfig:
    return TptConfig(**overrides)


def tiny_config(**overrides) -> TptConfig:
    base = dict(levels=2, frames_per_segment=4, layers=1, d_model=32, heads=4, d_ff=64,
                appearance_dim=64, motion_dim=64, word_dim=300)
    base.update(overrides)
    return TptConfig(**base)


PRESETS = {"paper": paper_config, "tiny": tiny_config}


@dataclass
class RunConfig:
    model: TptConfig = field(default_factory=TptConfig)
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-4
    patience: int = 5
    plateau_on: str = "train"       # or "val"
    seed: int = 0
    out_dir: str | None = None
    val_fraction: float = 0.2
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.plateau_on not in ("train", "val"):
            raise ConfigError("plateau_on must be 'train' or 'val'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def replace(self, **changes) -> "RunConfig":
        model_keys = {f.name for f in dataclasses.fields(TptConfig)}
        model_changes = {k: v for k, v in changes.items() if k in model_keys}
        own = {k: v for k, v in changes.items() if k not in model_keys}
        model = self.model.replace(**model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **own)

    def flat(self) -> dict[str, Any]:
        out = dataclasses.asdict(self.model)
        out.update({f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"})
        return out


def config_keys() -> dict[str, Any]:
    """All flat configuration keys with their declared types."""
    keys = dict(typing.get_type_hints(TptConfig))
    keys.update({k: v for k, v in typing.get_type_hints(RunConfig).items() if k != "model"})
    return keys


def _coerce(key: str, raw: str, hint) -> Any:
    text = raw.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def run_config_from(values: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply flat overrides (strings are coerced by declared type) onto ``base``."""
    keys = config_keys()
    changes = {}
    for key, value in values.items():
        if key == "preset":
            continue
        if key not in keys:
            raise ConfigError(f"unknown configuration key {key!r}")
        changes[key] = _coerce(key, value, keys[key]) if isinstance(value, str) else value
    if base is None:
        preset = values.get("preset", "paper")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = RunConfig(model=PRESETS[preset]())
    return base.replace(**changes)


def format_config(run: RunConfig) -> str:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in run.flat().items()]
    return "\n".join(lines) + "\n"
