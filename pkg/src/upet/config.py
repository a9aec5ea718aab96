"""Run configuration: plain-text key = value files with CLI overrides.

Precedence is flag over file over default.  Every key must be recognized;
an unknown key is an error, not a warning.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import UPetConfig
from .phantom import PhantomConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparseable value, or inconsistent configuration."""


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_int_triple(v: str) -> tuple[int, int, int]:
    parts = [p for p in v.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"expected three integers, got {v!r}")
    return tuple(int(p) for p in parts)


def _parse_float_tuple(v: str) -> tuple[float, ...]:
    parts = [p for p in v.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"expected comma-separated floats, got {v!r}")
    return tuple(float(p) for p in parts)


@dataclass
class RunConfig:
    """Merged view of model, training, phantom and split settings."""

    # model
    levels: int = 4
    base_channels: int = 8
    input_shape: tuple[int, int, int] = (32, 32, 32)
    use_attention: bool = True
    use_pet_head: bool = True
    lambda_l1: float = 1.0
    deep_supervision_weights: tuple[float, ...] = ()
    aggregate_probabilities: bool = False
    include_bottleneck_head: bool = True
    model_seed: int = 0
    # training
    epochs: int = 80
    batch_size: int = 4
    lr: float = 0.001
    train_seed: int = 0
    # split
    split_ratios: tuple[float, ...] = (0.70, 0.15, 0.15)
    split_seed: int = 0
    # phantom
    dims: tuple[int, int, int] = (32, 32, 32)
    subjects: int = 24
    sessions_per_subject: int = 2
    class_probabilities: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    paired_fraction: float = 0.38
    noise_sigma: float = 0.03
    mci_uptake_factor: float = 0.85
    ad_uptake_factor: float = 0.70
    phantom_seed: int = 0

    def model_config(self) -> UPetConfig:
        return UPetConfig(
            levels=self.levels, base_channels=self.base_channels,
            input_shape=tuple(self.input_shape),
            use_attention=self.use_attention, use_pet_head=self.use_pet_head,
            lambda_l1=self.lambda_l1,
            deep_supervision_weights=tuple(self.deep_supervision_weights),
            aggregate_probabilities=self.aggregate_probabilities,
            include_bottleneck_head=self.include_bottleneck_head)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, seed=self.train_seed)

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(
            dims=tuple(self.dims), subjects=self.subjects,
            sessions_per_subject=self.sessions_per_subject,
            class_probabilities=tuple(self.class_probabilities),
            paired_fraction=self.paired_fraction, noise_sigma=self.noise_sigma,
            mci_uptake_factor=self.mci_uptake_factor,
            ad_uptake_factor=self.ad_uptake_factor, seed=self.phantom_seed)


_PARSERS = {
    "levels": int,
    "base_channels": int,
    "input_shape": _parse_int_triple,
    "use_attention": _parse_bool,
    "use_pet_head": _parse_bool,
    "lambda_l1": float,
    "deep_supervision_weights": _parse_float_tuple,
    "aggregate_probabilities": _parse_bool,
    "include_bottleneck_head": _parse_bool,
    "model_seed": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "train_seed": int,
    "split_ratios": _parse_float_tuple,
    "split_seed": int,
    "dims": _parse_int_triple,
    "subjects": int,
    "sessions_per_subject": int,
    "class_probabilities": _parse_float_tuple,
    "paired_fraction": float,
    "noise_sigma": float,
    "mci_uptake_factor": float,
    "ad_uptake_factor": float,
    "phantom_seed": int,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config_file(path) -> dict[str, object]:
    """Read `key = value` lines; `#` starts a comment; unknown keys fail."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_override(spec: str) -> tuple[str, object]:
    """Decode one `key=value` command-line override."""
    if "=" not in spec:
        raise ConfigError(f"override must look like key=value, got {spec!r}")
    key, _, value = spec.partition("=")
    key = key.strip()
    if key not in _PARSERS:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return key, _PARSERS[key](value.strip())
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def build_run_config(file_path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, overlaid by the file, overlaid by explicit overrides."""
    merged: dict[str, object] = {}
    if file_path is not None:
        merged.update(parse_config_file(file_path))
    if overrides:
        unknown = set(overrides) - set(_PARSERS)
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        merged.update(overrides)
    try:
        return RunConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
