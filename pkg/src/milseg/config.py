"""Flat key=value run configuration shared by every CLI command.

A config file holds ``key=value`` lines (``#`` starts a comment); flags
given on the command line win over file values.  Every key is validated
against the schema below and unknown keys are rejected, so a resolved
snapshot written next to a run's outputs can be fed back in as-is to
reproduce the run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys or unparseable values."""


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


@dataclass
class RunConfig:
    # reproducibility / resources
    seed: int = 0
    threads: int = 0  # 0 = leave the BLAS thread count alone

    # synthetic data
    image_size: int = 64
    positive_count: int = 8
    negative_count: int = 16
    area_lo: float = 0.1
    area_hi: float = 0.4
    area_step: float = 0.05

    # backbone
    conv_counts: tuple[int, ...] = (2, 2, 3)
    channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    input_channels: int = 3
    fusion_weights: tuple[float, ...] = (0.2, 0.35, 0.45)

    # optimization
    learning_rate: float = 0.001
    side_lr_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0005
    iterations: int = 300
    batch_size: int = 0  # 0 = full batch
    r: float = 4.0
    eta_side: tuple[float, ...] = (2.5, 5.0, 10.0)
    eta_fuse: float = 10.0
    plateau_window: int = 50
    plateau_tol: float = 1e-5

    # prediction / evaluation
    threshold: float = 0.5

    # superpixel instances (0 = plain pixels)
    superpixel_k: int = 0
    compactness: float = 10.0
    sp_iterations: int = 10

    def backbone_config(self):
        from .backbone import BackboneConfig

        if len(self.conv_counts) != len(self.channels):
            raise ConfigError(
                f"conv_counts has {len(self.conv_counts)} stages but channels "
                f"has {len(self.channels)}"
            )
        try:
            return BackboneConfig(
                stages=tuple(zip(self.conv_counts, self.channels)),
                kernel_size=self.kernel_size,
                input_channels=self.input_channels,
                fusion_weights=self.fusion_weights,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self):
        from .losses import LossWeights
        from .trainer import TrainConfig

        try:
            return TrainConfig(
                learning_rate=self.learning_rate,
                side_lr_scale=self.side_lr_scale,
                beta1=self.beta1,
                beta2=self.beta2,
                epsilon=self.epsilon,
                weight_decay=self.weight_decay,
                iterations=self.iterations,
                batch_size=self.batch_size or None,
                r=self.r,
                weights=LossWeights(eta_side=self.eta_side, eta_fuse=self.eta_fuse),
                seed=self.seed,
                plateau_window=self.plateau_window,
                plateau_tol=self.plateau_tol,
                superpixel_k=self.superpixel_k or None,
                superpixel_compactness=self.compactness,
                superpixel_iterations=self.sp_iterations,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synth_spec(self):
        from .synth import SynthSpec

        try:
            return SynthSpec(
                image_size=self.image_size,
                positive_count=self.positive_count,
                negative_count=self.negative_count,
                area_range=(self.area_lo, self.area_hi),
                area_quantization=self.area_step,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _field_parser(f):
    if f.type in ("int", int):
        return _parse_int
    if f.type in ("float", float):
        return _parse_float
    if "int" in str(f.type):
        return _parse_int_list
    return _parse_float_list


SCHEMA = {f.name: _field_parser(f) for f in fields(RunConfig)}


def load_config_file(path) -> dict[str, str]:
    """Raw key -> text mapping from a config file; keys must be known."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = value.strip()
    return values


def resolve(config_file=None, **flag_values) -> RunConfig:
    """Merge defaults, config-file values and flags (flags win)."""
    merged = RunConfig()
    if config_file is not None:
        for key, text in load_config_file(config_file).items():
            try:
                setattr(merged, key, SCHEMA[key](text))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc
    for key, value in flag_values.items():
        if value is None:
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
        setattr(merged, key, value)
    return merged


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot(config: RunConfig, path) -> None:
    """Write every resolved key so the run can be replayed exactly."""
    lines = [f"{f.name}={_format_value(getattr(config, f.name))}"
             for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
