"""Pipeline configuration: one YAML (or JSON) file, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .array_model import DEFAULT_APERTURE, DEFAULT_NUM_MICS, SPEED_OF_SOUND
from .dsp import SAMPLE_RATE, WELCH_WINDOW, design_bandpass
from .nn.model import Architecture
from .nn.train import TrainConfig
from .synth import DspSettings, SceneConfig, WearProfile


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySection(_Section):
    seed: int = 7
    num_mics: int = Field(DEFAULT_NUM_MICS, ge=1)
    aperture: float = Field(DEFAULT_APERTURE, gt=0)
    file: Optional[str] = None  # overrides the random layout when set


class SceneSection(_Section):
    source_dir: tuple[float, float, float] = (0.3, 0.2, 0.932738)
    interferer_dir: tuple[float, float, float] = (-0.7, 0.3, 0.648074)
    interferer_gain: float = 1.0
    machine_noise_gain: float = 10.0
    sensor_noise_sigma: float = 0.3
    n_total: int = 350
    sensor_pos: Literal["inside", "outside"] = "inside"
    fs: float = SAMPLE_RATE
    c: float = SPEED_OF_SOUND

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> SceneConfig:
        return SceneConfig(**self.model_dump())


class WearSection(_Section):
    centroid_start: float = 30e3
    centroid_end: float = 45e3
    bandwidth: float = 5e3
    gain_start_db: float = 0.0
    gain_rise_db: float = 6.0
    gain_exponent: float = 2.0
    material_gain_db: tuple[float, float] = (-2.0, 2.0)
    material_centroid_hz: tuple[float, float] = (-150.0, 150.0)

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> WearProfile:
        return WearProfile(**self.model_dump())


class DspSection(_Section):
    band: tuple[float, float] = (0.0, 60e3)
    order: int = 6
    welch_window: int = Field(WELCH_WINDOW, ge=2)
    welch_overlap: float = Field(0.5, ge=0, lt=1)

    def build(self) -> DspSettings:
        return DspSettings(self.band, self.order, self.welch_window, self.welch_overlap)


class SpectrogramSection(_Section):
    frames_per_run: int = Field(128, ge=1)
    per_run_reference: bool = False
    augment_copies: int = Field(4, ge=0)
    max_shift: int = Field(8, ge=0)
    noise_db_sigma: float = Field(1.0, ge=0)
    split_before_augment: bool = False
    split_fractions: tuple[float, float, float] = (0.75, 0.10, 0.15)

    @model_validator(mode="after")
    def _check(self):
        f = self.split_fractions
        if abs(sum(f) - 1.0) > 1e-9 or min(f) < 0:
            raise ValueError(f"split_fractions must be non-negative and sum to 1, got {f}")
        return self


class NnSection(_Section):
    freq_pool: int = Field(4, ge=1)
    channels: tuple[int, ...] = (8, 16, 32, 32)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    pad: int = Field(1, ge=0)
    pool: int = Field(2, ge=1)
    pool_kind: Literal["max", "avg"] = "max"
    norm_kind: Literal["layer", "batch"] = "layer"
    fc_hidden: int = 10
    leaky_slope: float = 0.01
    dropout: float = Field(0.1, ge=0, lt=1)
    learning_rate: float = Field(0.01, gt=0)
    max_epochs: int = Field(100, ge=1)
    batch_size: int = Field(16, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: Literal["float32", "float64"] = "float32"
    warmup_steps: int = Field(100, ge=0)


class EvalSection(_Section):
    window: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        return self


class PipelineConfig(_Section):
    seed: int = 0
    geometry: GeometrySection = GeometrySection()
    scene: SceneSection = SceneSection()
    wear: WearSection = WearSection()
    dsp: DspSection = DspSection()
    spectrogram: SpectrogramSection = SpectrogramSection()
    nn: NnSection = NnSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _check(self):
        fs = self.scene.fs
        if round(fs * 0.040) < self.dsp.welch_window:
            raise ValueError("dsp.welch_window: exceeds the 40 ms frame length")
        checks = (("dsp", lambda: design_bandpass(self.dsp.order, *self.dsp.band, fs)),
                  ("nn", self.architecture), ("nn", self.train_config))
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ValueError(f"{section}: {exc}") from None
        return self

    @property
    def input_bins(self) -> int:
        return self.dsp.welch_window // 2 + 1

    def architecture(self) -> Architecture:
        n = self.nn
        return Architecture(self.input_bins, self.spectrogram.frames_per_run, n.freq_pool,
                            n.channels, n.kernel, n.stride, n.pad, n.pool, n.pool_kind,
                            n.norm_kind, n.fc_hidden, n.leaky_slope, n.dropout, self.scene.n_total)

    def train_config(self) -> TrainConfig:
        n = self.nn
        return TrainConfig(n.learning_rate, n.max_epochs, n.batch_size, self.seed,
                           n.beta1, n.beta2, n.eps, n.dtype, n.warmup_steps)

    def derived_seed(self, stream: int) -> int:
        return int(np.random.SeedSequence([self.seed, stream]).generate_state(1)[0])

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """Apply dotted-key overrides, e.g. ``{"nn.pool_kind": "avg"}``; re-validates."""
        data = self.model_dump()
        for key, value in overrides.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return parse_config(data)


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        msg = e["msg"].removeprefix("Value error, ")
        path = ".".join(str(p) for p in e["loc"])
        lines.append(f"{path}: {msg}" if path else msg)
    return "; ".join(lines)


def parse_config(data: dict | None) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
