"""Spectrogram matrices, dB normalization, augmentation and dataset splits."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dsp import FRAME_RATE, DimensionError, PowerSpectrum

DB_RANGE = 90.0
MATERIALS = ("C45", "Chromoly")
SENSOR_POSITIONS = ("inside", "outside")


class EmptyInputError(ValueError):
    pass


class InvalidReferenceError(ValueError):
    """Invalid dB reference power."""


class ShiftError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (B, N) float32 dB in [0, 90]
    run_label: int
    material: str = "C45"
    sensor_pos: str = "inside"
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[1] < 1:
            raise DimensionError(f"spectrogram must be (B, N) with N >= 1, got {v.shape}")
        if not np.all((v >= 0) & (v <= DB_RANGE)):
            raise ValueError("spectrogram values must lie in [0, 90] dB")
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")
        if self.sensor_pos not in SENSOR_POSITIONS:
            raise ValueError(f"unknown sensor position {self.sensor_pos!r}")
        if self.run_label < 1:
            raise ValueError("run_label must be >= 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]


def assemble(spectra: Sequence[PowerSpectrum]) -> np.ndarray:
    """Stack per-frame spectra as columns: ``S[:, n]`` is frame ``n``."""
    if len(spectra) == 0:
        raise EmptyInputError("no spectra to assemble")
    first = spectra[0]
    for i, s in enumerate(spectra):
        if s.power.shape != first.power.shape:
            raise DimensionError(f"spectrum {i} has {s.power.size} bins, expected {first.power.size}")
        if not np.array_equal(s.freqs, first.freqs):
            raise DimensionError(f"spectrum {i} has a different frequency axis")
    return np.stack([s.power for s in spectra], axis=1)


def normalize_db(raw: np.ndarray, ref_power: float) -> np.ndarray:
    """Map power to a 90 dB window whose top is ``ref_power``; clamp below."""
    if not ref_power > 0 or not np.isfinite(ref_power):
        raise InvalidReferenceError(f"reference power must be positive, got {ref_power!r}")
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("power must be non-negative")
    with np.errstate(divide="ignore"):
        v = 10.0 * np.log10(raw / ref_power) + DB_RANGE
    return np.clip(v, 0.0, DB_RANGE)


def augment(sg: Spectrogram, shift: int, noise_db_sigma: float, seed) -> Spectrogram:
    """Circularly shift columns by ``shift`` and add Gaussian dB noise."""
    n = sg.values.shape[1]
    if abs(shift) >= n and not (shift == 0 and n == 1):
        raise ShiftError(f"|shift| = {abs(shift)} must be smaller than N = {n}")
    v = np.roll(sg.values.astype(np.float64), shift, axis=1)
    if noise_db_sigma > 0:
        rng = np.random.default_rng(seed)
        v = v + rng.normal(0.0, noise_db_sigma, size=v.shape)
    return replace(sg, values=np.clip(v, 0.0, DB_RANGE).astype(np.float32))


def augment_many(items: Sequence[Spectrogram], copies: int, max_shift: int,
                 noise_db_sigma: float, seed: int) -> list[Spectrogram]:
    """``copies`` random variants of every item, in item order."""
    out = []
    ss = np.random.SeedSequence(seed)
    for item, child in zip(items, ss.spawn(len(items))):
        rng = np.random.default_rng(child)
        n = item.values.shape[1]
        limit = min(max_shift, n - 1)
        for _ in range(copies):
            shift = int(rng.integers(-limit, limit + 1)) if limit > 0 else 0
            out.append(augment(item, shift, noise_db_sigma, rng))
    return out


def split_dataset(items, seed: int,
                  fractions: tuple[float, float, float] = (0.75, 0.10, 0.15)) -> DatasetSplit:
    n = items if isinstance(items, int) else len(items)
    if n == 0:
        raise EmptyInputError("cannot split an empty dataset")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return DatasetSplit(
        train=sorted(order[:n_train].tolist()),
        val=sorted(order[n_train:n_train + n_val].tolist()),
        test=sorted(order[n_train + n_val:].tolist()),
    )
