"""Microphone array geometry and far-field steering delays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPEED_OF_SOUND = 343.0  # m/s, air at 20 C
DEFAULT_NUM_MICS = 32
DEFAULT_APERTURE = 0.05  # m


class GeometryError(ValueError):
    pass


class DirectionError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, shape (M, 3)."""

    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError(f"mic positions must have shape (M, 3), got {pos.shape}")
        if pos.shape[0] == 0:
            raise GeometryError("empty geometry")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("non-finite microphone coordinate")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise GeometryError("duplicate microphone positions")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    @property
    def M(self) -> int:
        return self.mic_positions.shape[0]

    def translated(self, offset) -> "ArrayGeometry":
        return ArrayGeometry(self.mic_positions + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True)
class SteeringDirection:
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        if psi.shape != (3,) or not np.all(np.isfinite(psi)):
            raise DirectionError(f"direction must be a finite 3-vector, got {self.psi!r}")
        if abs(np.linalg.norm(psi) - 1.0) > 1e-9:
            raise DirectionError(f"direction must be a unit vector, |psi| = {np.linalg.norm(psi)}")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def from_vector(cls, v) -> "SteeringDirection":
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if n == 0 or not np.isfinite(n):
            raise DirectionError("cannot normalize a zero or non-finite vector")
        return cls(v / n)

    @classmethod
    def from_angles(cls, azimuth: float, elevation: float) -> "SteeringDirection":
        """Azimuth in the x-y plane from +x, elevation toward +z, both radians."""
        ce = np.cos(elevation)
        return cls.from_vector([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])

    def __eq__(self, other):
        return isinstance(other, SteeringDirection) and np.array_equal(self.psi, other.psi)

    def __hash__(self):
        return hash(self.psi.tobytes())


@dataclass(frozen=True)
class DelaySet:
    delays: np.ndarray  # samples, min == 0
    sample_rate: float

    def __len__(self):
        return len(self.delays)


def steering_delays(geom: ArrayGeometry, psi: SteeringDirection,
                    c: float = SPEED_OF_SOUND, fs: float = 450e3) -> DelaySet:
    """Per-microphone delays (in samples) that align a plane wave arriving from ``psi``.

    Microphones closer to the source (larger projection on ``psi``) hear the
    wavefront first and therefore receive the largest delay.
    """
    if not isinstance(psi, SteeringDirection):
        psi = SteeringDirection(psi)
    if c <= 0 or fs <= 0:
        raise ValueError("speed of sound and sample rate must be positive")
    proj = geom.mic_positions @ psi.psi
    delays = (proj - proj.min()) / c * fs
    delays.setflags(write=False)
    return DelaySet(delays, float(fs))


def random_geometry(seed: int, M: int = DEFAULT_NUM_MICS,
                    aperture: float = DEFAULT_APERTURE) -> ArrayGeometry:
    """Pseudorandom planar array (z = 0) inside a disc of diameter ``aperture``.

    A single microphone sits at the origin.
    """
    if M < 1:
        raise GeometryError("M must be >= 1")
    if aperture <= 0:
        raise GeometryError("aperture must be positive")
    if M == 1:
        return ArrayGeometry(np.zeros((1, 3)))
    rng = np.random.default_rng(seed)
    radius = aperture / 2
    pts: list[np.ndarray] = []
    # rejection sampling with a minimum spacing keeps the layout usable
    min_spacing = 0.5 * aperture / np.sqrt(M) / 2
    while len(pts) < M:
        r = radius * np.sqrt(rng.random())
        th = 2 * np.pi * rng.random()
        p = np.array([r * np.cos(th), r * np.sin(th), 0.0])
        if all(np.linalg.norm(p - q) >= min_spacing for q in pts):
            pts.append(p)
    return ArrayGeometry(np.array(pts))


def save_geometry(geom: ArrayGeometry, path) -> None:
    lines = ["# x y z (meters)"]
    lines += [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in geom.mic_positions]
    Path(path).write_text("\n".join(lines) + "\n")


def load_geometry(path) -> ArrayGeometry:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise GeometryError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise GeometryError(f"{path}: no microphone positions")
    return ArrayGeometry(np.array(rows))
