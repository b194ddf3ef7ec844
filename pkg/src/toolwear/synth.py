"""Synthetic multichannel captures with a run-dependent tool-wear signature.

Each capture is the superposition of four components:

* cutting emission: a Gaussian-shaped band whose centre frequency drifts
  upward and whose level rises as the insert wears, arriving from the tool
  direction;
* machine motion noise below 5 kHz, also from the tool direction;
* a broadband interferer from a second direction;
* independent sensor noise on every microphone.

Source signals are generated in the frequency domain and are periodic over
the 40 ms frame, so every plane-wave delay, fractional or not, is applied
exactly as a linear phase.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .array_model import SPEED_OF_SOUND, ArrayGeometry, SteeringDirection, steering_delays
from .dsp import (SAMPLE_RATE, WELCH_WINDOW, MultichannelFrame,
                  design_bandpass, frame_length, process_frame)
from .spectrogram import MATERIALS, Spectrogram, assemble, normalize_db

log = logging.getLogger(__name__)

MACHINE_BAND = (100.0, 5e3)
INTERFERER_BAND = (1e3, 100e3)
EMISSION_LIMITS = (20e3, 60e3)

# component ids used to derive independent random streams
_EMISSION, _MACHINE, _INTERFERER, _SENSOR, _MATERIAL = range(5)
_INT8_STD = np.sqrt((256**2 - 1) / 12)


class InvalidRunError(ValueError):
    pass


@dataclass(frozen=True)
class WearProfile:
    """Cutting-emission signature as a function of run fraction u in [0, 1].

    The centre frequency moves linearly from ``centroid_start`` to
    ``centroid_end``; the emission power in dB is
    ``gain_start_db + gain_rise_db * u**gain_exponent``.
    """

    centroid_start: float = 30e3
    centroid_end: float = 45e3
    bandwidth: float = 5e3  # std of the Gaussian power envelope
    gain_start_db: float = 0.0
    gain_rise_db: float = 6.0
    gain_exponent: float = 2.0
    material_gain_db: tuple[float, float] = (-2.0, 2.0)  # per MATERIALS entry
    material_centroid_hz: tuple[float, float] = (-150.0, 150.0)

    def __post_init__(self):
        if not self.centroid_end > self.centroid_start:
            raise ValueError("centroid_end must exceed centroid_start (wear drifts upward)")
        lo = self.centroid_start + min(self.material_centroid_hz)
        hi = self.centroid_end + max(self.material_centroid_hz)
        if not (EMISSION_LIMITS[0] < lo and hi < EMISSION_LIMITS[1]):
            raise ValueError(f"centroid trajectory [{lo}, {hi}] Hz leaves {EMISSION_LIMITS}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.gain_rise_db < 0 or self.gain_exponent <= 0:
            raise ValueError("emission gain curve must be non-decreasing")
        if len(self.material_gain_db) != len(MATERIALS) or len(self.material_centroid_hz) != len(MATERIALS):
            raise ValueError("one material offset per material is required")

    def centroid(self, u) -> np.ndarray:
        return self.centroid_start + (self.centroid_end - self.centroid_start) * np.asarray(u, float)

    def gain_db(self, u) -> np.ndarray:
        return self.gain_start_db + self.gain_rise_db * np.asarray(u, float) ** self.gain_exponent


@dataclass(frozen=True)
class SceneConfig:
    source_dir: tuple[float, float, float] = (0.3, 0.2, 0.932738)
    interferer_dir: tuple[float, float, float] = (-0.7, 0.3, 0.648074)
    interferer_gain: float = 1.0  # power
    machine_noise_gain: float = 10.0  # power
    sensor_noise_sigma: float = 0.3
    n_total: int = 350
    sensor_pos: str = "inside"
    fs: float = SAMPLE_RATE
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        src = SteeringDirection.from_vector(self.source_dir)
        itf = SteeringDirection.from_vector(self.interferer_dir)
        if np.allclose(src.psi, itf.psi):
            raise ValueError("interferer direction must differ from source direction")
        if min(self.interferer_gain, self.machine_noise_gain, self.sensor_noise_sigma) < 0:
            raise ValueError("gains must be non-negative")
        if self.n_total < 2:
            raise ValueError("n_total must be >= 2")

    @property
    def source(self) -> SteeringDirection:
        return SteeringDirection.from_vector(self.source_dir)

    @property
    def interferer(self) -> SteeringDirection:
        return SteeringDirection.from_vector(self.interferer_dir)


def run_fraction(run: int, n_total: int) -> float:
    return (run - 1) / (n_total - 1)


def run_material(run: int, seed: int) -> str:
    rng = np.random.default_rng([seed, _MATERIAL, run])
    return MATERIALS[int(rng.integers(len(MATERIALS)))]


class _Renderer:
    """Precomputed per-microphone phase ramps for one scene and geometry.

    Only bins below ``max_freq`` are ever populated, which keeps the phase
    products cheap.
    """

    def __init__(self, scene: SceneConfig, wear: WearProfile, geom: ArrayGeometry):
        self.scene, self.wear, self.geom = scene, wear, geom
        self.L = frame_length(scene.fs)
        self.freqs = np.arange(self.L // 2 + 1) * scene.fs / self.L
        top = max(INTERFERER_BAND[1], EMISSION_LIMITS[1] + 8 * wear.bandwidth)
        # DC and Nyquist stay empty: a real-valued bin cannot carry a delay
        self.nbins = min(int(np.searchsorted(self.freqs, top, side="right")), len(self.freqs) - 1)
        self.f = self.freqs[:self.nbins]
        self.phase_src = self._phases(scene.source)
        self.phase_itf = self._phases(scene.interferer)
        self.machine_env = self._band(*MACHINE_BAND)
        self.interferer_env = self._band(*INTERFERER_BAND)

    def _phases(self, direction: SteeringDirection) -> np.ndarray:
        # a mic further along ``direction`` hears the source earlier
        advance = self.geom.mic_positions @ direction.psi / self.scene.c
        return np.exp(2j * np.pi * np.outer(advance, self.f)).astype(np.complex64)

    def _band(self, lo, hi) -> np.ndarray:
        env = ((self.f >= lo) & (self.f <= hi)).astype(np.float64)
        env[0] = 0.0
        return env

    def emission_env(self, run: int, material: str) -> np.ndarray:
        u = run_fraction(run, self.scene.n_total)
        mi = MATERIALS.index(material)
        fc = self.wear.centroid(u) + self.wear.material_centroid_hz[mi]
        env = np.exp(-0.5 * ((self.f - fc) / self.wear.bandwidth) ** 2)
        env[0] = 0.0
        return env

    def emission_power(self, run: int, material: str) -> float:
        u = run_fraction(run, self.scene.n_total)
        mi = MATERIALS.index(material)
        return 10 ** ((self.wear.gain_db(u) + self.wear.material_gain_db[mi]) / 10)

    def _spectrum(self, rng, env: np.ndarray, power: float) -> np.ndarray:
        """Random spectrum whose periodic time signal has expected variance ``power``."""
        total = env.sum()
        if power == 0 or total == 0:
            return np.zeros(len(env), np.complex64)
        amp = np.sqrt(env * (power * self.L**2 / (4 * total)))
        z = rng.standard_normal((2, len(env)))
        return (amp * (z[0] + 1j * z[1])).astype(np.complex64)

    def render(self, run: int, frame_index: int, seed: int) -> np.ndarray:
        sc = self.scene
        material = run_material(run, seed)
        streams = [np.random.default_rng([seed, run, frame_index, comp]) for comp in range(4)]
        s_src = (self._spectrum(streams[_EMISSION], self.emission_env(run, material),
                                self.emission_power(run, material))
                 + self._spectrum(streams[_MACHINE], self.machine_env, sc.machine_noise_gain))
        spec = np.zeros((self.geom.M, len(self.freqs)), dtype=np.complex64)
        band = spec[:, :self.nbins]
        np.multiply(self.phase_src, s_src, out=band)
        if sc.interferer_gain > 0:
            s_itf = self._spectrum(streams[_INTERFERER], self.interferer_env, sc.interferer_gain)
            band += self.phase_itf * s_itf
        x = scipy.fft.irfft(spec, self.L, axis=1)
        if sc.sensor_noise_sigma > 0:
            # 8-bit uniform noise scaled to the requested standard deviation
            raw = np.frombuffer(streams[_SENSOR].bytes(x.size), dtype=np.int8).reshape(x.shape)
            noise = raw.astype(np.float32)
            noise += np.float32(0.5)
            noise *= np.float32(sc.sensor_noise_sigma / _INT8_STD)
            x += noise
        return x


@lru_cache(maxsize=4)
def _renderer(scene: SceneConfig, wear: WearProfile, geom_key: bytes) -> _Renderer:
    pos = np.frombuffer(geom_key, dtype=np.float64).reshape(-1, 3)
    return _Renderer(scene, wear, ArrayGeometry(pos))


def get_renderer(scene: SceneConfig, wear: WearProfile, geom: ArrayGeometry) -> _Renderer:
    return _renderer(scene, wear, geom.mic_positions.tobytes())


def synth_capture(run: int, frame_index: int, scene: SceneConfig, wear: WearProfile,
                  geom: ArrayGeometry, seed: int) -> MultichannelFrame:
    """One 40 ms capture for workpiece ``run`` (1-based)."""
    if not 1 <= run <= scene.n_total or int(run) != run:
        raise InvalidRunError(f"run {run} outside 1..{scene.n_total}")
    x = get_renderer(scene, wear, geom).render(int(run), int(frame_index), seed)
    return MultichannelFrame(x, scene.fs, frame_index, run)


@dataclass(frozen=True)
class DspSettings:
    band: tuple[float, float] = (0.0, 60e3)
    order: int = 6
    window: int = WELCH_WINDOW
    overlap: float = 0.5


def _raw_run(args) -> np.ndarray:
    run, scene, wear, geom_key, frames_per_run, seed, dsp = args
    pos = np.frombuffer(geom_key, dtype=np.float64).reshape(-1, 3)
    geom = ArrayGeometry(pos)
    delays = steering_delays(geom, scene.source, scene.c, scene.fs)
    coeffs = design_bandpass(dsp.order, dsp.band[0], dsp.band[1], scene.fs)
    spectra = [process_frame(synth_capture(run, n, scene, wear, geom, seed), delays, coeffs,
                             dsp.window, dsp.overlap)
               for n in range(frames_per_run)]
    return assemble(spectra)


def worker_count() -> int:
    env = os.environ.get("TOOLWEAR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def synth_raw(scene: SceneConfig, wear: WearProfile, geom: ArrayGeometry, frames_per_run: int,
              seed: int, dsp: DspSettings = DspSettings(), workers: int | None = None,
              progress=None) -> list[np.ndarray]:
    """Raw (linear power) B x N matrix for every run, in run order."""
    if frames_per_run < 1:
        raise ValueError("frames_per_run must be >= 1")
    if frame_length(scene.fs) < dsp.window:
        raise ValueError("a 40 ms frame is shorter than one Welch window")
    jobs = [(run, scene, wear, geom.mic_positions.tobytes(), frames_per_run, seed, dsp)
            for run in range(1, scene.n_total + 1)]
    workers = worker_count() if workers is None else workers
    out = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for raw in pool.map(_raw_run, jobs, chunksize=4):
                out.append(raw)
                if progress:
                    progress(len(out), len(jobs))
    else:
        for job in jobs:
            out.append(_raw_run(job))
            if progress:
                progress(len(out), len(jobs))
    return out


def synth_dataset(scene: SceneConfig, wear: WearProfile, geom: ArrayGeometry,
                  frames_per_run: int = 128, seed: int = 0, dsp: DspSettings = DspSettings(),
                  per_run_reference: bool = False, workers: int | None = None,
                  progress=None) -> list[Spectrogram]:
    """Run every synthetic capture through beamformer, filter and Welch, then to dB."""
    raws = synth_raw(scene, wear, geom, frames_per_run, seed, dsp, workers, progress)
    global_ref = max(float(r.max()) for r in raws)
    out = []
    for run, raw in enumerate(raws, start=1):
        ref = float(raw.max()) if per_run_reference else global_ref
        out.append(Spectrogram(normalize_db(raw, ref), run, run_material(run, seed), scene.sensor_pos))
    return out
