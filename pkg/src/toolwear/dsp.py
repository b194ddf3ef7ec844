"""Beamforming, Butterworth filtering and Welch spectra for one 40 ms capture.

The per-frame chain is ``apply_filter(design, delay_and_sum(frame, delays))``
followed by ``welch_psd``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import sosfilt

from .array_model import DelaySet

FRAME_DURATION = 0.040  # s
FRAME_RATE = 10.0  # Hz
SAMPLE_RATE = 450e3  # Hz
WELCH_WINDOW = 1024

FRACDELAY_TAPS = 31
FRACDELAY_BETA = 8.0


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class FilterDesignError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def frame_length(fs: float) -> int:
    return int(round(fs * FRAME_DURATION))


@dataclass(frozen=True)
class MultichannelFrame:
    samples: np.ndarray  # (M, L)
    fs: float = SAMPLE_RATE
    frame_index: int = 0
    run_id: int = 0

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim != 2:
            raise DimensionError(f"frame must be (M, L), got shape {x.shape}")
        if x.shape[1] != frame_length(self.fs):
            raise DimensionError(
                f"frame length {x.shape[1]} != {frame_length(self.fs)} samples "
                f"({FRAME_DURATION * 1e3:g} ms at {self.fs:g} Hz)")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite sample in frame")
        object.__setattr__(self, "samples", x)

    @property
    def M(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class BeamformedFrame:
    samples: np.ndarray  # (L,)
    fs: float = SAMPLE_RATE
    frame_index: int = 0


@dataclass(frozen=True)
class FilterCoefficients:
    sos: np.ndarray  # (n_sections, 6): b0 b1 b2 a0 a1 a2, a0 == 1
    order: int
    f_lo: float
    f_hi: float
    fs: float
    kind: str = "lowpass"

    def pole_magnitudes(self) -> np.ndarray:
        mags = []
        for sec in self.sos:
            a = sec[3:]
            if a[2] == 0.0:
                mags.append(abs(a[1]))
            else:
                mags.extend(np.abs(np.roots(a)))
        return np.array(mags)

    def is_stable(self) -> bool:
        return bool(np.all(self.pole_magnitudes() < 1.0))


@dataclass(frozen=True)
class PowerSpectrum:
    power: np.ndarray  # (window_len // 2 + 1,)
    freqs: np.ndarray = field(repr=False)

    @property
    def bin_width(self) -> float:
        return float(self.freqs[1] - self.freqs[0])


# ----------------------------------------------------------------------------
# Butterworth design


def _bilinear_section(b, a, k):
    """Bilinear transform (s = k (1 - z^-1) / (1 + z^-1)) of an analog section.

    ``b`` and ``a`` are (s^2, s^1, s^0) coefficients. First-order sections
    (zero s^2 term in the denominator) map to first-order digital sections.
    """
    b2, b1, b0 = b
    a2, a1, a0 = a
    if a2 == 0.0:
        num = np.array([b0 + b1 * k, b0 - b1 * k, 0.0])
        den = np.array([a0 + a1 * k, a0 - a1 * k, 0.0])
    else:
        kk = k * k
        num = np.array([b2 * kk + b1 * k + b0, 2 * (b0 - b2 * kk), b2 * kk - b1 * k + b0])
        den = np.array([a2 * kk + a1 * k + a0, 2 * (a0 - a2 * kk), a2 * kk - a1 * k + a0])
    return np.concatenate([num / den[0], den / den[0]])


def _prototype_poles(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(1j * np.pi * (2 * k + n + 1) / (2 * n))


def _pair_poles(poles: np.ndarray) -> list[tuple[complex, complex | None]]:
    """Group analog poles into conjugate pairs; real poles pair with each other."""
    tol = 1e-9 * max(1.0, float(np.max(np.abs(poles))))
    upper = sorted((p for p in poles if p.imag > tol), key=lambda p: p.imag)
    real = sorted(p.real for p in poles if abs(p.imag) <= tol)
    pairs: list[tuple[complex, complex | None]] = [(p, np.conj(p)) for p in upper]
    while len(real) >= 2:
        pairs.append((complex(real.pop(0)), complex(real.pop(0))))
    if real:
        pairs.append((complex(real[0]), None))
    return pairs


def design_bandpass(order: int, f_lo: float, f_hi: float, fs: float) -> FilterCoefficients:
    """Digital Butterworth filter in second-order sections.

    ``f_lo == 0`` gives an order-``order`` lowpass at ``f_hi``; otherwise a
    bandpass of total order ``order`` (which must then be even). Band edges
    are pre-warped so the -3.01 dB points land exactly on them.
    """
    if order < 1 or int(order) != order:
        raise FilterDesignError(f"invalid filter order {order!r}")
    if fs <= 0:
        raise FilterDesignError("sample rate must be positive")
    if not 0 <= f_lo < f_hi:
        raise FilterDesignError(f"band edges must satisfy 0 <= f_lo < f_hi, got {f_lo}, {f_hi}")
    if f_hi >= fs / 2:
        raise FilterDesignError(f"upper band edge {f_hi} Hz must be below Nyquist {fs / 2} Hz")
    order = int(order)
    k = 2.0 * fs
    w_hi = k * np.tan(np.pi * f_hi / fs)
    sections = []

    if f_lo == 0:
        for p, q in _pair_poles(_prototype_poles(order) * w_hi):
            if q is None:
                sections.append(_bilinear_section((0.0, 0.0, -p.real), (0.0, 1.0, -p.real), k))
            else:
                a1 = -(p + q).real
                a0 = (p * q).real
                sections.append(_bilinear_section((0.0, 0.0, a0), (1.0, a1, a0), k))
        kind = "lowpass"
    else:
        if order % 2:
            raise FilterDesignError("bandpass order must be even")
        w_lo = k * np.tan(np.pi * f_lo / fs)
        bw = w_hi - w_lo
        w0sq = w_lo * w_hi
        bp_poles = []
        for p in _prototype_poles(order // 2):
            # roots of s^2 - p bw s + w0^2
            disc = np.sqrt((p * bw) ** 2 - 4 * w0sq + 0j)
            bp_poles += [(p * bw + disc) / 2, (p * bw - disc) / 2]
        for p, q in _pair_poles(np.array(bp_poles)):
            a1 = -(p + q).real
            a0 = (p * q).real
            sections.append(_bilinear_section((0.0, bw, 0.0), (1.0, a1, a0), k))
        kind = "bandpass"

    sos = np.array(sections)
    coeffs = FilterCoefficients(sos, order, float(f_lo), float(f_hi), float(fs), kind)
    # absorb residual rounding so the passband reference gain is exactly 1
    if kind == "lowpass":
        f_ref = 0.0
    else:
        f_ref = fs / np.pi * np.arctan(np.sqrt(w0sq) / k)
    g = np.abs(frequency_response(coeffs, np.array([f_ref]))[0])
    sos[0, :3] /= g
    if not coeffs.is_stable():
        raise FilterDesignError("designed filter is unstable")
    return coeffs


def frequency_response(coeffs: FilterCoefficients, freqs) -> np.ndarray:
    """Complex response of the SOS cascade evaluated at ``freqs`` (Hz)."""
    freqs = np.asarray(freqs, dtype=np.float64)
    zinv = np.exp(-2j * np.pi * freqs / coeffs.fs)
    h = np.ones_like(zinv)
    for b0, b1, b2, a0, a1, a2 in coeffs.sos:
        h *= (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
    return h


def apply_filter(coeffs: FilterCoefficients, x):
    """Run the biquad cascade over one frame with zero initial state."""
    is_frame = isinstance(x, BeamformedFrame)
    data = np.asarray(x.samples if is_frame else x)
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite input to filter")
    y = sosfilt(coeffs.sos, data, axis=-1)
    if data.dtype == np.float32:
        y = y.astype(np.float32)
    if is_frame:
        return BeamformedFrame(y, x.fs, x.frame_index)
    return y


# ----------------------------------------------------------------------------
# Delay-and-sum


def fractional_delay_taps(frac: float, ntaps: int = FRACDELAY_TAPS,
                          beta: float = FRACDELAY_BETA) -> np.ndarray:
    """Kaiser-windowed sinc taps delaying by ``frac`` in [-0.5, 0.5] samples.

    Tap ``i`` multiplies ``x[n - (i - ntaps // 2)]``. Taps are normalized to
    unit DC gain.
    """
    half = ntaps // 2
    t = np.arange(-half, half + 1) - frac
    span = half + 0.5
    w = np.i0(beta * np.sqrt(np.clip(1 - (t / span) ** 2, 0.0, None))) / np.i0(beta)
    h = np.sinc(t) * w
    return h / h.sum()


def _shift(x: np.ndarray, d: int) -> np.ndarray:
    """Delay the last axis by ``d`` >= 0 samples, zero filled."""
    out = np.zeros_like(x)
    if d < x.shape[-1]:
        out[..., d:] = x[..., : x.shape[-1] - d]
    return out


class _FractionalKernels:
    """Frequency-domain kernels for the fractionally delayed channels."""

    def __init__(self, delays: tuple[float, ...], length: int, dtype):
        d = np.asarray(delays)
        whole = np.round(d).astype(int)
        frac = d - whole
        self.fractional = np.flatnonzero(frac != 0.0)
        self.integer = np.flatnonzero(frac == 0.0)
        self.whole = whole
        half = FRACDELAY_TAPS // 2
        self.offset = half
        if len(self.fractional):
            kernel_len = int(whole[self.fractional].max()) + FRACDELAY_TAPS
            self.nfft = scipy.fft.next_fast_len(length + kernel_len - 1, real=True)
            kernels = np.zeros((len(self.fractional), kernel_len))
            for row, m in enumerate(self.fractional):
                start = whole[m]  # tap for x[n - (whole - half)] lands at index whole
                kernels[row, start:start + FRACDELAY_TAPS] = fractional_delay_taps(frac[m])
            spec = scipy.fft.rfft(kernels, self.nfft, axis=1)
            self.spectra = spec.astype(np.complex64 if dtype == np.float32 else np.complex128)


@lru_cache(maxsize=16)
def _kernels(delays: tuple[float, ...], length: int, dtype_name: str) -> _FractionalKernels:
    return _FractionalKernels(delays, length, np.dtype(dtype_name))


def delay_and_sum(frame: MultichannelFrame, delays: DelaySet) -> BeamformedFrame:
    """Align every channel with its steering delay and average over channels.

    Integer delays are applied as plain sample shifts; fractional delays use a
    31-tap Kaiser-windowed sinc, applied by FFT convolution.
    """
    x = frame.samples
    M, L = x.shape
    d = np.asarray(delays.delays, dtype=np.float64)
    if d.shape != (M,):
        raise DimensionError(f"frame has {M} channels but {d.size} delays were given")
    if np.any(d < 0) or np.any(d >= L) or not np.all(np.isfinite(d)):
        raise DimensionError("delays must be finite and within [0, L)")
    dtype = np.float32 if x.dtype == np.float32 else np.float64
    x = x.astype(dtype, copy=False)
    k = _kernels(tuple(d.tolist()), L, np.dtype(dtype).name)

    if len(k.integer) == M:
        shifted = np.stack([_shift(x[m], k.whole[m]) for m in range(M)])
        return BeamformedFrame(shifted.sum(axis=0) / M, frame.fs, frame.frame_index)

    total = np.zeros(L, dtype=dtype)
    for m in k.integer:
        total += _shift(x[m], k.whole[m])
    xf = scipy.fft.rfft(x if len(k.fractional) == M else x[k.fractional], k.nfft, axis=1)
    spec = np.einsum("mk,mk->k", xf, k.spectra)
    full = scipy.fft.irfft(spec, k.nfft)
    total += full[k.offset:k.offset + L].astype(dtype, copy=False)
    return BeamformedFrame(total / M, frame.fs, frame.frame_index)


# ----------------------------------------------------------------------------
# Welch PSD


def hamming(n: int) -> np.ndarray:
    """Periodic Hamming window (DFT-even), as used for spectral analysis."""
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)


def welch_psd(x, window_len: int = WELCH_WINDOW, overlap_fraction: float = 0.5,
              fs: float | None = None) -> PowerSpectrum:
    """One-sided Welch power spectral density with a Hamming window.

    Density scaling: summing ``power * bin_width`` recovers the signal
    variance for white noise. No detrending is applied.
    """
    if isinstance(x, BeamformedFrame):
        fs = x.fs if fs is None else fs
        x = x.samples
    fs = SAMPLE_RATE if fs is None else fs
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("welch_psd expects a 1-D signal")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    if len(x) < window_len:
        raise InsufficientDataError(f"signal of {len(x)} samples is shorter than one "
                                    f"{window_len}-sample window")
    step = max(1, int(round(window_len * (1 - overlap_fraction))))
    segments = sliding_window_view(x, window_len)[::step]
    w = hamming(window_len)
    spec = np.fft.rfft(segments * w, axis=1)
    power = (spec.real**2 + spec.imag**2).mean(axis=0) / (fs * np.sum(w**2))
    power[1:-1 if window_len % 2 == 0 else None] *= 2
    freqs = np.arange(window_len // 2 + 1) * fs / window_len
    return PowerSpectrum(power, freqs)


def process_frame(frame: MultichannelFrame, delays: DelaySet, coeffs: FilterCoefficients,
                  window_len: int = WELCH_WINDOW, overlap_fraction: float = 0.5) -> PowerSpectrum:
    """Beamform, bandlimit and estimate the spectrum of one capture."""
    y = apply_filter(coeffs, delay_and_sum(frame, delays))
    return welch_psd(y, window_len, overlap_fraction)
