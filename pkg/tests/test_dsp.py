import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from toolwear.array_model import ArrayGeometry, SteeringDirection, random_geometry, steering_delays
from toolwear.dsp import (BeamformedFrame, DelaySet, DimensionError, FilterDesignError,
                          InsufficientDataError, MultichannelFrame, NumericError, apply_filter,
                          delay_and_sum, design_bandpass, fractional_delay_taps, frame_length,
                          frequency_response, process_frame, welch_psd)
from toolwear.synth import SceneConfig, WearProfile, synth_capture

FS = 450e3
L = 18000


def db(x):
    return 20 * np.log10(np.abs(x))


def frame(x, fs=FS):
    return MultichannelFrame(np.asarray(x), fs, 0, 1)


# ----------------------------------------------------------------------------
# framing


def test_frame_length_is_40ms():
    assert frame_length(FS) == 18000
    with pytest.raises(DimensionError):
        MultichannelFrame(np.zeros((2, 100)), FS, 0, 1)
    with pytest.raises(NumericError):
        MultichannelFrame(np.full((2, L), np.inf), FS, 0, 1)


# ----------------------------------------------------------------------------
# filter design


def test_lowpass_edges():
    c = design_bandpass(6, 0, 60e3, FS)
    h = frequency_response(c, [0, 60e3, 100e3])
    assert abs(db(h[0])) <= 0.01
    assert abs(db(h[1]) + 3.01) <= 0.1
    assert db(h[2]) <= -30
    assert c.order == 6 and c.kind == "lowpass" and c.is_stable()


def test_lowpass_matches_scipy_butter():
    ours = design_bandpass(6, 0, 60e3, FS)
    ref = signal.butter(6, 60e3, fs=FS, output="sos")
    f = np.linspace(0, FS / 2 - 1, 2001)
    _, h_ref = signal.sosfreqz(ref, worN=f, fs=FS)
    np.testing.assert_allclose(np.abs(frequency_response(ours, f)), np.abs(h_ref), atol=1e-9)


def test_bandpass_matches_scipy_butter():
    ours = design_bandpass(6, 20e3, 60e3, FS)
    ref = signal.butter(3, [20e3, 60e3], btype="bandpass", fs=FS, output="sos")
    f = np.linspace(1, FS / 2 - 1, 2001)
    _, h_ref = signal.sosfreqz(ref, worN=f, fs=FS)
    np.testing.assert_allclose(np.abs(frequency_response(ours, f)), np.abs(h_ref), atol=1e-9)
    np.testing.assert_allclose(db(frequency_response(ours, [20e3, 60e3])), -3.0103, atol=1e-3)


def test_design_errors():
    with pytest.raises(FilterDesignError):
        design_bandpass(6, 0, FS / 2, FS)
    with pytest.raises(FilterDesignError):
        design_bandpass(0, 0, 60e3, FS)
    with pytest.raises(FilterDesignError):
        design_bandpass(6, 70e3, 60e3, FS)
    with pytest.raises(FilterDesignError):
        design_bandpass(3, 10e3, 60e3, FS)


@given(st.integers(1, 10), st.floats(0.01, 0.45))
def test_lowpass_designs_are_stable(order, fc):
    c = design_bandpass(order, 0, fc * FS, FS)
    assert np.all(c.pole_magnitudes() < 1)


@given(st.integers(1, 5), st.floats(0.01, 0.2), st.floats(0.05, 0.2))
def test_bandpass_designs_are_stable(half, lo, width):
    hi = min(lo + width, 0.45)
    c = design_bandpass(2 * half, lo * FS, hi * FS, FS)
    assert np.all(c.pole_magnitudes() < 1)


def test_apply_filter_zero_dc_and_stopband():
    c = design_bandpass(6, 0, 60e3, FS)
    assert np.all(apply_filter(c, np.zeros(L)) == 0)
    y = apply_filter(c, np.ones(L))
    assert abs(y[-1000:] - 1.0).max() <= 1e-6
    t = np.arange(L) / FS
    y = apply_filter(c, np.sin(2 * np.pi * 100e3 * t))
    bound = abs(frequency_response(c, [100e3])[0])
    assert bound <= 10 ** (-30 / 20)
    assert np.abs(y[-2000:]).max() <= bound * 1.001
    out = apply_filter(c, BeamformedFrame(np.ones(L), FS, 3))
    assert isinstance(out, BeamformedFrame) and out.frame_index == 3 and len(out.samples) == L
    with pytest.raises(NumericError):
        apply_filter(c, np.array([0.0, np.nan]))


# ----------------------------------------------------------------------------
# delay-and-sum


def test_identical_channels_zero_delay_is_identity():
    rng = np.random.default_rng(0)
    s = rng.normal(size=L)
    out = delay_and_sum(frame(np.tile(s, (4, 1))), DelaySet(np.zeros(4), FS))
    np.testing.assert_allclose(out.samples, s, rtol=0, atol=1e-12)


def test_integer_delays_equal_brute_force_shift_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, L))
    d = np.array([0, 3, 17, 1, 250, 9])
    expected = np.zeros(L)
    for m in range(6):
        for n in range(d[m], L):
            expected[n] += x[m, n - d[m]]
    expected /= 6
    out = delay_and_sum(frame(x), DelaySet(d.astype(float), FS))
    np.testing.assert_allclose(out.samples, expected, rtol=0, atol=1e-13)


def test_fractional_delay_matches_ideal_delay_on_bandlimited_signal():
    # periodic band-limited test signal: the ideal delay is a phase ramp
    rng = np.random.default_rng(2)
    f = np.fft.rfftfreq(L, 1 / FS)
    spec = (rng.normal(size=f.size) + 1j * rng.normal(size=f.size)) * (f < 100e3)
    x = np.fft.irfft(spec, L)
    d = 12.37
    ideal = np.fft.irfft(spec * np.exp(-2j * np.pi * f * d / FS), L)
    taps = fractional_delay_taps(0.37)
    assert abs(taps.sum() - 1) < 1e-12
    out = delay_and_sum(frame(np.stack([x, x])), DelaySet(np.array([d, d]), FS)).samples
    core = slice(100, L - 100)
    assert np.max(np.abs(out[core] - ideal[core])) < 1e-3 * np.max(np.abs(ideal))


def test_channel_count_mismatch():
    with pytest.raises(DimensionError):
        delay_and_sum(frame(np.zeros((3, L))), DelaySet(np.zeros(4), FS))


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_delay_and_sum_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    geom = random_geometry(seed, 8)
    delays = steering_delays(geom, SteeringDirection.from_vector((0.3, 0.2, 0.9)))
    x, y = rng.normal(size=(2, 8, L))
    lhs = delay_and_sum(frame(a * x + b * y), delays).samples
    rhs = a * delay_and_sum(frame(x), delays).samples + b * delay_and_sum(frame(y), delays).samples
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(st.integers(0, 10_000))
def test_beamform_then_filter_is_linear(seed):
    rng = np.random.default_rng(seed)
    geom = random_geometry(seed, 4)
    delays = steering_delays(geom, SteeringDirection.from_vector((0.1, -0.2, 0.9)))
    c = design_bandpass(6, 0, 60e3, FS)
    x, y = rng.normal(size=(2, 4, L))

    def eq1(v):
        return apply_filter(c, delay_and_sum(frame(v), delays)).samples

    np.testing.assert_allclose(eq1(2 * x - y), 2 * eq1(x) - eq1(y), atol=1e-9)


def snr_gain_db(M=32, trials=100, seed=0):
    """Monte-Carlo array gain: on-axis tone plus unit white noise per channel."""
    geom = random_geometry(7, M)
    delays = steering_delays(geom, SteeringDirection((0.0, 0.0, 1.0)))
    rng = np.random.default_rng(seed)
    k = 400  # tone on an exact Welch bin
    t = np.arange(L)
    tone = 0.5 * np.sin(2 * np.pi * k * t / 1024)
    sig_bins = slice(k - 3, k + 4)
    ratios = []
    for _ in range(trials):
        x = tone + rng.normal(size=(M, L))
        single = welch_psd(x[0]).power
        beam = welch_psd(delay_and_sum(frame(x), delays)).power

        def snr(p):
            noise = np.delete(p[10:500], np.arange(k - 13, k - 3))
            return (p[sig_bins].sum() - 7 * noise.mean()) / noise.mean()

        ratios.append((snr(beam), snr(single)))
    r = np.mean(ratios, axis=0)
    return 10 * np.log10(r[0] / r[1])


def test_array_gain_monte_carlo():
    g = snr_gain_db(trials=100)
    assert abs(g - 10 * np.log10(32)) <= 1.0


def test_steering_peaks_at_the_source_direction():
    src = SteeringDirection.from_vector((0.3, 0.2, 0.932738))
    scene = SceneConfig(source_dir=tuple(src.psi), interferer_gain=0, machine_noise_gain=0,
                        sensor_noise_sigma=0)
    geom = random_geometry(7)
    x = synth_capture(200, 0, scene, WearProfile(), geom, seed=5)
    rng = np.random.default_rng(9)
    grid = []
    while len(grid) < 60:
        v = rng.normal(size=3)
        v[2] = abs(v[2])
        if np.linalg.norm(v) > 1e-3:
            grid.append(SteeringDirection.from_vector(v))

    def power(psi):
        return np.mean(delay_and_sum(x, steering_delays(geom, psi)).samples ** 2)

    p_true = power(src)
    assert all(p_true >= power(psi) for psi in grid)


# ----------------------------------------------------------------------------
# Welch


def welch_oracle(x, n=1024, step=512, fs=FS):
    """Direct DFT over explicitly enumerated Hamming-windowed segments."""
    w = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)
    k = np.arange(n // 2 + 1)
    dft = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    acc = np.zeros(k.size)
    count = 0
    start = 0
    while start + n <= len(x):
        acc += np.abs(dft @ (x[start:start + n] * w)) ** 2
        count += 1
        start += step
    p = acc / count / (fs * np.sum(w ** 2))
    p[1:-1] *= 2
    return p


def test_welch_matches_direct_dft_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.normal(size=L) * rng.uniform(0.1, 10)
        ours = welch_psd(x).power
        ref = welch_oracle(x)
        assert np.max(np.abs(ours - ref) / ref) <= 1e-6


def test_welch_zero_and_parseval():
    assert np.all(welch_psd(np.zeros(L)).power == 0)
    x = np.random.default_rng(4).normal(size=L)
    ps = welch_psd(x)
    assert ps.power.size == 513
    assert abs(np.sum(ps.power * ps.bin_width) - 1.0) <= 0.1


def test_welch_bin_centred_sinusoid():
    A = 2.5
    t = np.arange(L) / FS
    ps = welch_psd(A * np.sin(2 * np.pi * 100 * FS / 1024 * t + 0.3))
    assert int(np.argmax(ps.power)) == 100
    peak = np.sum(ps.power[97:104]) * ps.bin_width
    assert abs(peak - A ** 2 / 2) <= 0.05 * A ** 2 / 2


def test_welch_short_signal():
    with pytest.raises(InsufficientDataError):
        welch_psd(np.zeros(1000))


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_welch_is_non_negative(seed, scale):
    x = np.random.default_rng(seed).standard_cauchy(4096) * scale
    assert np.all(welch_psd(x).power >= 0)


def test_process_frame_shape():
    geom = ArrayGeometry([[0, 0, 0], [0.01, 0, 0]])
    delays = steering_delays(geom, SteeringDirection((0, 0, 1)))
    x = np.random.default_rng(5).normal(size=(2, L))
    ps = process_frame(frame(x), delays, design_bandpass(6, 0, 60e3, FS))
    assert ps.power.shape == (513,) and ps.freqs[-1] == FS / 2
